use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use graphae::dataset::Dataset;
use graphae::explore::{export_bottlenecks, nearest_pairs, neighbors_of, SearchMode, EXACT_LIMIT};
use graphae::model::{AssembledModel, Checkpoint, Wiring, WiringConfig};
use graphae::schema::{
    apply_rules, derive_schema_from_tabular, parse_rules, parse_schema, read_entities, validate_entity, ConfigRule,
    DomainSchema, EntityRecord, TabularHints, ValidationReport,
};
use graphae::training::{evaluate_masked, generate_arithmetic, split_dataset, train, Split, TrainConfig};
use serde_json::{json, Value};

use crate::service::{router, AppState, DEFAULT_ADDR};

#[derive(Debug, Parser)]
#[command(name = "graphae", version, about = "Schema-driven graph autoencoders")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSONPath rules file applied after the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model checkpoint to write (train) or read (everything else).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a schema, entities and rules. Exits 1 on errors.
    Validate {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        entities: Option<PathBuf>,
    },
    /// Derive a schema and entities from a CSV table.
    Ingest {
        #[arg(long)]
        table: PathBuf,
        /// JSON-encoded derivation hints.
        #[arg(long)]
        hints: Option<PathBuf>,
        #[arg(long)]
        out_schema: PathBuf,
        #[arg(long)]
        out_entities: PathBuf,
    },
    /// Write random arithmetic expression trees.
    GenerateArithmetic {
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        max_nodes: usize,
        #[arg(long)]
        out_schema: PathBuf,
        #[arg(long)]
        out_entities: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Reconstruct masked properties of a split.
    Evaluate {
        #[arg(long)]
        entities: PathBuf,
        /// Properties to hide, repeatable or comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        mask: Vec<String>,
        /// train, dev, test or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Most similar entity pairs by bottleneck cosine similarity.
    Neighbors {
        #[arg(long)]
        entities: PathBuf,
        /// Only pairs involving this entity.
        #[arg(long)]
        id: Option<String>,
        /// Restrict pairs to one entity-type.
        #[arg(long = "type")]
        entity_type: Option<String>,
        /// With --id, only entities of the same type.
        #[arg(long)]
        same_type: bool,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Defaults to the model depth.
        #[arg(long)]
        depth: Option<usize>,
        /// Also write the bottleneck table here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long, env = "GRAPHAE_ADDR", default_value = DEFAULT_ADDR)]
        addr: String,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub entities: PathBuf,
    /// JSON training configuration; flags below override it.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub depth: usize,
    #[arg(long, default_value = "naive")]
    pub wiring: Wiring,
    #[arg(long)]
    pub bidirectional: bool,
    /// Train, dev and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    /// Per-epoch history as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

/// Failures that map to exit status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn rules(common: &Common) -> Result<Vec<ConfigRule>> {
    match &common.config {
        Some(p) => Ok(parse_rules(&read(p)?)?),
        None => Ok(Vec::new()),
    }
}

fn resolved_schema(path: &Path, common: &Common) -> Result<DomainSchema> {
    let schema = parse_schema(&read(path)?)?;
    let out = apply_rules(&schema, &rules(common)?)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    Ok(out.schema)
}

fn checkpoint(common: &Common) -> Result<Checkpoint> {
    let path = common.checkpoint.as_ref().context("--checkpoint is required")?;
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn packed_dataset(model: &AssembledModel, entities: &Path) -> Result<Dataset> {
    let raw = read_entities(&read(entities)?)?;
    Ok(Dataset::new(model.schema().clone(), &raw)?.with_codecs(model.codecs().clone())?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_entities(path: &Path, entities: &[Value]) -> Result<()> {
    let mut text = String::new();
    for e in entities {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn validate(schema: &Path, entities: Option<&Path>, common: &Common) -> Result<ValidationReport> {
    let mut report = ValidationReport::default();
    let parsed = match parse_schema(&read(schema)?) {
        Ok(s) => s,
        Err(e) => {
            report.errors.extend(e.diagnostics());
            return Ok(report);
        }
    };
    report.warnings.extend(parsed.lint());
    let resolved = match rules(common).and_then(|r| Ok(apply_rules(&parsed, &r)?)) {
        Ok(out) => {
            report.warnings.extend(out.warnings);
            out.schema
        }
        Err(e) => {
            report.error("config", e.to_string());
            return Ok(report);
        }
    };
    if let Some(path) = entities {
        let raw = match read_entities(&read(path)?) {
            Ok(r) => r,
            Err(e) => {
                report.errors.extend(e.diagnostics());
                return Ok(report);
            }
        };
        let mut records = Vec::new();
        for e in &raw {
            let checked = validate_entity(&resolved, e);
            if checked.is_ok() {
                records.extend(EntityRecord::parse(&resolved, e).ok());
            }
            report.merge(checked);
        }
        check_references(&resolved, &records, &mut report);
    }
    Ok(report)
}

/// Duplicate ids and targets of the wrong type are errors. Targets missing
/// from the file are only warned about, since entity files are often partial.
fn check_references(schema: &DomainSchema, records: &[EntityRecord], report: &mut ValidationReport) {
    let mut types: HashMap<&str, &str> = HashMap::new();
    for r in records {
        if types.insert(&r.id, &r.entity_type).is_some() {
            report.error(format!("{}.id", r.id), "duplicate id");
        }
    }
    for r in records {
        for (rel, targets) in &r.relationships {
            let expected = &schema.relationships[rel].target_entity_type;
            for t in targets {
                let loc = format!("{}.{rel}", r.id);
                match types.get(t.as_str()) {
                    None => report.warn(loc, format!("target {t:?} is not in this file")),
                    Some(&found) if found != expected => {
                        report.error(loc, format!("target {t:?} is a {found}, expected {expected}"))
                    }
                    Some(_) => {}
                }
            }
        }
    }
}

fn split_named<'a>(split: &'a Split, name: &str, n: usize, all: &'a mut Vec<usize>) -> Result<&'a [usize]> {
    if name == "all" {
        *all = (0..n).collect();
        return Ok(all);
    }
    split.get(name).with_context(|| format!("unknown split {name:?} (train, dev, test, all)"))
}

fn stored_split(ckpt: &Checkpoint, dataset: &Dataset) -> Result<Split> {
    let fractions: [f64; 3] = serde_json::from_value(ckpt.extra["split"].clone()).unwrap_or([0.8, 0.1, 0.1]);
    let seed = ckpt.extra["seed"].as_u64().unwrap_or(0);
    Ok(split_dataset(dataset, fractions, seed)?)
}

pub fn run_train(args: &TrainArgs, common: &Common) -> Result<()> {
    let schema = resolved_schema(&args.schema, common)?;
    let raw = read_entities(&read(&args.entities)?)?;
    let dataset = Dataset::new(schema, &raw)?;
    let fractions: [f64; 3] = args.split.clone().try_into().map_err(|_| Invalid("--split takes three fractions".into()))?;
    let split = split_dataset(&dataset, fractions, common.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let dataset = dataset.fit(&split.train)?;
    let mut config = match &args.train_config {
        Some(p) => serde_json::from_str(&read(p)?).context("training configuration")?,
        None => TrainConfig::default(),
    };
    config.seed = common.seed;
    if let Some(e) = args.max_epochs {
        config.max_epochs = e;
    }
    if let Some(b) = args.budget {
        config.budget = b;
    }
    let wiring = WiringConfig {
        depth: args.depth,
        wiring: args.wiring,
        bidirectional: args.bidirectional,
        ..Default::default()
    };
    let out_path = common.checkpoint.as_ref().context("--checkpoint is required")?;
    let model = AssembledModel::assemble(dataset.schema(), dataset.codecs(), &wiring, common.seed)?;
    let outcome = train(model, &dataset, &split, &config, |r| {
        eprintln!("epoch {} train {:.5} dev {:.5} lr {}", r.epoch, r.train_loss, r.dev_loss, r.learning_rate)
    })?;
    if let Some(h) = &args.history {
        fs::write(h, outcome.history_jsonl()).with_context(|| format!("writing {}", h.display()))?;
    }
    Checkpoint {
        model: outcome.model,
        extra: json!({
            "split": fractions,
            "seed": common.seed,
            "train_config": config,
            "best_epoch": outcome.best_epoch,
            "best_dev_loss": outcome.best_dev_loss,
        }),
    }
    .save(out_path)?;
    print_json(&json!({
        "checkpoint": out_path,
        "best_epoch": outcome.best_epoch,
        "best_dev_loss": outcome.best_dev_loss,
        "epochs": outcome.history.len(),
    }))
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Validate { schema, entities } => {
            let report = validate(schema, entities.as_deref(), common)?;
            print_json(&report)?;
            if !report.is_ok() {
                bail!(Invalid(format!("{} validation errors", report.errors.len())));
            }
            Ok(())
        }
        Command::Ingest {
            table,
            hints,
            out_schema,
            out_entities,
        } => {
            let hints: TabularHints = match hints {
                Some(p) => serde_json::from_str(&read(p)?).context("hints")?,
                None => TabularHints::default(),
            };
            let derived = derive_schema_from_tabular(&read(table)?, &hints)?;
            fs::write(out_schema, derived.schema.to_json_string())?;
            write_entities(out_entities, &derived.entities)?;
            print_json(&json!({"entities": derived.entities.len(), "entity_types": derived.schema.entity_types.len()}))
        }
        Command::GenerateArithmetic {
            count,
            max_nodes,
            out_schema,
            out_entities,
        } => {
            let (schema, entities) = generate_arithmetic(*count, *max_nodes, common.seed).map_err(Invalid)?;
            fs::write(out_schema, schema.to_json_string())?;
            write_entities(out_entities, &entities)?;
            print_json(&json!({"trees": count, "entities": entities.len()}))
        }
        Command::Train(args) => run_train(args, common),
        Command::Evaluate { entities, mask, split } => {
            let ckpt = checkpoint(common)?;
            let dataset = packed_dataset(&ckpt.model, entities)?;
            let stored = stored_split(&ckpt, &dataset)?;
            let mut all = Vec::new();
            let ids = split_named(&stored, split, dataset.len(), &mut all)?;
            print_json(&evaluate_masked(&ckpt.model, &dataset, mask, ids, split)?)
        }
        Command::Neighbors {
            entities,
            id,
            entity_type,
            same_type,
            k,
            depth,
            export,
        } => {
            let ckpt = checkpoint(common)?;
            let dataset = packed_dataset(&ckpt.model, entities)?;
            let table = export_bottlenecks(&ckpt.model, &dataset, depth.unwrap_or(ckpt.model.wiring().depth))?;
            if let Some(p) = export {
                table.write_jsonl(fs::File::create(p)?)?;
            }
            let list = match id {
                Some(id) => neighbors_of(&table, id, *k, *same_type)?,
                None => {
                    let mode = if table.len() > EXACT_LIMIT {
                        SearchMode::Approximate {
                            bits: 16,
                            tables: 8,
                            seed: common.seed,
                        }
                    } else {
                        SearchMode::Exact
                    };
                    nearest_pairs(&table, entity_type.as_deref(), *k, mode)?
                }
            };
            print_json(&list)
        }
        Command::Serve { entities, addr } => {
            let ckpt = checkpoint(common)?;
            let raw = read_entities(&read(entities)?)?;
            let state = Arc::new(AppState::new(ckpt.model, &raw)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async {
                let listener = tokio::net::TcpListener::bind(addr.as_str())
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, router(state)).await?;
                Ok(())
            })
        }
    }
}
