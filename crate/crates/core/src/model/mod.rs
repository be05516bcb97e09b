//! The schema-shaped ensemble: property encoders, per-depth entity
//! autoencoders, relationship projectors and property decoders.

mod checkpoint;

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION, MAGIC};

use crate::blocks::{
    Autoencoder, BatchNorm, BnObservation, BnStats, DecoderKind, PropertyDecoder, PropertyEncoder,
    PropertySpec, Projector,
};
use crate::dataset::{Batch, Codecs, Dataset, DatasetError, PackedValue};
use crate::schema::{DomainSchema, SchemaError};
use crate::tensor::{ParamStore, SparseRows, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("assembly: {0}")]
    Assembly(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    #[default]
    Naive,
    Highway,
    CulDeSac,
}

impl std::str::FromStr for Wiring {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Wiring::Naive),
            "highway" => Ok(Wiring::Highway),
            "cul-de-sac" | "cul_de_sac" | "culdesac" => Ok(Wiring::CulDeSac),
            other => Err(format!("unknown wiring {other:?} (naive, highway, cul-de-sac)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WiringConfig {
    pub depth: usize,
    pub wiring: Wiring,
    pub bidirectional: bool,
    pub bottleneck_size: usize,
    pub hidden_size: usize,
    pub summary_size: usize,
    pub internal_loss: bool,
}

impl Default for WiringConfig {
    fn default() -> Self {
        WiringConfig {
            depth: 0,
            wiring: Wiring::Naive,
            bidirectional: false,
            bottleneck_size: 64,
            hidden_size: 128,
            summary_size: 32,
            internal_loss: false,
        }
    }
}

impl WiringConfig {
    pub fn with_depth(depth: usize) -> Self {
        WiringConfig {
            depth,
            ..Default::default()
        }
    }
}

/// A relationship seen from one of its ends.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub relationship: String,
    /// True when the entity is the relationship's target.
    pub reverse: bool,
}

impl Slot {
    fn key(&self) -> String {
        if self.reverse {
            format!("{}~reverse", self.relationship)
        } else {
            self.relationship.clone()
        }
    }
}

/// Where each property sits in an entity-type's representation.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeLayout {
    /// (property, offset, size) in schema order.
    pub blocks: Vec<(String, usize, usize)>,
    /// `R_e`.
    pub width: usize,
    pub slots: Vec<Slot>,
}

impl TypeLayout {
    pub fn offset_of(&self, property: &str) -> Option<(usize, usize)> {
        self.blocks
            .iter()
            .find(|(p, _, _)| p == property)
            .map(|&(_, o, s)| (o, s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembledModel {
    schema: DomainSchema,
    codecs: Codecs,
    wiring: WiringConfig,
    seed: u64,
    pub(crate) store: ParamStore,
    specs: IndexMap<String, PropertySpec>,
    encoders: IndexMap<String, PropertyEncoder>,
    batchnorms: IndexMap<String, BatchNorm>,
    bn_stats: IndexMap<String, BnStats>,
    layouts: IndexMap<String, TypeLayout>,
    autoencoders: IndexMap<String, Vec<Autoencoder>>,
    projectors: IndexMap<String, Projector>,
    decoders: IndexMap<String, IndexMap<String, PropertyDecoder>>,
}

/// Values from one forward pass over a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Dataset indices in batch order.
    pub members: Vec<usize>,
    /// Per depth, `[batch, B]` in batch order.
    pub bottlenecks: Vec<Tensor>,
    /// Per entity-type: batch positions and the final decoder inputs.
    pub decoder_inputs: IndexMap<String, (Vec<usize>, Tensor)>,
    /// Weighted loss per property, summed over scored entities.
    pub property_losses: IndexMap<String, f64>,
    /// Unweighted loss per batch entity and scored property.
    pub entity_losses: Vec<IndexMap<String, f64>>,
    /// Cul-de-sac loss of each depth.
    pub depth_losses: Vec<f64>,
    pub internal_loss: f64,
    /// Number of (entity, property, depth) reconstruction terms.
    pub loss_terms: usize,
    pub loss: f64,
}

impl ForwardOutput {
    pub fn total_loss(&self) -> f64 {
        self.loss
    }

    /// Bottleneck of batch entity `k` at `depth`.
    pub fn bottleneck(&self, depth: usize, k: usize) -> &[f64] {
        self.bottlenecks[depth].row(k)
    }
}

/// A forward pass recorded on a tape, for training.
#[derive(Debug)]
pub struct ForwardTrace {
    pub loss: Var,
    pub output: ForwardOutput,
    pub bn: Vec<(String, BnObservation)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl AssembledModel {
    /// Builds the ensemble for a rule-resolved schema. Parameter
    /// initialization is determined by `seed`.
    pub fn assemble(
        schema: &DomainSchema,
        codecs: &Codecs,
        wiring: &WiringConfig,
        seed: u64,
    ) -> Result<AssembledModel, ModelError> {
        if wiring.bottleneck_size == 0 || wiring.hidden_size == 0 || wiring.summary_size == 0 {
            return Err(ModelError::Assembly("bottleneck, hidden and summary sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut specs = IndexMap::new();
        let mut encoders = IndexMap::new();
        let mut batchnorms = IndexMap::new();
        let mut bn_stats = IndexMap::new();
        for (name, def) in &schema.properties {
            let spec = PropertySpec::from_def(def).map_err(ModelError::Assembly)?;
            let codec = codecs
                .get(name)
                .ok_or_else(|| ModelError::Assembly(format!("no codec for property {name:?}")))?;
            if codec.kind != def.kind {
                return Err(ModelError::Assembly(format!("codec for {name:?} has type {}", codec.kind)));
            }
            let enc = PropertyEncoder::new(&mut store, &spec, codec, &mut rng);
            if !enc.is_null() {
                batchnorms.insert(name.clone(), BatchNorm::new(&mut store, &format!("bn.{name}"), enc.output_size()));
                bn_stats.insert(name.clone(), BnStats::new(enc.output_size()));
            }
            encoders.insert(name.clone(), enc);
            specs.insert(name.clone(), spec);
        }

        let mut layouts = IndexMap::new();
        for (t, et) in &schema.entity_types {
            let mut blocks = Vec::new();
            let mut width = 0;
            for p in &et.properties {
                let size = encoders[p].output_size();
                blocks.push((p.clone(), width, size));
                width += size;
            }
            let mut slots = Vec::new();
            for (r, rel) in &schema.relationships {
                if rel.source_entity_type == *t {
                    slots.push(Slot { relationship: r.clone(), reverse: false });
                }
                if wiring.bidirectional && rel.target_entity_type == *t {
                    slots.push(Slot { relationship: r.clone(), reverse: true });
                }
            }
            if width == 0 {
                return Err(ModelError::Assembly(format!("entity-type {t:?} has an empty representation")));
            }
            layouts.insert(t.clone(), TypeLayout { blocks, width, slots });
        }

        let b = wiring.bottleneck_size;
        let mut autoencoders = IndexMap::new();
        for (t, layout) in &layouts {
            let mut per_depth = Vec::new();
            for d in 0..=wiring.depth {
                let input = if d == 0 {
                    layout.width
                } else {
                    layout.width + wiring.summary_size * layout.slots.len()
                };
                per_depth.push(Autoencoder::new(
                    &mut store,
                    &format!("ae.{t}.{d}"),
                    input,
                    wiring.hidden_size,
                    b,
                    layout.width,
                    &mut rng,
                ));
            }
            autoencoders.insert(t.clone(), per_depth);
        }

        let mut projectors = IndexMap::new();
        if wiring.depth > 0 {
            for (r, _) in &schema.relationships {
                let mut dirs = vec![false];
                if wiring.bidirectional {
                    dirs.push(true);
                }
                for reverse in dirs {
                    let slot = Slot { relationship: r.clone(), reverse };
                    let key = slot.key();
                    projectors.insert(
                        key.clone(),
                        Projector::new(&mut store, &format!("proj.{key}"), b, wiring.summary_size, &mut rng),
                    );
                }
            }
        }

        let mut decoders = IndexMap::new();
        for (t, layout) in &layouts {
            let input = match wiring.wiring {
                Wiring::Highway => layout.width * (wiring.depth + 1),
                _ => layout.width,
            };
            let mut per_prop = IndexMap::new();
            for (p, _, _) in &layout.blocks {
                let spec = &specs[p];
                if spec.decoder == DecoderKind::Null {
                    continue;
                }
                let dec = PropertyDecoder::new(&mut store, &format!("decoder.{t}"), spec, &codecs.0[p], input, &mut rng);
                per_prop.insert(p.clone(), dec);
            }
            decoders.insert(t.clone(), per_prop);
        }

        Ok(AssembledModel {
            schema: schema.clone(),
            codecs: codecs.clone(),
            wiring: wiring.clone(),
            seed,
            store,
            specs,
            encoders,
            batchnorms,
            bn_stats,
            layouts,
            autoencoders,
            projectors,
            decoders,
        })
    }

    pub fn schema(&self) -> &DomainSchema {
        &self.schema
    }

    pub fn codecs(&self) -> &Codecs {
        &self.codecs
    }

    pub fn wiring(&self) -> &WiringConfig {
        &self.wiring
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self, entity_type: &str) -> Option<&TypeLayout> {
        self.layouts.get(entity_type)
    }

    pub fn spec(&self, property: &str) -> Option<&PropertySpec> {
        self.specs.get(property)
    }

    pub fn encoder(&self, property: &str) -> Option<&PropertyEncoder> {
        self.encoders.get(property)
    }

    pub fn decoder(&self, entity_type: &str, property: &str) -> Option<&PropertyDecoder> {
        self.decoders.get(entity_type).and_then(|d| d.get(property))
    }

    pub fn autoencoder(&self, entity_type: &str, depth: usize) -> Option<&Autoencoder> {
        self.autoencoders.get(entity_type).and_then(|a| a.get(depth))
    }

    pub fn autoencoder_count(&self) -> usize {
        self.autoencoders.values().map(Vec::len).sum()
    }

    pub fn projector_count(&self) -> usize {
        self.projectors.len()
    }

    pub fn bn_stats(&self) -> &IndexMap<String, BnStats> {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut IndexMap<String, BnStats> {
        &mut self.bn_stats
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn(&mut self, observations: &[(String, BnObservation)]) {
        for (p, obs) in observations {
            if let Some(s) = self.bn_stats.get_mut(p) {
                s.update(&obs.mean, &obs.var, obs.rows);
            }
        }
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, dataset: &Dataset, batch: &Batch) -> Result<ForwardOutput, ModelError> {
        let mut tape = Tape::inference();
        Ok(self.trace(&mut tape, dataset, batch, Mode::Eval)?.output)
    }

    /// Evaluation-mode entity representations (depth-0 autoencoder inputs),
    /// one row per batch entity, keyed by entity-type.
    pub fn encode(&self, dataset: &Dataset, batch: &Batch) -> Result<IndexMap<String, (Vec<usize>, Tensor)>, ModelError> {
        let mut tape = Tape::inference();
        let groups = self.groups(dataset, batch)?;
        let (reps, _) = self.encode_on(&mut tape, dataset, batch, &groups, Mode::Eval)?;
        Ok(groups
            .into_iter()
            .map(|(t, rows)| {
                let v = tape.value(reps[&t]).clone();
                (t, (rows, v))
            })
            .collect())
    }

    fn groups(&self, dataset: &Dataset, batch: &Batch) -> Result<IndexMap<String, Vec<usize>>, ModelError> {
        let mut groups: IndexMap<String, Vec<usize>> =
            self.layouts.keys().map(|t| (t.clone(), Vec::new())).collect();
        for (k, &i) in batch.members.iter().enumerate() {
            let t = dataset.entity_type(i);
            groups
                .get_mut(t)
                .ok_or_else(|| ModelError::Assembly(format!("entity-type {t:?} is not in the model")))?
                .push(k);
        }
        groups.retain(|_, rows| !rows.is_empty());
        Ok(groups)
    }

    fn encode_on(
        &self,
        tape: &mut Tape,
        dataset: &Dataset,
        batch: &Batch,
        groups: &IndexMap<String, Vec<usize>>,
        mode: Mode,
    ) -> Result<(HashMap<String, Var>, Vec<(String, BnObservation)>), ModelError> {
        let mut type_of = vec![0usize; batch.len()];
        let mut pos = vec![0usize; batch.len()];
        for (ti, rows) in groups.values().enumerate() {
            for (r, &k) in rows.iter().enumerate() {
                type_of[k] = ti;
                pos[k] = r;
            }
        }
        let mut observations = Vec::new();
        let mut blocks: HashMap<(usize, String), Var> = HashMap::new();
        for (p, enc) in &self.encoders {
            if enc.is_null() {
                continue;
            }
            let holders: Vec<usize> = groups
                .keys()
                .enumerate()
                .filter(|(_, t)| self.layouts[*t].offset_of(p).is_some())
                .map(|(ti, _)| ti)
                .collect();
            if holders.is_empty() {
                continue;
            }
            let rows: Vec<usize> = (0..batch.len())
                .filter(|&k| holders.contains(&type_of[k]) && batch.observed(dataset, k, p))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let values: Vec<&PackedValue> = rows.iter().map(|&k| &dataset.packed(batch.members[k])[p]).collect();
            let e = enc.encode(tape, &self.store, &values)?;
            let (e, obs) = self.batchnorms[p].forward(tape, &self.store, &self.bn_stats[p], e, mode == Mode::Train)?;
            if let Some(obs) = obs {
                observations.push((p.clone(), obs));
            }
            for &ti in &holders {
                let n_t = groups[ti].len();
                let mut sel = vec![Vec::new(); n_t];
                for (j, &k) in rows.iter().enumerate() {
                    if type_of[k] == ti {
                        sel[pos[k]].push((j, 1.0));
                    }
                }
                if sel.iter().all(Vec::is_empty) {
                    continue;
                }
                let placed = if rows.len() == n_t && rows.iter().all(|&k| type_of[k] == ti) {
                    e
                } else {
                    tape.spmm(SparseRows::new(rows.len(), sel), e)?
                };
                blocks.insert((ti, p.clone()), placed);
            }
        }
        let mut reps = HashMap::new();
        for (ti, (t, rows)) in groups.iter().enumerate() {
            let layout = &self.layouts[t];
            let parts: Vec<Var> = layout
                .blocks
                .iter()
                .map(|(p, _, size)| match blocks.get(&(ti, p.clone())) {
                    Some(&v) => v,
                    None => tape.constant(Tensor::zeros(&[rows.len(), *size])),
                })
                .collect();
            reps.insert(t.clone(), tape.concat(&parts)?);
        }
        Ok((reps, observations))
    }

    /// Forward pass on `tape`. Training mode uses batch statistics for
    /// batch normalization and reports them in the trace.
    pub fn trace(&self, tape: &mut Tape, dataset: &Dataset, batch: &Batch, mode: Mode) -> Result<ForwardTrace, ModelError> {
        if !dataset.is_packed() {
            return Err(ModelError::Dataset(DatasetError::Pack {
                property: "*".into(),
                message: "dataset has no codecs attached".into(),
            }));
        }
        let n = batch.len();
        let groups = self.groups(dataset, batch)?;
        let (reps, bn) = self.encode_on(tape, dataset, batch, &groups, mode)?;
        let mut pos = vec![0usize; n];
        for rows in groups.values() {
            for (r, &k) in rows.iter().enumerate() {
                pos[k] = r;
            }
        }

        let depth = self.wiring.depth;
        let b = self.wiring.bottleneck_size;
        let mut outs: Vec<HashMap<String, Var>> = Vec::with_capacity(depth + 1);
        let mut globals: Vec<Var> = Vec::with_capacity(depth + 1);
        for d in 0..=depth {
            let mut out_d = HashMap::new();
            let mut global: Option<Var> = None;
            for (t, rows) in &groups {
                let layout = &self.layouts[t];
                let input = if d == 0 {
                    reps[t]
                } else {
                    let mut parts = vec![outs[d - 1][t]];
                    for slot in &layout.slots {
                        let mut neighbors = vec![Vec::new(); rows.len()];
                        for &(s, tgt) in &batch.edges[&slot.relationship] {
                            let (me, other) = if slot.reverse { (tgt, s) } else { (s, tgt) };
                            if dataset.entity_type(batch.members[me]) == t {
                                neighbors[pos[me]].push(other);
                            }
                        }
                        let proj = &self.projectors[&slot.key()];
                        parts.push(proj.forward(tape, &self.store, globals[d - 1], &neighbors)?);
                    }
                    tape.concat(&parts)?
                };
                let (out, bottleneck) = self.autoencoders[t][d].forward(tape, &self.store, input)?;
                out_d.insert(t.clone(), out);
                let placed = if rows.len() == n {
                    bottleneck
                } else {
                    tape.spmm(SparseRows::scatter(n, rows), bottleneck)?
                };
                global = Some(match global {
                    None => placed,
                    Some(g) => tape.add(g, placed)?,
                });
            }
            let global = match global {
                Some(g) => g,
                None => tape.constant(Tensor::zeros(&[0, b])),
            };
            globals.push(global);
            outs.push(out_d);
        }

        let mut output = ForwardOutput {
            members: batch.members.clone(),
            bottlenecks: globals.iter().map(|&g| tape.value(g).clone()).collect(),
            decoder_inputs: IndexMap::new(),
            property_losses: IndexMap::new(),
            entity_losses: vec![IndexMap::new(); n],
            depth_losses: Vec::new(),
            internal_loss: 0.0,
            loss_terms: 0,
            loss: 0.0,
        };

        // Decoder inputs per pass; cul-de-sac decodes every depth.
        let passes: Vec<HashMap<String, Var>> = match self.wiring.wiring {
            Wiring::Naive => vec![outs[depth].clone()],
            Wiring::CulDeSac => outs.clone(),
            Wiring::Highway => {
                let mut m = HashMap::new();
                for t in groups.keys() {
                    let parts: Vec<Var> = outs.iter().map(|o| o[t]).collect();
                    m.insert(t.clone(), tape.concat(&parts)?);
                }
                vec![m]
            }
        };
        let last = passes.len() - 1;
        let pass_weight = 1.0 / passes.len() as f64;
        let mut terms: Vec<Var> = Vec::new();
        for (pi, pass) in passes.iter().enumerate() {
            let mut pass_terms: Vec<Var> = Vec::new();
            for (t, rows) in &groups {
                let x = pass[t];
                if pi == last {
                    output.decoder_inputs.insert(t.clone(), (rows.clone(), tape.value(x).clone()));
                }
                for (p, dec) in &self.decoders[t] {
                    let scored: Vec<usize> = (0..rows.len())
                        .filter(|&r| batch.scored(dataset, rows[r], p))
                        .collect();
                    if scored.is_empty() {
                        continue;
                    }
                    let targets: Vec<&PackedValue> = scored
                        .iter()
                        .map(|&r| &dataset.packed(batch.members[rows[r]])[p])
                        .collect();
                    let sel = if scored.len() == rows.len() {
                        x
                    } else {
                        tape.spmm(SparseRows::select(rows.len(), &scored), x)?
                    };
                    let Some(per_row) = dec.loss_rows(tape, &self.store, sel, &targets)? else {
                        continue;
                    };
                    output.loss_terms += scored.len();
                    let values = tape.value(per_row).data().to_vec();
                    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
                        return Err(ModelError::Tensor(TensorError::Invalid {
                            op: "loss",
                            message: format!(
                                "non-finite loss for property {p:?} of entity {:?}",
                                dataset.id(batch.members[rows[scored[bad]]])
                            ),
                        }));
                    }
                    let weight = self.specs[p].weight;
                    let sum: f64 = values.iter().sum();
                    *output.property_losses.entry(p.clone()).or_insert(0.0) += weight * sum * pass_weight;
                    if pi == last {
                        for (&r, v) in scored.iter().zip(&values) {
                            output.entity_losses[rows[r]].insert(p.clone(), *v);
                        }
                    }
                    let s = tape.sum_all(per_row);
                    pass_terms.push(tape.scale(s, weight * pass_weight));
                }
            }
            let pass_sum = sum_vars(tape, &pass_terms)?;
            if self.wiring.wiring == Wiring::CulDeSac {
                output.depth_losses.push(tape.value(pass_sum).item() / pass_weight);
            }
            terms.push(pass_sum);
        }

        if self.wiring.internal_loss {
            let mut internal = Vec::new();
            for t in groups.keys() {
                for out in &outs {
                    let d = tape.sub(out[t], reps[t])?;
                    let sq = tape.mul(d, d)?;
                    let w = tape.value(sq).last_dim() as f64;
                    let s = tape.sum_all(sq);
                    internal.push(tape.scale(s, 1.0 / w));
                }
            }
            let total = sum_vars(tape, &internal)?;
            output.internal_loss = tape.value(total).item();
            terms.push(total);
        }

        let loss = sum_vars(tape, &terms)?;
        output.loss = tape.value(loss).item();
        Ok(ForwardTrace { loss, output, bn })
    }

    /// Encoder-to-decoder pass that bypasses the autoencoders. Each decoder
    /// sees only its own property's block, placed at its usual offset in an
    /// otherwise zero input.
    pub fn trace_standalone(&self, tape: &mut Tape, dataset: &Dataset, batch: &Batch, mode: Mode) -> Result<ForwardTrace, ModelError> {
        let groups = self.groups(dataset, batch)?;
        let (reps, bn) = self.encode_on(tape, dataset, batch, &groups, mode)?;
        let mut output = ForwardOutput {
            members: batch.members.clone(),
            bottlenecks: Vec::new(),
            decoder_inputs: IndexMap::new(),
            property_losses: IndexMap::new(),
            entity_losses: vec![IndexMap::new(); batch.len()],
            depth_losses: Vec::new(),
            internal_loss: 0.0,
            loss_terms: 0,
            loss: 0.0,
        };
        let segments = match self.wiring.wiring {
            Wiring::Highway => self.wiring.depth + 1,
            _ => 1,
        };
        let mut terms = Vec::new();
        for (t, rows) in &groups {
            let layout = &self.layouts[t];
            for (p, dec) in &self.decoders[t] {
                let scored: Vec<usize> = (0..rows.len())
                    .filter(|&r| batch.observed(dataset, rows[r], p))
                    .collect();
                if scored.is_empty() {
                    continue;
                }
                let (offset, size) = layout.offset_of(p).expect("decoded property is in the layout");
                let mut keep = vec![0.0; layout.width * segments];
                keep[offset..offset + size].iter_mut().for_each(|v| *v = 1.0);
                let mut x = reps[t];
                if segments > 1 {
                    let pad = tape.constant(Tensor::zeros(&[rows.len(), layout.width * (segments - 1)]));
                    x = tape.concat(&[x, pad])?;
                }
                let keep = tape.constant(Tensor::vector(keep));
                let x = tape.mul(x, keep)?;
                let sel = if scored.len() == rows.len() {
                    x
                } else {
                    tape.spmm(SparseRows::select(rows.len(), &scored), x)?
                };
                let targets: Vec<&PackedValue> = scored
                    .iter()
                    .map(|&r| &dataset.packed(batch.members[rows[r]])[p])
                    .collect();
                let Some(per_row) = dec.loss_rows(tape, &self.store, sel, &targets)? else {
                    continue;
                };
                let weight = self.specs[p].weight;
                let s = tape.sum_all(per_row);
                let s = tape.scale(s, weight);
                *output.property_losses.entry(p.clone()).or_insert(0.0) += tape.value(s).item();
                output.loss_terms += scored.len();
                terms.push(s);
            }
        }
        let loss = sum_vars(tape, &terms)?;
        output.loss = tape.value(loss).item();
        Ok(ForwardTrace { loss, output, bn })
    }

    /// Most likely packed value of every decodable property for each batch
    /// entity, observed or not.
    pub fn reconstruct_packed(&self, output: &ForwardOutput) -> Result<Vec<IndexMap<String, PackedValue>>, ModelError> {
        let mut out = vec![IndexMap::new(); output.members.len()];
        for (t, (rows, x)) in &output.decoder_inputs {
            let layout = &self.layouts[t];
            for (p, _, _) in &layout.blocks {
                let Some(dec) = self.decoders[t].get(p) else { continue };
                let values = dec.reconstruct(&self.store, x, &self.codecs.0[p])?;
                for (&k, v) in rows.iter().zip(values) {
                    out[k].insert(p.clone(), v);
                }
            }
        }
        Ok(out)
    }

    /// Human-form reconstructions per batch entity. Null-decoded
    /// properties are absent.
    pub fn reconstruct(&self, output: &ForwardOutput) -> Result<Vec<IndexMap<String, Value>>, ModelError> {
        self.reconstruct_packed(output)?
            .into_iter()
            .map(|m| {
                m.into_iter()
                    .map(|(p, v)| Ok((p.clone(), self.codecs.0[&p].unpack(&v)?)))
                    .collect()
            })
            .collect()
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var, TensorError> {
    let mut it = vars.iter();
    let Some(&first) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &v in it {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}
