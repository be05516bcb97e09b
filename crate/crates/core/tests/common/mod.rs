#![allow(dead_code)]

pub mod gradsuite;

use graphae::dataset::Dataset;
use graphae::schema::{apply_rules, parse_rules, parse_schema, read_entities, DomainSchema};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const EMPLOYMENT_SCHEMA: &str = include_str!("../fixtures/employment_schema.json");
pub const EMPLOYMENT_ENTITIES: &str = include_str!("../fixtures/employment_entities.json");
pub const IMAGE_RULE: &str = include_str!("../fixtures/image_rule.json");

/// Resolved employment schema with the image rule applied.
pub fn employment_schema() -> DomainSchema {
    let schema = parse_schema(EMPLOYMENT_SCHEMA).unwrap();
    apply_rules(&schema, &parse_rules(IMAGE_RULE).unwrap()).unwrap().schema
}

/// The two fixture entities plus people P2..P6 so every reference resolves.
pub fn employment_entities() -> Vec<Value> {
    let mut out = read_entities(EMPLOYMENT_ENTITIES).unwrap();
    let people = [
        ("P2", "Ann", 41, "smith", vec!["P1"]),
        ("P3", "Bo", 35, "clerk", vec![]),
        ("P4", "Cy", 52, "smith", vec!["P3"]),
        ("P5", "Di", 23, "clerk", vec!["P4", "P2"]),
        ("P6", "Ed", 30, "baker", vec![]),
    ];
    for (id, name, age, job, clients) in people {
        out.push(json!({
            "entity_type": "person", "id": id, "name": name, "age": age, "job": job, "client_of": clients,
        }));
    }
    out.push(json!({
        "entity_type": "location", "id": "L2",
        "coordinates": {"latitude": -12.5, "longitude": 130.8},
        "office_of": ["P6"],
    }));
    out
}

pub fn employment_dataset() -> Dataset {
    let ds = Dataset::new(employment_schema(), &employment_entities()).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.fit(&all).unwrap()
}

pub fn multigraph_schema() -> DomainSchema {
    let schema = parse_schema(
        r#"{
  "entity_types": {"a": ["x", "c"], "b": ["y"]},
  "properties": {
    "x": {"type": "scalar"},
    "c": {"type": "categorical"},
    "y": {"type": "scalar"}
  },
  "relationships": {
    "ab": {"source_entity_type": "a", "target_entity_type": "b"},
    "ba": {"source_entity_type": "b", "target_entity_type": "a"},
    "aa": {"source_entity_type": "a", "target_entity_type": "a"}
  }
}"#,
    )
    .unwrap();
    apply_rules(&schema, &[]).unwrap().schema
}

/// `n` entities with about `edges_per_entity` random out-edges each,
/// repeated targets and self-loops allowed.
pub fn multigraph_entities(n: usize, edges_per_entity: f64, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    let a: Vec<usize> = (0..n).filter(|&i| types[i]).collect();
    let b: Vec<usize> = (0..n).filter(|&i| !types[i]).collect();
    let id = |i: usize| format!("e{i}");
    let mut out = Vec::new();
    for i in 0..n {
        let mut e = if types[i] {
            json!({"entity_type": "a", "id": id(i), "x": rng.gen_range(-3.0..3.0), "c": format!("k{}", rng.gen_range(0..4))})
        } else {
            json!({"entity_type": "b", "id": id(i), "y": rng.gen_range(0.0..10.0)})
        };
        let k = (0..4).filter(|_| rng.gen_bool((edges_per_entity / 4.0).min(1.0))).count();
        for _ in 0..k {
            let (rel, pool) = if types[i] {
                if rng.gen_bool(0.5) { ("ab", &b) } else { ("aa", &a) }
            } else {
                ("ba", &a)
            };
            if pool.is_empty() {
                continue;
            }
            let t = id(pool[rng.gen_range(0..pool.len())]);
            match e.get_mut(rel) {
                Some(Value::Array(v)) => v.push(json!(t)),
                _ => e[rel] = json!([t]),
            }
        }
        out.push(e);
    }
    out
}

pub fn multigraph(n: usize, edges_per_entity: f64, seed: u64) -> Dataset {
    let ds = Dataset::new(multigraph_schema(), &multigraph_entities(n, edges_per_entity, seed)).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.fit(&all).unwrap()
}

/// Undirected hop distances from `from`.
pub fn distances(ds: &Dataset, from: usize) -> Vec<usize> {
    let mut d = vec![usize::MAX; ds.len()];
    d[from] = 0;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(i) = queue.pop_front() {
        for &j in ds.neighbors(i) {
            if d[j] == usize::MAX {
                d[j] = d[i] + 1;
                queue.push_back(j);
            }
        }
    }
    d
}

/// One property of every packable type.
pub fn all_types_schema() -> DomainSchema {
    parse_schema(
        r#"{
  "entity_types": {"thing": ["s", "d", "c", "t", "p", "q"]},
  "properties": {
    "s": {"type": "scalar"},
    "d": {"type": "date"},
    "c": {"type": "categorical"},
    "t": {"type": "text"},
    "p": {"type": "place"},
    "q": {"type": "distribution"}
  },
  "relationships": {"self": {"source_entity_type": "thing", "target_entity_type": "thing"}}
}"#,
    )
    .unwrap()
}

/// Draws `n` random human values, packs them with codecs fitted on a random
/// training sample and checks the round-trip invariants. Returns the number
/// of values checked or the first violation.
pub fn pack_fuzz(n: usize, seed: u64) -> Result<usize, String> {
    use graphae::dataset::{build_codecs, format_date};
    use graphae::schema::EntityRecord;
    let schema = all_types_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alphabet: Vec<char> = "abcXYZ éü中 -'.".chars().collect();
    let word = |rng: &mut ChaCha8Rng, max: usize| -> String {
        (0..rng.gen_range(0..=max)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
    };
    let mut checked = 0;
    while checked < n {
        let rows = rng.gen_range(1..12);
        let dim = rng.gen_range(1..6);
        let magnitude = 10f64.powi(rng.gen_range(-3..7));
        let raw: Vec<Value> = (0..rows)
            .map(|i| {
                let q: Vec<f64> = if rng.gen_bool(0.5) {
                    (0..dim).map(|_| rng.gen_range(0.0..5.0)).collect()
                } else {
                    (0..dim).map(|_| rng.gen_range(-30.0..0.0)).collect()
                };
                json!({
                    "entity_type": "thing", "id": format!("t{i}"),
                    "s": rng.gen_range(-1.0..1.0) * magnitude,
                    "d": format_date(rng.gen_range(-200_000..200_000)),
                    "c": word(&mut rng, 4),
                    "t": word(&mut rng, 12),
                    "p": {"latitude": rng.gen_range(-90.0..=90.0), "longitude": rng.gen_range(-180.0..=180.0)},
                    "q": q,
                })
            })
            .collect();
        let records: Vec<EntityRecord> = raw
            .iter()
            .map(|v| EntityRecord::parse(&schema, v).map_err(|r| format!("{:?}", r.errors)))
            .collect::<Result<_, _>>()?;
        let all: Vec<usize> = (0..rows).collect();
        let codecs = build_codecs(&schema, &records, &all).map_err(|e| e.to_string())?;
        for r in &records {
            for (name, v) in &r.properties {
                let c = codecs.get(name).unwrap();
                let packed = c.pack(v).map_err(|e| e.to_string())?;
                let back = c.unpack(&packed).map_err(|e| e.to_string())?;
                let bad = |what: &str| Err(format!("{name}: {what}: {v} -> {packed:?} -> {back}"));
                match name.as_str() {
                    "s" => {
                        let (a, b) = (v.as_f64().unwrap(), back.as_f64().unwrap());
                        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                            return bad("scalar drift");
                        }
                    }
                    "d" | "c" | "t" if back != *v => return bad("not restored"),
                    "p" => {
                        for k in ["latitude", "longitude"] {
                            let (a, b) = (v[k].as_f64().unwrap(), back[k].as_f64().unwrap());
                            if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
                                return bad("place drift");
                            }
                        }
                    }
                    "q" => {
                        let s: f64 = back.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
                        if (s - 1.0).abs() > 1e-9 {
                            return bad("distribution does not sum to one");
                        }
                    }
                    _ => {}
                }
                if c.pack(v).map_err(|e| e.to_string())? != packed {
                    return bad("packing is not deterministic");
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// A small-width wiring for fast model tests.
pub fn small_wiring(depth: usize, wiring: graphae::model::Wiring) -> graphae::model::WiringConfig {
    graphae::model::WiringConfig {
        depth,
        wiring,
        bottleneck_size: 6,
        hidden_size: 12,
        summary_size: 4,
        ..Default::default()
    }
}

/// Shifts every property of raw entity `j` so that its packed values change.
pub fn perturb(raw: &mut [Value], j: usize) {
    let e = &mut raw[j];
    if let Some(x) = e.get("x").and_then(Value::as_f64) {
        e["x"] = json!(x + 0.75);
        e["c"] = json!(if e["c"] == "k0" { "k1" } else { "k0" });
    }
    if let Some(y) = e.get("y").and_then(Value::as_f64) {
        e["y"] = json!(y - 2.5);
    }
}

/// Evaluation-mode bottlenecks at `depth` of a random multigraph are
/// checked bit for bit against perturbations of entities farther than
/// `depth` hops away. Returns the number of perturbations compared.
pub fn locality_check(depth: usize, n: usize, centers: usize, seed: u64) -> Result<usize, String> {
    use graphae::dataset::Batch;
    use graphae::model::{AssembledModel, Wiring};
    let raw = multigraph_entities(n, 1.0, seed);
    let ds = multigraph(n, 1.0, seed);
    let wiring = small_wiring(depth, Wiring::Naive);
    let model = AssembledModel::assemble(ds.schema(), ds.codecs(), &wiring, seed).map_err(|e| e.to_string())?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let run = |raw: &[Value]| -> Result<graphae::model::ForwardOutput, String> {
        let d = Dataset::new(ds.schema().clone(), raw)
            .and_then(|d| d.with_codecs(ds.codecs().clone()))
            .map_err(|e| e.to_string())?;
        model.forward(&d, &Batch::new(&d, all.clone())).map_err(|e| e.to_string())
    };
    let base = run(&raw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut compared = 0;
    for _ in 0..centers {
        let c = rng.gen_range(0..n);
        let dist = distances(&ds, c);
        let mut own = raw.clone();
        perturb(&mut own, c);
        if run(&own)?.bottleneck(depth, c) == base.bottleneck(depth, c) {
            return Err(format!("perturbing entity {c} itself left its bottleneck unchanged"));
        }
        let far: Vec<usize> = (0..n).filter(|&j| dist[j] > depth).collect();
        for _ in 0..far.len().min(8) {
            let j = far[rng.gen_range(0..far.len())];
            let mut changed = raw.clone();
            perturb(&mut changed, j);
            let out = run(&changed)?;
            if out.bottleneck(depth, c) != base.bottleneck(depth, c) {
                return Err(format!(
                    "depth {depth}: bottleneck of entity {c} changed when entity {j} at distance {} was perturbed",
                    if dist[j] == usize::MAX { "infinity".to_string() } else { dist[j].to_string() }
                ));
            }
            compared += 1;
        }
    }
    Ok(compared)
}
