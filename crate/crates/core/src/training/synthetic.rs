//! Generators for synthetic studies.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::schema::{parse_schema, DomainSchema};

pub const OPERATIONS: [&str; 5] = ["add", "sub", "mul", "div", "const"];

/// Smallest denominator magnitude a division may have.
pub const MIN_DENOMINATOR: f64 = 0.1;

pub fn arithmetic_schema() -> DomainSchema {
    parse_schema(
        r#"{
  "entity_types": {"node": ["operation", "value"]},
  "properties": {
    "operation": {"type": "categorical"},
    "value": {"type": "scalar"}
  },
  "relationships": {
    "left": {"source_entity_type": "node", "target_entity_type": "node"},
    "right": {"source_entity_type": "node", "target_entity_type": "node"}
  }
}"#,
    )
    .expect("arithmetic schema is valid")
}

pub fn apply_operation(op: &str, l: f64, r: f64) -> f64 {
    match op {
        "add" => l + r,
        "sub" => l - r,
        "mul" => l * r,
        "div" => l / r,
        other => panic!("not a binary operation: {other}"),
    }
}

struct Node {
    op: &'static str,
    value: f64,
    left: Option<usize>,
    right: Option<usize>,
}

fn build(nodes: &mut Vec<Node>, size: usize, rng: &mut ChaCha8Rng) -> usize {
    if size == 1 {
        nodes.push(Node {
            op: "const",
            value: rng.gen_range(-1.0..=1.0),
            left: None,
            right: None,
        });
        return nodes.len() - 1;
    }
    let op = *OPERATIONS[..4].choose(rng).unwrap();
    // Odd left sizes 1, 3, ..., size - 2.
    let left_size = 2 * rng.gen_range(0..(size - 1) / 2) + 1;
    let right_size = size - 1 - left_size;
    let l = build(nodes, left_size, rng);
    let mark = nodes.len();
    let mut r = build(nodes, right_size, rng);
    while op == "div" && nodes[r].value.abs() < MIN_DENOMINATOR {
        nodes.truncate(mark);
        r = build(nodes, right_size, rng);
    }
    let value = apply_operation(op, nodes[l].value, nodes[r].value);
    nodes.push(Node {
        op,
        value,
        left: Some(l),
        right: Some(r),
    });
    nodes.len() - 1
}

/// `count` random expression trees with sizes uniform over the odd numbers
/// up to `max_nodes`. Every node is an entity; ids are `t{tree}n{node}`.
pub fn generate_arithmetic(count: usize, max_nodes: usize, seed: u64) -> Result<(DomainSchema, Vec<Value>), String> {
    if max_nodes == 0 || max_nodes.is_multiple_of(2) {
        return Err(format!("max nodes must be odd and at least 1, got {max_nodes}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = (1..=max_nodes).step_by(2).collect();
    let mut out = Vec::new();
    for t in 0..count {
        let size = *sizes.choose(&mut rng).unwrap();
        let mut nodes = Vec::with_capacity(size);
        build(&mut nodes, size, &mut rng);
        let id = |i: usize| format!("t{t}n{i}");
        for (i, n) in nodes.iter().enumerate() {
            let mut e = json!({
                "entity_type": "node",
                "id": id(i),
                "operation": n.op,
                "value": n.value,
            });
            if let (Some(l), Some(r)) = (n.left, n.right) {
                e["left"] = json!([id(l)]);
                e["right"] = json!([id(r)]);
            }
            out.push(e);
        }
    }
    Ok((arithmetic_schema(), out))
}

/// Shape of a synthetic group/subgroup/item hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyConfig {
    pub groups: usize,
    pub subgroups: usize,
    pub items: usize,
    pub families: usize,
    pub branches: usize,
    pub kinds: usize,
    /// Extra uniformly random categorical properties on every item.
    pub features: usize,
    pub feature_values: usize,
    /// Probability that an item lacks a given feature.
    pub feature_missing: f64,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            groups: 100,
            subgroups: 3,
            items: 4,
            families: 6,
            branches: 2,
            kinds: 2,
            features: 0,
            feature_values: 4,
            feature_missing: 0.0,
            seed: 0,
        }
    }
}

pub fn hierarchy_schema(features: usize) -> DomainSchema {
    let mut item = vec![json!("kind"), json!("label")];
    let mut props = serde_json::Map::new();
    for p in ["family", "branch", "kind", "label"] {
        props.insert(p.into(), json!({"type": "categorical"}));
    }
    for f in 0..features {
        item.push(json!(format!("feature{f}")));
        props.insert(format!("feature{f}"), json!({"type": "categorical"}));
    }
    let doc = json!({
        "entity_types": {"group": ["family"], "subgroup": ["branch"], "item": item},
        "properties": props,
        "relationships": {
            "member_of": {"source_entity_type": "item", "target_entity_type": "subgroup"},
            "part_of": {"source_entity_type": "subgroup", "target_entity_type": "group"}
        }
    });
    DomainSchema::from_document(&doc).expect("hierarchy schema is valid")
}

/// Three-level trees. An item's `label` is `(family + branch + kind) mod
/// families`, taking its group's family, its subgroup's branch and its own
/// kind, so recovering it needs information from two hops away.
pub fn generate_hierarchy(config: &HierarchyConfig) -> (DomainSchema, Vec<Value>) {
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut out = Vec::new();
    for g in 0..c.groups {
        let family = rng.gen_range(0..c.families);
        let gid = format!("g{g}");
        out.push(json!({"entity_type": "group", "id": gid, "family": format!("f{family}")}));
        for s in 0..c.subgroups {
            let branch = rng.gen_range(0..c.branches);
            let sid = format!("g{g}s{s}");
            out.push(json!({
                "entity_type": "subgroup", "id": sid, "branch": format!("b{branch}"), "part_of": [gid],
            }));
            for i in 0..c.items {
                let kind = rng.gen_range(0..c.kinds);
                let label = (family + branch + kind) % c.families;
                let mut e = json!({
                    "entity_type": "item",
                    "id": format!("g{g}s{s}i{i}"),
                    "kind": format!("k{kind}"),
                    "label": format!("l{label}"),
                    "member_of": [sid],
                });
                for f in 0..c.features {
                    let v = rng.gen_range(0..c.feature_values);
                    if !rng.gen_bool(c.feature_missing) {
                        e[format!("feature{f}")] = json!(format!("v{v}"));
                    }
                }
                out.push(e);
            }
        }
    }
    (hierarchy_schema(c.features), out)
}
