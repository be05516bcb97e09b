//! Entity datasets: packing, the relationship multigraph, components and
//! batch sampling.

mod codec;
mod sampling;

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use codec::{
    build_codecs, format_date, normalize_distribution, parse_date, Codecs, PackedValue,
    PropertyCodec, END, FIRST_CHAR, MAX_TEXT_LEN, START, UNKNOWN,
};
pub use sampling::{apply_mask, sample_batches, sample_batches_within, Anchor, Batch, MaskSpec, Policy};

use crate::schema::{Diagnostic, DomainSchema, EntityRecord, PropertyType};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid entities: {}", summarize(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("cannot pack {property}: {message}")]
    Pack { property: String, message: String },
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn summarize(d: &[Diagnostic]) -> String {
    let mut s = d.iter().take(5).map(|d| d.to_string()).collect::<Vec<_>>().join("; ");
    if d.len() > 5 {
        s.push_str(&format!(" (and {} more)", d.len() - 5));
    }
    s
}

impl DatasetError {
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        match self {
            DatasetError::Invalid(d) => d.clone(),
            other => vec![Diagnostic::new("dataset", other.to_string())],
        }
    }
}

/// Entities of one schema, their relationship multigraph and, once codecs
/// are attached, their packed numeric values.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: DomainSchema,
    records: Vec<EntityRecord>,
    index: HashMap<String, usize>,
    edges: IndexMap<String, Vec<(usize, usize)>>,
    out_edges: Vec<Vec<(usize, usize)>>,
    neighbors: Vec<Vec<usize>>,
    codecs: Codecs,
    packed: Vec<IndexMap<String, PackedValue>>,
}

impl Dataset {
    /// Validates raw entity values and builds the graph. No codecs yet.
    pub fn new(schema: DomainSchema, raw: &[Value]) -> Result<Dataset, DatasetError> {
        let mut errors = Vec::new();
        let mut records = Vec::with_capacity(raw.len());
        for v in raw {
            match EntityRecord::parse(&schema, v) {
                Ok(r) => records.push(r),
                Err(report) => errors.extend(report.errors),
            }
        }
        if !errors.is_empty() {
            return Err(DatasetError::Invalid(errors));
        }
        Dataset::from_records(schema, records)
    }

    pub fn from_records(schema: DomainSchema, records: Vec<EntityRecord>) -> Result<Dataset, DatasetError> {
        let mut errors = Vec::new();
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                errors.push(Diagnostic::new(format!("{}.id", r.id), "duplicate id"));
            }
        }
        let mut edges: IndexMap<String, Vec<(usize, usize)>> = schema
            .relationships
            .keys()
            .map(|k| (k.clone(), Vec::new()))
            .collect();
        let mut out_edges = vec![Vec::new(); records.len()];
        for (i, r) in records.iter().enumerate() {
            for (rel, targets) in &r.relationships {
                let (ri, _, def) = schema.relationships.get_full(rel).unwrap();
                for t in targets {
                    let loc = format!("{}.{rel}", r.id);
                    match index.get(t) {
                        None => errors.push(Diagnostic::new(loc, format!("unknown target id {t:?}"))),
                        Some(&j) if records[j].entity_type != def.target_entity_type => {
                            errors.push(Diagnostic::new(
                                loc,
                                format!(
                                    "target {t:?} is a {}, expected {}",
                                    records[j].entity_type, def.target_entity_type
                                ),
                            ))
                        }
                        Some(&j) => {
                            edges[ri].push((i, j));
                            out_edges[i].push((ri, j));
                        }
                    }
                }
            }
        }
        if !errors.is_empty() {
            return Err(DatasetError::Invalid(errors));
        }
        let mut neighbors = vec![Vec::new(); records.len()];
        for list in edges.values() {
            for &(s, t) in list {
                neighbors[s].push(t);
                neighbors[t].push(s);
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Ok(Dataset {
            schema,
            records,
            index,
            edges,
            out_edges,
            neighbors,
            codecs: Codecs::default(),
            packed: Vec::new(),
        })
    }

    /// Attaches codecs and packs every modeled property value. Categorical
    /// values outside the vocabulary pack to the unknown index.
    pub fn with_codecs(mut self, codecs: Codecs) -> Result<Dataset, DatasetError> {
        let mut packed = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let mut values = IndexMap::new();
            for (name, v) in &r.properties {
                let codec = codecs.get(name).ok_or_else(|| DatasetError::Pack {
                    property: name.clone(),
                    message: "no codec".into(),
                })?;
                if codec.kind == PropertyType::Image {
                    continue;
                }
                let p = codec.pack_lenient(v).map_err(|e| match e {
                    DatasetError::Pack { property, message } => DatasetError::Pack {
                        property: format!("{}.{property}", r.id),
                        message,
                    },
                    e => e,
                })?;
                values.insert(name.clone(), p);
            }
            packed.push(values);
        }
        self.codecs = codecs;
        self.packed = packed;
        Ok(self)
    }

    /// Builds codecs from the entities at `training` and packs everything.
    pub fn fit(self, training: &[usize]) -> Result<Dataset, DatasetError> {
        let codecs = build_codecs(&self.schema, &self.records, training)?;
        self.with_codecs(codecs)
    }

    pub fn schema(&self) -> &DomainSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &EntityRecord {
        &self.records[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.records[i].id
    }

    pub fn entity_type(&self, i: usize) -> &str {
        &self.records[i].entity_type
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Relationship name to (source, target) entity indices.
    pub fn edges(&self) -> &IndexMap<String, Vec<(usize, usize)>> {
        &self.edges
    }

    /// (relationship index, target) pairs leaving entity `i`.
    pub fn out_edges(&self, i: usize) -> &[(usize, usize)] {
        &self.out_edges[i]
    }

    /// Distinct neighbors of `i` with edges treated as undirected.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn codecs(&self) -> &Codecs {
        &self.codecs
    }

    pub fn is_packed(&self) -> bool {
        self.packed.len() == self.records.len()
    }

    /// Packed values of entity `i`. Empty until codecs are attached.
    pub fn packed(&self, i: usize) -> &IndexMap<String, PackedValue> {
        static EMPTY: std::sync::OnceLock<IndexMap<String, PackedValue>> = std::sync::OnceLock::new();
        self.packed
            .get(i)
            .unwrap_or_else(|| EMPTY.get_or_init(IndexMap::new))
    }

    /// Indices of entities with the given type.
    pub fn of_type(&self, entity_type: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.records[i].entity_type == entity_type)
            .collect()
    }

    /// Partition of all entities into connected components.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.components_within(&all)
    }

    /// Connected components of the subgraph induced by `subset`. Components
    /// are ordered by their smallest member; members are sorted.
    pub fn components_within(&self, subset: &[usize]) -> Vec<Vec<usize>> {
        let mut local = HashMap::with_capacity(subset.len());
        for (k, &i) in subset.iter().enumerate() {
            local.insert(i, k);
        }
        let mut parent: Vec<usize> = (0..subset.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (k, &i) in subset.iter().enumerate() {
            for &j in &self.neighbors[i] {
                if let Some(&l) = local.get(&j) {
                    let (a, b) = (find(&mut parent, k), find(&mut parent, l));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut groups: IndexMap<usize, Vec<usize>> = IndexMap::new();
        let mut order: Vec<usize> = (0..subset.len()).collect();
        order.sort_by_key(|&k| subset[k]);
        for k in order {
            let root = find(&mut parent, k);
            groups.entry(root).or_default().push(subset[k]);
        }
        groups.into_values().collect()
    }

    /// Writes the packed dataset to a versioned cache file.
    pub fn save_cache(&self, path: &Path) -> Result<(), DatasetError> {
        let cache = Cache {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            schema: self.schema.to_document(),
            records: self.records.iter().map(EntityRecord::to_value).collect(),
            codecs: self.codecs.clone(),
            packed: self.packed.clone(),
        };
        let text = serde_json::to_string(&cache).map_err(|e| DatasetError::Cache(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Dataset, DatasetError> {
        let text = std::fs::read_to_string(path)?;
        let cache: Cache = serde_json::from_str(&text).map_err(|e| DatasetError::Cache(e.to_string()))?;
        if cache.format != CACHE_FORMAT || cache.version != CACHE_VERSION {
            return Err(DatasetError::Cache(format!(
                "unsupported cache {} version {}",
                cache.format, cache.version
            )));
        }
        let schema = DomainSchema::from_document(&cache.schema)
            .map_err(|e| DatasetError::Cache(e.to_string()))?;
        let mut ds = Dataset::new(schema, &cache.records)?;
        if !cache.packed.is_empty() && cache.packed.len() != ds.len() {
            return Err(DatasetError::Cache("packed value count does not match entities".into()));
        }
        ds.codecs = cache.codecs;
        ds.packed = cache.packed;
        Ok(ds)
    }
}

const CACHE_FORMAT: &str = "graphae-dataset";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Cache {
    format: String,
    version: u32,
    schema: Value,
    records: Vec<Value>,
    codecs: Codecs,
    packed: Vec<IndexMap<String, PackedValue>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{parse_schema, read_entities};
    use serde_json::json;

    const SCHEMA: &str = include_str!("../../tests/fixtures/employment_schema.json");
    const ENTITIES: &str = include_str!("../../tests/fixtures/employment_entities.json");

    fn employment() -> Dataset {
        let schema = parse_schema(SCHEMA).unwrap();
        let mut raw = read_entities(ENTITIES).unwrap();
        raw.push(json!({"entity_type": "person", "id": "P4", "name": "Ann", "age": 40, "job": "baker"}));
        Dataset::new(schema, &raw).unwrap()
    }

    #[test]
    fn example_graph_is_one_component() {
        let ds = employment();
        let comps = ds.connected_components();
        assert_eq!(comps.len(), 1);
        let mut ids: Vec<&str> = comps[0].iter().map(|&i| ds.id(i)).collect();
        ids.sort();
        assert_eq!(ids, ["L1", "P1", "P4"]);
    }

    #[test]
    fn dangling_target_is_rejected() {
        let schema = parse_schema(SCHEMA).unwrap();
        let raw = read_entities(ENTITIES).unwrap();
        let err = Dataset::new(schema, &raw).unwrap_err();
        let d = err.diagnostics();
        assert_eq!(d[0].location, "L1.office_of");
        assert!(d[0].message.contains("P4"));
    }

    #[test]
    fn wrong_target_type_and_duplicates() {
        let schema = parse_schema(SCHEMA).unwrap();
        let raw = vec![
            json!({"entity_type": "location", "id": "L1", "office_of": ["L2"]}),
            json!({"entity_type": "location", "id": "L2"}),
            json!({"entity_type": "location", "id": "L2"}),
        ];
        let d = Dataset::new(schema, &raw).unwrap_err().diagnostics();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn no_relationships_gives_singletons() {
        let schema = parse_schema(SCHEMA).unwrap();
        let raw: Vec<Value> = (0..5).map(|i| json!({"entity_type": "person", "id": format!("p{i}")})).collect();
        let ds = Dataset::new(schema, &raw).unwrap();
        assert_eq!(ds.connected_components(), (0..5).map(|i| vec![i]).collect::<Vec<_>>());
    }

    #[test]
    fn packing_is_lenient_for_unseen_categories() {
        let ds = employment();
        let p1 = ds.index_of("P1").unwrap();
        let p4 = ds.index_of("P4").unwrap();
        let ds = ds.fit(&[p1]).unwrap();
        // No job was seen during fitting; P4's job packs to the unknown index.
        assert_eq!(ds.codecs().get("job").unwrap().unknown_index(), 0);
        assert_eq!(ds.packed(p4)["job"], PackedValue::Index(0));
        assert!(ds.packed(p1).get("job").is_none());
        // P4's age was not seen during fitting, so it is standardized around P1's.
        assert_eq!(ds.packed(p4)["age"], PackedValue::Scalar(13.0));
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let ds = employment();
        let ds = ds.fit(&[0, 1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save_cache(&path).unwrap();
        let back = Dataset::load_cache(&path).unwrap();
        assert_eq!(back, ds);
    }
}
