//! Bottleneck export and cosine-similarity neighbor search.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_batches, Dataset, Policy};
use crate::model::{AssembledModel, ModelError};

/// Above this many entities exact search gets slow; see [`SearchMode`].
pub const EXACT_LIMIT: usize = 50_000;

#[derive(Debug, Error)]
pub enum ExploreError {
    #[error("depth {depth} is out of range (model depth {max})")]
    Depth { depth: usize, max: usize },
    #[error("need at least two entities with non-zero bottlenecks, found {0}")]
    TooFew(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("unknown entity {0:?}")]
    UnknownId(String),
    #[error("bottleneck file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckRow {
    pub id: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BottleneckTable {
    pub depth: usize,
    pub size: usize,
    pub rows: Vec<BottleneckRow>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    depth: usize,
    size: usize,
    count: usize,
}

impl BottleneckTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BottleneckRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// One JSON header line, then one JSON line per entity.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), ExploreError> {
        let header = TableHeader {
            depth: self.depth,
            size: self.size,
            count: self.rows.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).map_err(|e| ExploreError::Format(e.to_string()))?)?;
        for r in &self.rows {
            writeln!(w, "{}", serde_json::to_string(r).map_err(|e| ExploreError::Format(e.to_string()))?)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<BottleneckTable, ExploreError> {
        let fmt = |e: serde_json::Error| ExploreError::Format(e.to_string());
        let mut lines = r.lines();
        let header: TableHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(fmt)?,
            None => return Err(ExploreError::Format("empty file".into())),
        };
        let mut rows = Vec::with_capacity(header.count);
        for l in lines {
            let l = l?;
            if l.trim().is_empty() {
                continue;
            }
            let row: BottleneckRow = serde_json::from_str(&l).map_err(fmt)?;
            if row.values.len() != header.size {
                return Err(ExploreError::Format(format!("row {:?} has {} values, expected {}", row.id, row.values.len(), header.size)));
            }
            rows.push(row);
        }
        if rows.len() != header.count {
            return Err(ExploreError::Format(format!("header says {} rows, found {}", header.count, rows.len())));
        }
        Ok(BottleneckTable {
            depth: header.depth,
            size: header.size,
            rows,
        })
    }
}

/// Evaluation-mode bottlenecks of every entity at `depth`, computed over
/// whole connected components. Rows follow dataset order.
pub fn export_bottlenecks(model: &AssembledModel, dataset: &Dataset, depth: usize) -> Result<BottleneckTable, ExploreError> {
    let max = model.wiring().depth;
    if depth > max {
        return Err(ExploreError::Depth { depth, max });
    }
    let size = model.wiring().bottleneck_size;
    let mut vectors: Vec<Option<Vec<f64>>> = vec![None; dataset.len()];
    let batches = sample_batches(dataset, &Policy::Component, 512, 0).map_err(ModelError::from)?;
    for b in &batches {
        let out = model.forward(dataset, b)?;
        for (k, &i) in b.members.iter().enumerate() {
            vectors[i] = Some(out.bottleneck(depth, k).to_vec());
        }
    }
    let rows = vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| BottleneckRow {
            id: dataset.id(i).to_string(),
            entity_type: dataset.entity_type(i).to_string(),
            values: v.expect("component batches cover every entity"),
        })
        .collect();
    Ok(BottleneckTable { depth, size, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SearchMode {
    /// Every pair is scored.
    #[default]
    Exact,
    /// Only pairs sharing a random-hyperplane signature of `bits` bits in
    /// at least one of `tables` hash tables are scored. May miss pairs.
    Approximate { bits: usize, tables: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairList {
    pub pairs: Vec<Pair>,
    /// True when the list came from approximate search.
    pub approximate: bool,
    /// Entities left out, for example because their vector has zero norm.
    pub warnings: Vec<String>,
}

struct Candidate {
    sim: f64,
    a: usize,
    b: usize,
}

/// Rank order: higher similarity first, then lexicographic (id, id).
fn better(x: &Candidate, y: &Candidate, ids: &[&str]) -> Ordering {
    y.sim
        .total_cmp(&x.sim)
        .then_with(|| ids[x.a].cmp(ids[y.a]))
        .then_with(|| ids[x.b].cmp(ids[y.b]))
}

struct Ranked<'a> {
    c: Candidate,
    ids: &'a [&'a str],
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked<'_> {}
impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        better(&self.c, &other.c, self.ids)
    }
}

struct Prepared<'a> {
    ids: Vec<&'a str>,
    unit: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

fn prepare<'a>(table: &'a BottleneckTable, entity_type: Option<&str>) -> Prepared<'a> {
    let mut rows: Vec<&BottleneckRow> = table
        .rows
        .iter()
        .filter(|r| entity_type.is_none_or(|t| r.entity_type == t))
        .collect();
    rows.sort_by(|x, y| x.id.cmp(&y.id));
    let mut p = Prepared {
        ids: Vec::new(),
        unit: Vec::new(),
        warnings: Vec::new(),
    };
    for r in rows {
        let norm = r.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            p.warnings.push(format!("entity {:?} has a zero-norm bottleneck and was excluded", r.id));
            continue;
        }
        p.ids.push(&r.id);
        p.unit.push(r.values.iter().map(|v| v / norm).collect());
    }
    p
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn top_k<'a>(ids: &'a [&'a str], k: usize, candidates: impl Iterator<Item = Candidate>) -> Vec<Candidate> {
    let mut heap: BinaryHeap<Ranked<'a>> = BinaryHeap::with_capacity(k + 1);
    for c in candidates {
        heap.push(Ranked { c, ids });
        if heap.len() > k {
            heap.pop();
        }
    }
    let mut out: Vec<Candidate> = heap.into_iter().map(|r| r.c).collect();
    out.sort_by(|x, y| better(x, y, ids));
    out
}

fn into_list(p: &Prepared, best: Vec<Candidate>, approximate: bool) -> PairList {
    PairList {
        pairs: best
            .into_iter()
            .map(|c| Pair {
                a: p.ids[c.a].to_string(),
                b: p.ids[c.b].to_string(),
                similarity: c.sim,
            })
            .collect(),
        approximate,
        warnings: p.warnings.clone(),
    }
}

/// The `k` most cosine-similar unordered pairs among the table's entities,
/// optionally restricted to one entity-type. Each pair lists the
/// lexicographically smaller id first.
pub fn nearest_pairs(table: &BottleneckTable, entity_type: Option<&str>, k: usize, mode: SearchMode) -> Result<PairList, ExploreError> {
    if k == 0 {
        return Err(ExploreError::ZeroK);
    }
    let p = prepare(table, entity_type);
    let n = p.ids.len();
    if n < 2 {
        return Err(ExploreError::TooFew(n));
    }
    let unit = &p.unit;
    let best = match mode {
        SearchMode::Exact => top_k(
            &p.ids,
            k,
            (0..n).flat_map(|a| (a + 1..n).map(move |b| Candidate { sim: dot(&unit[a], &unit[b]), a, b })),
        ),
        SearchMode::Approximate { bits, tables, seed } => {
            let pairs = lsh_candidates(unit, table.size, bits, tables, seed);
            top_k(
                &p.ids,
                k,
                pairs.into_iter().map(|(a, b)| Candidate { sim: dot(&unit[a], &unit[b]), a, b }),
            )
        }
    };
    Ok(into_list(&p, best, matches!(mode, SearchMode::Approximate { .. })))
}

/// The `k` entities most similar to `id`. With `same_type` only entities of
/// its own type are considered.
pub fn neighbors_of(table: &BottleneckTable, id: &str, k: usize, same_type: bool) -> Result<PairList, ExploreError> {
    if k == 0 {
        return Err(ExploreError::ZeroK);
    }
    let row = table.get(id).ok_or_else(|| ExploreError::UnknownId(id.to_string()))?;
    let p = prepare(table, same_type.then_some(row.entity_type.as_str()));
    let Some(q) = p.ids.iter().position(|&x| x == id) else {
        return Err(ExploreError::TooFew(0));
    };
    if p.ids.len() < 2 {
        return Err(ExploreError::TooFew(p.ids.len()));
    }
    let unit = &p.unit;
    let best = top_k(
        &p.ids,
        k,
        (0..p.ids.len()).filter(|&j| j != q).map(|j| {
            let (a, b) = if j < q { (j, q) } else { (q, j) };
            Candidate { sim: dot(&unit[q], &unit[j]), a, b }
        }),
    );
    Ok(into_list(&p, best, false))
}

fn lsh_candidates(unit: &[Vec<f64>], dim: usize, bits: usize, tables: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits = bits.clamp(1, 63);
    let mut pairs = std::collections::BTreeSet::new();
    for _ in 0..tables.max(1) {
        let planes: Vec<Vec<f64>> = (0..bits)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, v) in unit.iter().enumerate() {
            let sig = planes
                .iter()
                .enumerate()
                .fold(0u64, |s, (bi, h)| s | (u64::from(dot(v, h) >= 0.0) << bi));
            buckets.entry(sig).or_default().push(i);
        }
        for members in buckets.values() {
            for (x, &a) in members.iter().enumerate() {
                for &b in &members[x + 1..] {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Per entity-type counts, for summaries.
pub fn type_counts(table: &BottleneckTable) -> IndexMap<String, usize> {
    let mut m = IndexMap::new();
    for r in &table.rows {
        *m.entry(r.entity_type.clone()).or_insert(0) += 1;
    }
    m
}
