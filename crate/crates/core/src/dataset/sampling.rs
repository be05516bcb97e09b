use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError};

/// Entities pinned into every conditional-independence batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    EntityType(String),
    Ids(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
#[derive(Default)]
pub enum Policy {
    #[default]
    Component,
    ConditionalIndependence { anchor: Anchor },
    Snowflake { radius: usize },
    EntityLevel,
}


/// A subset of entities with adjacency restricted to it and per-entity
/// property masks. Local index `k` refers to `members[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub members: Vec<usize>,
    /// Adjacency seen by the forward pass, per relationship, in local indices.
    pub edges: IndexMap<String, Vec<(usize, usize)>>,
    /// Adjacency before relationship dropout.
    pub true_edges: IndexMap<String, Vec<(usize, usize)>>,
    /// Properties hidden from the input, per local entity.
    pub hidden: Vec<BTreeSet<String>>,
    /// Properties excluded from the loss, per local entity.
    pub unscored: Vec<BTreeSet<String>>,
}

impl Batch {
    pub fn new(dataset: &Dataset, members: Vec<usize>) -> Batch {
        let local: HashMap<usize, usize> = members.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let mut edges: IndexMap<String, Vec<(usize, usize)>> = dataset
            .edges()
            .keys()
            .map(|k| (k.clone(), Vec::new()))
            .collect();
        for (k, &i) in members.iter().enumerate() {
            for &(ri, j) in dataset.out_edges(i) {
                if let Some(&l) = local.get(&j) {
                    edges[ri].push((k, l));
                }
            }
        }
        let n = members.len();
        Batch {
            members,
            true_edges: edges.clone(),
            edges,
            hidden: vec![BTreeSet::new(); n],
            unscored: vec![BTreeSet::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Whether property `p` of local entity `k` is visible to the encoder.
    pub fn observed(&self, dataset: &Dataset, k: usize, p: &str) -> bool {
        dataset.packed(self.members[k]).contains_key(p) && !self.hidden[k].contains(p)
    }

    /// Whether property `p` of local entity `k` contributes to the loss.
    pub fn scored(&self, dataset: &Dataset, k: usize, p: &str) -> bool {
        dataset.packed(self.members[k]).contains_key(p) && !self.unscored[k].contains(p)
    }
}

/// Dropout rates and evaluation masks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSpec {
    /// Per-property input dropout rate.
    pub property_rates: IndexMap<String, f64>,
    /// Input dropout rate for properties not listed in `property_rates`.
    pub default_property_rate: f64,
    pub entity_rate: f64,
    pub relationship_rate: f64,
    /// Hidden everywhere and never scored.
    pub always_mask: BTreeSet<String>,
    pub seed: u64,
}

impl MaskSpec {
    pub fn always(props: impl IntoIterator<Item = impl Into<String>>) -> MaskSpec {
        MaskSpec {
            always_mask: props.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn with_seed(&self, seed: u64) -> MaskSpec {
        MaskSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let rates = self
            .property_rates
            .iter()
            .map(|(k, v)| (k.as_str(), *v))
            .chain([
                ("default_property_rate", self.default_property_rate),
                ("entity_rate", self.entity_rate),
                ("relationship_rate", self.relationship_rate),
            ]);
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(DatasetError::Mask(format!("rate {name} = {r} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn rate(&self, p: &str) -> f64 {
        self.property_rates.get(p).copied().unwrap_or(self.default_property_rate)
    }

    pub fn is_identity(&self) -> bool {
        self.always_mask.is_empty()
            && self.default_property_rate == 0.0
            && self.entity_rate == 0.0
            && self.relationship_rate == 0.0
            && self.property_rates.values().all(|&r| r == 0.0)
    }
}

/// Draws masks for `batch`. Dropped values are hidden from the input but
/// still scored; always-masked values are hidden and unscored.
pub fn apply_mask(dataset: &Dataset, batch: &Batch, spec: &MaskSpec) -> Result<Batch, DatasetError> {
    spec.validate()?;
    let mut out = batch.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for (k, &i) in batch.members.iter().enumerate() {
        let drop_entity = spec.entity_rate > 0.0 && rng.gen_bool(spec.entity_rate);
        for p in dataset.packed(i).keys() {
            if spec.always_mask.contains(p) {
                out.hidden[k].insert(p.clone());
                out.unscored[k].insert(p.clone());
                continue;
            }
            let r = spec.rate(p);
            let drop = r > 0.0 && rng.gen_bool(r);
            if drop_entity || drop {
                out.hidden[k].insert(p.clone());
            }
        }
    }
    if spec.relationship_rate > 0.0 {
        for list in out.edges.values_mut() {
            list.retain(|_| !rng.gen_bool(spec.relationship_rate));
        }
    }
    Ok(out)
}

/// One epoch of batches over the whole dataset.
pub fn sample_batches(
    dataset: &Dataset,
    policy: &Policy,
    budget: usize,
    seed: u64,
) -> Result<Vec<Batch>, DatasetError> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    sample_batches_within(dataset, &all, policy, budget, seed)
}

/// One epoch of batches over the entities in `pool`; edges leaving the pool
/// are ignored.
pub fn sample_batches_within(
    dataset: &Dataset,
    pool: &[usize],
    policy: &Policy,
    budget: usize,
    seed: u64,
) -> Result<Vec<Batch>, DatasetError> {
    if budget == 0 {
        return Err(DatasetError::Sampling("budget must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = match policy {
        Policy::Component => {
            let mut comps = dataset.components_within(pool);
            comps.shuffle(&mut rng);
            pack_greedy(comps, budget, &[])
        }
        Policy::ConditionalIndependence { anchor } => {
            let anchors = resolve_anchor(dataset, pool, anchor)?;
            if anchors.len() > budget {
                return Err(DatasetError::Sampling(format!(
                    "{} anchor entities exceed the batch budget {budget}",
                    anchors.len()
                )));
            }
            let pinned: HashSet<usize> = anchors.iter().copied().collect();
            let rest: Vec<usize> = pool.iter().copied().filter(|i| !pinned.contains(i)).collect();
            let mut comps = dataset.components_within(&rest);
            comps.shuffle(&mut rng);
            let mut groups = pack_greedy(comps, budget, &anchors);
            if groups.is_empty() && !anchors.is_empty() {
                groups.push(anchors);
            }
            groups
        }
        Policy::Snowflake { radius } => snowflakes(dataset, pool, *radius, budget, &mut rng),
        Policy::EntityLevel => {
            let mut order = pool.to_vec();
            order.shuffle(&mut rng);
            order.chunks(budget).map(<[usize]>::to_vec).collect()
        }
    };
    Ok(groups.into_iter().map(|m| Batch::new(dataset, m)).collect())
}

fn resolve_anchor(dataset: &Dataset, pool: &[usize], anchor: &Anchor) -> Result<Vec<usize>, DatasetError> {
    match anchor {
        Anchor::EntityType(t) => {
            if dataset.schema().entity_types.get(t).is_none() {
                return Err(DatasetError::Sampling(format!("unknown anchor entity-type {t:?}")));
            }
            Ok(pool.iter().copied().filter(|&i| dataset.entity_type(i) == t).collect())
        }
        Anchor::Ids(ids) => {
            let in_pool: HashSet<usize> = pool.iter().copied().collect();
            ids.iter()
                .map(|id| {
                    dataset
                        .index_of(id)
                        .filter(|i| in_pool.contains(i))
                        .ok_or_else(|| DatasetError::Sampling(format!("anchor id {id:?} is not in the sampled set")))
                })
                .collect()
        }
    }
}

/// Packs whole groups into batches of at most `budget` entities, each batch
/// starting with `pinned`. A group that cannot fit even alone gets its own
/// oversized batch rather than being split.
fn pack_greedy(groups: Vec<Vec<usize>>, budget: usize, pinned: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = pinned.to_vec();
    for g in groups {
        if current.len() > pinned.len() && current.len() + g.len() > budget {
            out.push(std::mem::replace(&mut current, pinned.to_vec()));
        }
        current.extend(g);
    }
    if current.len() > pinned.len() {
        out.push(current);
    }
    out
}

fn snowflakes(dataset: &Dataset, pool: &[usize], radius: usize, budget: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let in_pool: HashSet<usize> = pool.iter().copied().collect();
    let mut seeds = pool.to_vec();
    seeds.shuffle(rng);
    let mut covered: HashSet<usize> = HashSet::new();
    let mut out = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut in_current: HashSet<usize> = HashSet::new();
    for s in seeds {
        if covered.contains(&s) {
            continue;
        }
        if current.len() >= budget {
            out.push(std::mem::take(&mut current));
            in_current.clear();
        }
        let mut queue = VecDeque::from([(s, 0usize)]);
        let mut seen = HashSet::from([s]);
        while let Some((i, d)) = queue.pop_front() {
            if current.len() >= budget {
                break;
            }
            if in_current.insert(i) {
                current.push(i);
                covered.insert(i);
            }
            if d == radius {
                continue;
            }
            for &j in dataset.neighbors(i) {
                if in_pool.contains(&j) && seen.insert(j) {
                    queue.push_back((j, d + 1));
                }
            }
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}
