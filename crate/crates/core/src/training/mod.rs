//! Splitting, training with a plateau schedule, and masked evaluation.

pub mod synthetic;

use std::collections::{BTreeSet, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    apply_mask, sample_batches_within, Batch, Dataset, DatasetError, MaskSpec, PackedValue, Policy,
};
use crate::model::{AssembledModel, ModelError, Mode};
use crate::schema::PropertyType;
use crate::tensor::{Adam, AdamConfig, Tape};

pub use synthetic::{generate_arithmetic, generate_hierarchy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss in epoch {epoch}, batch {batch}: {message}")]
    NonFinite { epoch: usize, batch: usize, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Entity indices of the train, dev and test splits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Split {
    pub fn get(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// Splits by connected component so that no component straddles two splits.
/// Dev and test are filled first, up to their share of the entities.
pub fn split_dataset(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split, TrainError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n = dataset.len();
    let dev_target = (fractions[1] * n as f64).round() as usize;
    let test_target = (fractions[2] * n as f64).round() as usize;
    let mut comps = dataset.connected_components();
    comps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut split = Split::default();
    for c in comps {
        if split.dev.len() + c.len() <= dev_target {
            split.dev.extend(c);
        } else if split.test.len() + c.len() <= test_target {
            split.test.extend(c);
        } else {
            if (dev_target > 0 && c.len() > dev_target) || (test_target > 0 && c.len() > test_target) {
                split.warnings.push(format!(
                    "component of {} entities exceeds the dev/test capacity and was assigned to train",
                    c.len()
                ));
            }
            split.train.extend(c);
        }
    }
    for part in [&mut split.train, &mut split.dev, &mut split.test] {
        part.sort_unstable();
    }
    Ok(split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub early_stop: usize,
    /// Most entities per batch.
    pub budget: usize,
    pub mask: MaskSpec,
    pub policy: Policy,
    pub seed: u64,
    /// Epochs of standalone encoder/decoder pretraining before joint training.
    pub warm_start_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            learning_rate: 1e-3,
            patience: 10,
            early_stop: 20,
            budget: 256,
            mask: MaskSpec::default(),
            policy: Policy::Component,
            seed: 0,
            warm_start_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.early_stop < self.patience {
            return Err(TrainError::Config("early stop must be at least the patience".into()));
        }
        if self.budget == 0 {
            return Err(TrainError::Config("batch budget must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        self.mask.validate()?;
        Ok(())
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub halve: bool,
    pub stop: bool,
}

/// Reduce-on-plateau and early-stopping counters.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub early_stop: usize,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, early_stop: usize) -> Self {
        PlateauSchedule {
            patience,
            early_stop,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> ScheduleStep {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
            return ScheduleStep {
                improved: true,
                ..Default::default()
            };
        }
        self.bad_epochs += 1;
        let stop = self.bad_epochs >= self.early_stop;
        ScheduleStep {
            improved: false,
            halve: !stop && self.patience > 0 && self.bad_epochs.is_multiple_of(self.patience),
            stop,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest dev loss.
    pub model: AssembledModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }
}

fn seed_for(base: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32));
    rng.gen()
}

/// Trains `model` on `split.train`, early-stopping on `split.dev`.
/// `on_epoch` sees every history record as it is produced.
pub fn train(
    model: AssembledModel,
    dataset: &Dataset,
    split: &Split,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(TrainError::Config("training split is empty".into()));
    }
    let mut model = model;
    if config.warm_start_epochs > 0 {
        warm_start(&mut model, dataset, split, config)?;
    }
    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
    );
    let dev_batches = eval_batches(dataset, &split.dev, config)?;
    let mut schedule = PlateauSchedule::new(config.patience, config.early_stop);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        let batches = sample_batches_within(
            dataset,
            &split.train,
            &config.policy,
            config.budget,
            seed_for(config.seed, epoch as u64, 0),
        )?;
        let mut train_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let masked = apply_mask(dataset, batch, &config.mask.with_seed(seed_for(config.seed, epoch as u64, bi as u64 + 1)))?;
            let mut tape = Tape::new();
            let trace = model.trace(&mut tape, dataset, &masked, Mode::Train).map_err(|e| match e {
                ModelError::Tensor(t) => TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    message: t.to_string(),
                },
                e => e.into(),
            })?;
            if !trace.output.loss.is_finite() {
                let culprit = trace
                    .output
                    .property_losses
                    .iter()
                    .find(|(_, v)| !v.is_finite())
                    .map(|(p, _)| p.clone())
                    .unwrap_or_else(|| "internal reconstruction".into());
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    message: format!("property {culprit:?}"),
                });
            }
            train_sum += trace.output.loss;
            let grads = tape.backward(trace.loss).map_err(ModelError::from)?;
            adam.step(model.params_mut(), &grads);
            model.apply_bn(&trace.bn);
        }
        let train_loss = train_sum / split.train.len() as f64;
        let dev_loss = if split.dev.is_empty() {
            train_loss
        } else {
            mean_loss(&model, dataset, &dev_batches, split.dev.len())?
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            learning_rate: adam.learning_rate(),
        };
        on_epoch(&record);
        history.push(record);
        let step = schedule.observe(dev_loss);
        if step.improved {
            best = model.clone();
            best_epoch = epoch;
        }
        if step.stop {
            break;
        }
        if step.halve {
            adam.set_learning_rate(adam.learning_rate() * 0.5);
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_dev_loss: schedule.best,
    })
}

/// Whole-component batches of `ids` with the configured masks drawn from a
/// fixed seed, so every epoch scores the same objective.
fn eval_batches(dataset: &Dataset, ids: &[usize], config: &TrainConfig) -> Result<Vec<Batch>, TrainError> {
    let batches = sample_batches_within(dataset, ids, &Policy::Component, config.budget, config.seed)?;
    batches
        .iter()
        .enumerate()
        .map(|(i, b)| Ok(apply_mask(dataset, b, &config.mask.with_seed(seed_for(config.seed, u64::MAX, i as u64)))?))
        .collect()
}

fn mean_loss(model: &AssembledModel, dataset: &Dataset, batches: &[Batch], count: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for b in batches {
        total += model.forward(dataset, b)?.loss;
    }
    Ok(total / count.max(1) as f64)
}

fn warm_start(model: &mut AssembledModel, dataset: &Dataset, split: &Split, config: &TrainConfig) -> Result<(), TrainError> {
    let mut adam = Adam::new(
        model.params(),
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
    );
    for epoch in 1..=config.warm_start_epochs {
        let batches = sample_batches_within(
            dataset,
            &split.train,
            &Policy::EntityLevel,
            config.budget,
            seed_for(config.seed, epoch as u64, u64::MAX),
        )?;
        for batch in &batches {
            let mut tape = Tape::new();
            let trace = model.trace_standalone(&mut tape, dataset, batch, Mode::Train)?;
            let grads = tape.backward(trace.loss).map_err(ModelError::from)?;
            adam.step(model.params_mut(), &grads);
            model.apply_bn(&trace.bn);
        }
    }
    Ok(())
}

/// Reconstruction quality of one masked property.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyMetric {
    pub property: String,
    #[serde(rename = "type")]
    pub kind: Option<PropertyType>,
    /// Number of masked values scored.
    pub count: usize,
    /// Percentage of exact categorical matches.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    /// Mean squared error on the packed (standardized) scale.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    /// Text: percentage of values reproduced exactly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    /// Text: percentage of positions with the right character.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub char_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub entities: usize,
    /// Mean loss per entity of the unmasked properties.
    pub loss: f64,
    pub properties: IndexMap<String, PropertyMetric>,
}

/// Hides `masked` everywhere in the components holding `ids`, reconstructs
/// in evaluation mode and scores the reconstructions of `ids` against the
/// hidden values.
pub fn evaluate_masked(
    model: &AssembledModel,
    dataset: &Dataset,
    masked: &[String],
    ids: &[usize],
    split_name: &str,
) -> Result<EvalReport, TrainError> {
    for p in masked {
        if !dataset.schema().properties.contains_key(p) {
            return Err(TrainError::Config(format!("unknown property {p:?}")));
        }
    }
    let spec = MaskSpec::always(masked.iter().cloned());
    let wanted: HashSet<usize> = ids.iter().copied().collect();
    let pool: Vec<usize> = dataset
        .connected_components()
        .into_iter()
        .filter(|c| c.iter().any(|i| wanted.contains(i)))
        .flatten()
        .collect();
    let batches = sample_batches_within(dataset, &pool, &Policy::Component, 512, 0)?;
    let mut acc: IndexMap<String, Accumulator> = masked
        .iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|p| (p.clone(), Accumulator::default()))
        .collect();
    let mut loss = 0.0;
    for b in &batches {
        let b = apply_mask(dataset, b, &spec)?;
        let out = model.forward(dataset, &b)?;
        loss += b
            .members
            .iter()
            .zip(&out.entity_losses)
            .filter(|(i, _)| wanted.contains(i))
            .map(|(_, l)| weighted(model, l))
            .sum::<f64>();
        let recon = model.reconstruct_packed(&out)?;
        for (k, &i) in b.members.iter().enumerate() {
            if !wanted.contains(&i) {
                continue;
            }
            for (p, a) in acc.iter_mut() {
                let (Some(truth), Some(guess)) = (dataset.packed(i).get(p), recon[k].get(p)) else {
                    continue;
                };
                a.add(truth, guess);
            }
        }
    }
    let properties = acc
        .into_iter()
        .map(|(p, a)| {
            let kind = dataset.schema().properties.get(&p).map(|d| d.kind);
            let m = a.finish(&p, kind);
            (p, m)
        })
        .collect();
    Ok(EvalReport {
        split: split_name.to_string(),
        entities: ids.len(),
        loss: loss / ids.len().max(1) as f64,
        properties,
    })
}

fn weighted(model: &AssembledModel, losses: &IndexMap<String, f64>) -> f64 {
    losses
        .iter()
        .map(|(p, l)| model.spec(p).map_or(1.0, |s| s.weight) * l)
        .sum()
}

#[derive(Default)]
struct Accumulator {
    count: usize,
    correct: usize,
    sq_error: f64,
    exact: usize,
    chars: usize,
    chars_right: usize,
}

impl Accumulator {
    fn add(&mut self, truth: &PackedValue, guess: &PackedValue) {
        self.count += 1;
        match (truth, guess) {
            (PackedValue::Index(a), PackedValue::Index(b)) => self.correct += usize::from(a == b),
            (PackedValue::Scalar(a), PackedValue::Scalar(b)) => self.sq_error += (a - b).powi(2),
            (PackedValue::Vector(a), PackedValue::Vector(b)) => {
                self.sq_error += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
            }
            (PackedValue::Sequence(a), PackedValue::Sequence(b)) => {
                self.exact += usize::from(a == b);
                self.chars += a.len().max(b.len());
                self.chars_right += a.iter().zip(b).filter(|(x, y)| x == y).count();
            }
            _ => {}
        }
    }

    fn finish(self, property: &str, kind: Option<PropertyType>) -> PropertyMetric {
        let n = self.count.max(1) as f64;
        let mut m = PropertyMetric {
            property: property.to_string(),
            kind,
            count: self.count,
            ..Default::default()
        };
        match kind {
            Some(PropertyType::Categorical) => m.accuracy = Some(100.0 * self.correct as f64 / n),
            Some(PropertyType::Text) => {
                m.exact_match = Some(100.0 * self.exact as f64 / n);
                m.char_accuracy = Some(100.0 * self.chars_right as f64 / self.chars.max(1) as f64);
            }
            Some(PropertyType::Image) | None => {}
            Some(_) => m.mse = Some(self.sq_error / n),
        }
        m
    }
}
