mod common;

use std::collections::HashMap;

use common::{multigraph, small_wiring};
use graphae::dataset::{apply_mask, Batch, Dataset, MaskSpec};
use graphae::model::{AssembledModel, Wiring};
use graphae::schema::{apply_rules, parse_schema};
use graphae::tensor::Tensor;
use graphae::training::synthetic::{apply_operation, MIN_DENOMINATOR};
use graphae::training::{
    evaluate_masked, generate_arithmetic, split_dataset, train, EpochRecord, PlateauSchedule, Split, TrainConfig,
    TrainError,
};
use proptest::prelude::*;
use serde_json::{json, Value};

fn arithmetic(trees: usize, seed: u64) -> Dataset {
    let (schema, raw) = generate_arithmetic(trees, 7, seed).unwrap();
    let schema = apply_rules(&schema, &[]).unwrap().schema;
    let ds = Dataset::new(schema, &raw).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    ds.fit(&all).unwrap()
}

fn singletons(n: usize) -> Dataset {
    let schema = apply_rules(
        &parse_schema(r#"{"entity_types": {"n": ["x"]}, "properties": {"x": {"type": "scalar"}}, "relationships": {}}"#)
            .unwrap(),
        &[],
    )
    .unwrap()
    .schema;
    let raw: Vec<Value> = (0..n).map(|i| json!({"entity_type": "n", "id": format!("s{i}"), "x": i})).collect();
    let ds = Dataset::new(schema, &raw).unwrap();
    let all: Vec<usize> = (0..n).collect();
    ds.fit(&all).unwrap()
}

#[test]
fn ten_singletons_split_eight_one_one() {
    let s = split_dataset(&singletons(10), [0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
    assert!(s.warnings.is_empty());
}

#[test]
fn giant_component_goes_to_train_with_warning() {
    let (schema, raw) = (0..)
        .map(|seed| generate_arithmetic(1, 7, seed).unwrap())
        .find(|(_, r)| r.len() == 7)
        .unwrap();
    let ds = Dataset::new(apply_rules(&schema, &[]).unwrap().schema, &raw).unwrap();
    let s = split_dataset(&ds, [0.6, 0.2, 0.2], 0).unwrap();
    assert_eq!(s.train.len(), ds.len());
    assert!(s.dev.is_empty() && s.test.is_empty());
    assert_eq!(s.warnings.len(), 1);
}

#[test]
fn bad_fractions_are_rejected() {
    assert!(split_dataset(&singletons(4), [0.5, 0.5, 0.5], 0).is_err());
    assert!(split_dataset(&singletons(4), [1.2, -0.1, -0.1], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_never_cut_components(n in 1usize..150, epe in 0.0f64..2.0, seed in any::<u64>()) {
        let ds = multigraph(n, epe, seed);
        let s = split_dataset(&ds, [0.8, 0.1, 0.1], seed).unwrap();
        prop_assert_eq!(&s, &split_dataset(&ds, [0.8, 0.1, 0.1], seed).unwrap());
        let mut part = vec![usize::MAX; ds.len()];
        for (k, ids) in [&s.train, &s.dev, &s.test].iter().enumerate() {
            for &i in ids.iter() {
                prop_assert_eq!(part[i], usize::MAX);
                part[i] = k;
            }
        }
        prop_assert!(part.iter().all(|&p| p != usize::MAX));
        for list in ds.edges().values() {
            for &(a, b) in list {
                prop_assert_eq!(part[a], part[b]);
            }
        }
        prop_assert!(s.dev.len() <= (0.1 * n as f64).round() as usize);
    }

    #[test]
    fn generated_trees_satisfy_their_operations(seed in any::<u64>(), count in 1usize..40) {
        let (schema, raw) = generate_arithmetic(count, 7, seed).unwrap();
        let ds = Dataset::new(apply_rules(&schema, &[]).unwrap().schema, &raw).unwrap();
        let comps = ds.connected_components();
        prop_assert_eq!(comps.len(), count);
        let value = |i: usize| ds.record(i).properties["value"].as_f64().unwrap();
        let target = |i: usize, rel: &str| ds.index_of(&ds.record(i).relationships[rel][0]).unwrap();
        for comp in &comps {
            prop_assert!([1, 3, 5, 7].contains(&comp.len()));
            let ops = comp.iter().filter(|&&i| ds.record(i).properties["operation"] != "const").count();
            prop_assert_eq!(comp.len(), 2 * ops + 1);
        }
        for i in 0..ds.len() {
            let op = ds.record(i).properties["operation"].as_str().unwrap().to_string();
            if op == "const" {
                prop_assert!(ds.record(i).relationships.is_empty());
                prop_assert!((-1.0..=1.0).contains(&value(i)));
            } else {
                let (l, r) = (target(i, "left"), target(i, "right"));
                prop_assert_eq!(value(i), apply_operation(&op, value(l), value(r)));
                if op == "div" {
                    prop_assert!(value(r).abs() >= MIN_DENOMINATOR);
                }
            }
        }
    }
}

#[test]
fn hand_evaluated_tree() {
    assert_eq!(apply_operation("add", 0.5, 0.25), 0.75);
    assert_eq!(apply_operation("div", 1.0, -0.5), -2.0);
    let (_, raw) = generate_arithmetic(1, 1, 9).unwrap();
    assert_eq!(raw.len(), 1);
    assert_eq!(raw[0]["operation"], "const");
    assert!(generate_arithmetic(1, 4, 0).is_err());
}

#[test]
fn frozen_dev_loss_halves_then_stops() {
    let mut s = PlateauSchedule::new(10, 20);
    let mut halved = Vec::new();
    let mut stopped = None;
    for epoch in 1..=200 {
        let step = s.observe(1.0);
        if step.halve {
            halved.push(epoch);
        }
        if step.stop {
            stopped = Some(epoch);
            break;
        }
    }
    assert_eq!(halved, [11]);
    assert_eq!(stopped, Some(21));
    let mut s = PlateauSchedule::new(10, 20);
    for epoch in 0..200 {
        let step = s.observe(100.0 - epoch as f64 * 0.1);
        assert!(step.improved && !step.halve && !step.stop);
    }
}

fn full_split(ds: &Dataset) -> Split {
    let all: Vec<usize> = (0..ds.len()).collect();
    Split {
        train: all.clone(),
        dev: all,
        ..Default::default()
    }
}

#[test]
fn fifty_entity_fixture_halves_training_loss() {
    let ds = arithmetic(14, 21);
    assert!((45..=70).contains(&ds.len()), "{}", ds.len());
    let model = AssembledModel::assemble(ds.schema(), ds.codecs(), &small_wiring(1, Wiring::Naive), 3).unwrap();
    let config = TrainConfig {
        max_epochs: 200,
        early_stop: 200,
        patience: 200,
        ..Default::default()
    };
    let mut seen = 0;
    let out = train(model, &ds, &full_split(&ds), &config, |_| seen += 1).unwrap();
    assert_eq!(seen, out.history.len());
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    assert!(last <= 0.5 * first, "{first} -> {last}");
    let best = out.history.iter().map(|r| r.dev_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_dev_loss, best);
    assert_eq!(out.history[out.best_epoch - 1].dev_loss, best);
}

#[test]
fn same_seed_same_history() {
    let ds = arithmetic(30, 2);
    let split = split_dataset(&ds, [0.8, 0.1, 0.1], 2).unwrap();
    let run = || {
        let model = AssembledModel::assemble(ds.schema(), ds.codecs(), &small_wiring(1, Wiring::Highway), 4).unwrap();
        let config = TrainConfig {
            max_epochs: 6,
            budget: 20,
            mask: MaskSpec {
                default_property_rate: 0.3,
                ..Default::default()
            },
            seed: 17,
            warm_start_epochs: 2,
            ..Default::default()
        };
        train(model, &ds, &split, &config, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    for line in a.history_jsonl().lines() {
        let r: EpochRecord = serde_json::from_str(line).unwrap();
        assert!(r.train_loss.is_finite() && r.dev_loss.is_finite() && r.learning_rate > 0.0);
    }
}

#[test]
fn invalid_configuration_is_rejected() {
    let ds = arithmetic(5, 1);
    let model = AssembledModel::assemble(ds.schema(), ds.codecs(), &small_wiring(0, Wiring::Naive), 0).unwrap();
    let bad = TrainConfig {
        patience: 30,
        early_stop: 20,
        ..Default::default()
    };
    assert!(matches!(train(model.clone(), &ds, &full_split(&ds), &bad, |_| {}), Err(TrainError::Config(_))));
    let empty = Split::default();
    assert!(train(model, &ds, &empty, &TrainConfig::default(), |_| {}).is_err());
}

#[test]
fn non_finite_parameters_abort_with_diagnostic() {
    let ds = arithmetic(5, 1);
    let mut model = AssembledModel::assemble(ds.schema(), ds.codecs(), &small_wiring(0, Wiring::Naive), 0).unwrap();
    let id = model.params().find("decoder.node.value.l1.b").unwrap();
    *model.params_mut().get_mut(id) = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
    let err = train(model, &ds, &full_split(&ds), &TrainConfig::default(), |_| {}).unwrap_err().to_string();
    assert!(err.contains("value"), "{err}");
}

/// Zeroes the operation decoder and biases it to `class`.
fn constant_classifier(model: &mut AssembledModel, class: usize) {
    let ids: Vec<_> = model
        .params()
        .ids()
        .filter(|&id| model.params().name(id).starts_with("decoder.node.operation"))
        .collect();
    for &id in &ids {
        let shape = model.params().get(id).shape().to_vec();
        *model.params_mut().get_mut(id) = Tensor::zeros(&shape);
    }
    let last = *ids.last().unwrap();
    model.params_mut().get_mut(last).data_mut()[class] = 5.0;
}

#[test]
fn majority_classifier_scores_majority_frequency() {
    let ds = arithmetic(60, 5);
    let split = split_dataset(&ds, [0.8, 0.1, 0.1], 5).unwrap();
    let codec = ds.codecs().get("operation").unwrap().clone();
    let mut counts: HashMap<String, usize> = HashMap::new();
    for &i in &split.test {
        *counts.entry(ds.record(i).properties["operation"].as_str().unwrap().to_string()).or_default() += 1;
    }
    let (major, count) = counts.iter().max_by_key(|(_, c)| **c).unwrap();
    let mut model = AssembledModel::assemble(ds.schema(), ds.codecs(), &small_wiring(1, Wiring::Naive), 0).unwrap();
    constant_classifier(&mut model, codec.categories.iter().position(|c| c == major).unwrap());
    let report = evaluate_masked(&model, &ds, &["operation".into()], &split.test, "test").unwrap();
    let m = &report.properties["operation"];
    assert_eq!(m.count, split.test.len());
    let expected = 100.0 * *count as f64 / split.test.len() as f64;
    assert!((m.accuracy.unwrap() - expected).abs() < 1e-9, "{m:?} vs {expected}");
    assert_eq!(report.split, "test");
    assert_eq!(report.entities, split.test.len());
    let none = evaluate_masked(&model, &ds, &[], &split.test, "test").unwrap();
    assert!(none.properties.is_empty());
    assert!(evaluate_masked(&model, &ds, &["colour".into()], &split.test, "test").is_err());
}

#[test]
fn masked_ground_truth_is_not_read() {
    let (schema, raw) = generate_arithmetic(25, 7, 8).unwrap();
    let schema = apply_rules(&schema, &[]).unwrap().schema;
    let ds = Dataset::new(schema.clone(), &raw).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let ds = ds.fit(&all).unwrap();
    let mut tampered = raw.clone();
    for (i, e) in tampered.iter_mut().enumerate() {
        e["operation"] = json!(["add", "sub", "mul", "div", "const"][i % 5]);
    }
    let other = Dataset::new(schema, &tampered).unwrap().with_codecs(ds.codecs().clone()).unwrap();
    let model = AssembledModel::assemble(ds.schema(), ds.codecs(), &small_wiring(2, Wiring::Highway), 1).unwrap();
    let spec = MaskSpec::always(["operation"]);
    let a = model.forward(&ds, &apply_mask(&ds, &Batch::new(&ds, all.clone()), &spec).unwrap()).unwrap();
    let b = model.forward(&other, &apply_mask(&other, &Batch::new(&other, all), &spec).unwrap()).unwrap();
    assert_eq!(a.bottlenecks, b.bottlenecks);
    assert_eq!(model.reconstruct(&a).unwrap(), model.reconstruct(&b).unwrap());
    assert_eq!(a.loss, b.loss);
}
