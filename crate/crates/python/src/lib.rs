//! Python bindings. Documents go in and out as JSON text or plain Python
//! values.

use graphae::dataset::{Batch, Dataset};
use graphae::explore::{export_bottlenecks, nearest_pairs, SearchMode};
use graphae::model::{AssembledModel, Checkpoint, WiringConfig};
use graphae::schema::{apply_rules, parse_rules, parse_schema, read_entities, validate_entity, ValidationReport};
use graphae::training::{evaluate_masked, split_dataset, train, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use serde_json::{json, Value};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Validation report of `entities` against `schema` after `rules`.
#[pyfunction]
#[pyo3(signature = (schema, entities, rules=None))]
fn validate<'py>(py: Python<'py>, schema: &str, entities: &str, rules: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let rules = rules.map(parse_rules).transpose().map_err(err)?.unwrap_or_default();
    let schema = apply_rules(&parse_schema(schema).map_err(err)?, &rules).map_err(err)?.schema;
    let mut report = ValidationReport::default();
    for e in read_entities(entities).map_err(err)? {
        report.merge(validate_entity(&schema, &e));
    }
    to_py(py, &report)
}

/// Random arithmetic trees as `(schema_json, entities)`.
#[pyfunction]
#[pyo3(signature = (count, max_nodes=7, seed=0))]
fn generate_arithmetic<'py>(py: Python<'py>, count: usize, max_nodes: usize, seed: u64) -> PyResult<(String, Bound<'py, PyAny>)> {
    let (schema, entities) = graphae::training::generate_arithmetic(count, max_nodes, seed).map_err(err)?;
    Ok((schema.to_json_string(), to_py(py, &entities)?))
}

#[pyclass(name = "Model", module = "pygraphae")]
struct PyModel {
    inner: Checkpoint,
}

impl PyModel {
    fn dataset(&self, entities: &str) -> PyResult<Dataset> {
        let m = &self.inner.model;
        let raw = read_entities(entities).map_err(err)?;
        Dataset::new(m.schema().clone(), &raw)
            .and_then(|d| d.with_codecs(m.codecs().clone()))
            .map_err(err)
    }
}

#[pymethods]
impl PyModel {
    /// Trains a model and returns it with its per-epoch history.
    #[staticmethod]
    #[pyo3(signature = (schema, entities, depth=0, wiring="naive", max_epochs=200, seed=0, rules=None, split=(0.8, 0.1, 0.1)))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        schema: &str,
        entities: &str,
        depth: usize,
        wiring: &str,
        max_epochs: usize,
        seed: u64,
        rules: Option<&str>,
        split: (f64, f64, f64),
    ) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
        let rules = rules.map(parse_rules).transpose().map_err(err)?.unwrap_or_default();
        let schema = apply_rules(&parse_schema(schema).map_err(err)?, &rules).map_err(err)?.schema;
        let raw = read_entities(entities).map_err(err)?;
        let ds = Dataset::new(schema, &raw).map_err(err)?;
        let fractions = [split.0, split.1, split.2];
        let parts = split_dataset(&ds, fractions, seed).map_err(err)?;
        let ds = ds.fit(&parts.train).map_err(err)?;
        let w = WiringConfig {
            depth,
            wiring: wiring.parse().map_err(err)?,
            ..Default::default()
        };
        let config = TrainConfig {
            max_epochs,
            seed,
            ..Default::default()
        };
        let model = AssembledModel::assemble(ds.schema(), ds.codecs(), &w, seed).map_err(err)?;
        let out = py.detach(|| train(model, &ds, &parts, &config, |_| {})).map_err(err)?;
        let history = to_py(py, &out.history)?;
        let extra = json!({"split": fractions, "seed": seed, "train_config": config, "best_epoch": out.best_epoch});
        Ok((
            PyModel {
                inner: Checkpoint { model: out.model, extra },
            },
            history,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<PyModel> {
        let inner = Checkpoint::load(std::path::Path::new(path)).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner
            .save(std::path::Path::new(path))
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.model.wiring().depth
    }

    fn schema<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.model.schema().to_document())
    }

    /// Masked-property report over a split of `entities`.
    #[pyo3(signature = (entities, mask, split="test"))]
    fn evaluate<'py>(&self, py: Python<'py>, entities: &str, mask: Vec<String>, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.dataset(entities)?;
        let ids: Vec<usize> = if split == "all" {
            (0..ds.len()).collect()
        } else {
            let fractions: [f64; 3] = serde_json::from_value(self.inner.extra["split"].clone()).unwrap_or([0.8, 0.1, 0.1]);
            let seed = self.inner.extra["seed"].as_u64().unwrap_or(0);
            let parts = split_dataset(&ds, fractions, seed).map_err(err)?;
            parts.get(split).ok_or_else(|| err(format!("unknown split {split:?}")))?.to_vec()
        };
        let report = evaluate_masked(&self.inner.model, &ds, &mask, &ids, split).map_err(err)?;
        to_py(py, &report)
    }

    /// Evaluation-mode reconstructions of every entity, in input order,
    /// with `mask` hidden from the input.
    #[pyo3(signature = (entities, mask=Vec::new()))]
    fn infer<'py>(&self, py: Python<'py>, entities: &str, mask: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.dataset(entities)?;
        let mut batch = Batch::new(&ds, (0..ds.len()).collect());
        for h in &mut batch.hidden {
            h.extend(mask.iter().cloned());
        }
        let m = &self.inner.model;
        let out = m.forward(&ds, &batch).map_err(err)?;
        let recon = m.reconstruct(&out).map_err(err)?;
        let rows: Vec<Value> = recon
            .into_iter()
            .enumerate()
            .map(|(k, r)| json!({"id": ds.id(k), "reconstruction": r, "losses": out.entity_losses[k]}))
            .collect();
        to_py(py, &rows)
    }

    /// `{id: vector}` at `depth` (default: the model depth).
    #[pyo3(signature = (entities, depth=None))]
    fn bottlenecks<'py>(&self, py: Python<'py>, entities: &str, depth: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let ds = self.dataset(entities)?;
        let t = export_bottlenecks(&self.inner.model, &ds, depth.unwrap_or(self.depth())).map_err(err)?;
        let map: serde_json::Map<String, Value> = t.rows.into_iter().map(|r| (r.id, json!(r.values))).collect();
        to_py(py, &map)
    }

    /// The `k` most cosine-similar pairs as `(a, b, similarity)`.
    #[pyo3(signature = (entities, k=10, entity_type=None))]
    fn nearest_pairs(&self, entities: &str, k: usize, entity_type: Option<&str>) -> PyResult<Vec<(String, String, f64)>> {
        let ds = self.dataset(entities)?;
        let t = export_bottlenecks(&self.inner.model, &ds, self.depth()).map_err(err)?;
        let list = nearest_pairs(&t, entity_type, k, SearchMode::Exact).map_err(err)?;
        Ok(list.pairs.into_iter().map(|p| (p.a, p.b, p.similarity)).collect())
    }
}

#[pymodule]
fn pygraphae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_arithmetic, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
