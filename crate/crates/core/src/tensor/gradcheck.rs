//! Central finite-difference checks of tape gradients.

use super::{ParamStore, Tape, Tensor, TensorError, Var};

/// Step used by [`check_gradients`].
pub const STEP: f64 = 1e-5;

/// Largest relative error over all checked tensors, with the name of the
/// worst one.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    diff / scale.max(1e-6)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences, for every input tensor and every parameter in `store`.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    f: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |name: String, analytic: Vec<f64>, numeric: Vec<f64>| {
        let e = relative_error(&analytic, &numeric);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = name;
        }
    };

    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + STEP;
            let up = eval(store, &work)?;
            work[i].data_mut()[j] = x - STEP;
            let down = eval(store, &work)?;
            work[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * STEP);
        }
        record(format!("input {i}"), analytic, numeric);
    }

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = x + STEP;
            let up = eval(store, inputs)?;
            store.get_mut(id).data_mut()[j] = x - STEP;
            let down = eval(store, inputs)?;
            store.get_mut(id).data_mut()[j] = x;
            *slot = (up - down) / (2.0 * STEP);
        }
        record(store.name(id).to_string(), analytic, numeric);
    }
    Ok(report)
}
