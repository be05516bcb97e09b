//! Sub-architectures: affine layers, MLPs, embeddings, GRUs and batch
//! normalization, plus the per-property encoders, decoders and losses built
//! from them.

mod property;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use property::{
    row_mask, DecoderKind, EncoderKind, LossKind, PropertyDecoder,
    PropertyEncoder, PropertySpec,
};

use crate::tensor::{ParamId, ParamStore, SparseRows, Tape, Tensor, TensorError, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add_weight(format!("{name}.w"), fan_in, fan_out, rng),
            bias: store.add_bias(format!("{name}.b"), fan_out),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Affine layers with relu between them and no activation after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists the input size, every hidden size and the output size.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> Self {
        Embedding {
            table: store.add_embedding(format!("{name}.table"), rows, dim, rng),
            rows,
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, indices: &[usize]) -> Result<Var, TensorError> {
        let t = tape.param(store, self.table);
        tape.gather(t, indices)
    }
}

/// Gated recurrent unit:
/// `z = σ(xWz + hUz + bz)`, `r = σ(xWr + hUr + br)`,
/// `ĥ = tanh(xWh + (r ⊙ h)Uh + bh)`, `h' = h + z ⊙ (ĥ − h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    /// `[input, 3·hidden]`, gate order z, r, h.
    pub w_x: ParamId,
    pub bias: ParamId,
    /// `[hidden, 2·hidden]` for z and r.
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Gru {
            w_x: store.add_weight(format!("{name}.w_x"), input, 3 * hidden, rng),
            bias: store.add_bias(format!("{name}.b"), 3 * hidden),
            u_zr: store.add_weight(format!("{name}.u_zr"), hidden, 2 * hidden, rng),
            u_h: store.add_weight(format!("{name}.u_h"), hidden, hidden, rng),
            input,
            hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var, TensorError> {
        let n = self.hidden;
        let (w_x, b, u_zr, u_h) = (
            tape.param(store, self.w_x),
            tape.param(store, self.bias),
            tape.param(store, self.u_zr),
            tape.param(store, self.u_h),
        );
        let gx = tape.matmul(x, w_x)?;
        let gx = tape.add(gx, b)?;
        let gh = tape.matmul(h, u_zr)?;
        let (gx_z, gx_r, gx_h) = (tape.slice(gx, 0, n)?, tape.slice(gx, n, 2 * n)?, tape.slice(gx, 2 * n, 3 * n)?);
        let (gh_z, gh_r) = (tape.slice(gh, 0, n)?, tape.slice(gh, n, 2 * n)?);
        let z = tape.add(gx_z, gh_z)?;
        let z = tape.sigmoid(z);
        let r = tape.add(gx_r, gh_r)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rh_u = tape.matmul(rh, u_h)?;
        let cand = tape.add(gx_h, rh_u)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        tape.add(h, delta)
    }

    /// Runs over per-row index sequences of different lengths, embedding each
    /// symbol with `embed`. Rows stop updating after their last symbol; an
    /// empty sequence leaves the initial state.
    pub fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embed: &Embedding,
        sequences: &[&[usize]],
        h0: Var,
    ) -> Result<Var, TensorError> {
        let steps = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut h = h0;
        for t in 0..steps {
            let idx: Vec<usize> = sequences.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = embed.forward(tape, store, &idx)?;
            let next = self.step(tape, store, x, h)?;
            h = blend_rows(tape, h, next, sequences.iter().map(|s| t < s.len()))?;
        }
        Ok(h)
    }
}

/// Rows where `take` is true come from `new`, the others from `old`.
pub(crate) fn blend_rows(
    tape: &mut Tape,
    old: Var,
    new: Var,
    take: impl Iterator<Item = bool>,
) -> Result<Var, TensorError> {
    let mask: Vec<f64> = take.map(|b| if b { 1.0 } else { 0.0 }).collect();
    if mask.iter().all(|&m| m == 1.0) {
        return Ok(new);
    }
    let m = tape.constant(row_mask(mask));
    let delta = tape.sub(new, old)?;
    let delta = tape.mul(delta, m)?;
    tape.add(old, delta)
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(dim: usize) -> Self {
        BnStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    /// Moves the running statistics towards a batch's mean and biased
    /// variance over `n` rows; the variance is stored unbiased.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], n: usize) {
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for i in 0..self.mean.len() {
            self.mean[i] = (1.0 - BN_MOMENTUM) * self.mean[i] + BN_MOMENTUM * batch_mean[i];
            self.var[i] = (1.0 - BN_MOMENTUM) * self.var[i] + BN_MOMENTUM * batch_var[i] * unbias;
        }
    }
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

/// Batch statistics observed by a training-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnObservation {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0)),
            beta: store.add_bias(format!("{name}.beta"), dim),
            dim,
        }
    }

    /// Training mode with at least two rows normalizes by the batch mean and
    /// biased variance and reports them; otherwise running statistics are used.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stats: &BnStats,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BnObservation>), TensorError> {
        let rows = tape.value(x).outer();
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (normed, obs) = if training && rows >= 2 {
            let mean = tape.mean_rows(x);
            let centered = tape.sub(x, mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_rows(sq);
            let eps = tape.constant(Tensor::scalar(BN_EPS));
            let var_eps = tape.add(var, eps)?;
            let inv = tape.powf(var_eps, -0.5);
            let obs = BnObservation {
                mean: tape.value(mean).data().to_vec(),
                var: tape.value(var).data().to_vec(),
                rows,
            };
            (tape.mul(centered, inv)?, Some(obs))
        } else {
            let mean = tape.constant(Tensor::vector(stats.mean.clone()));
            let inv = stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let inv = tape.constant(Tensor::vector(inv));
            let centered = tape.sub(x, mean)?;
            (tape.mul(centered, inv)?, None)
        };
        let scaled = tape.mul(normed, gamma)?;
        Ok((tape.add(scaled, beta)?, obs))
    }
}

/// Affine map from a bottleneck summary to a relationship slot, then tanh.
/// Rows with no neighbors stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub linear: Linear,
}

impl Projector {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Projector {
            linear: Linear::new(store, name, input, output, rng),
        }
    }

    /// `neighbors[i]` lists rows of `bottlenecks` adjacent to output row `i`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bottlenecks: Var,
        neighbors: &[Vec<usize>],
    ) -> Result<Var, TensorError> {
        let n_in = tape.value(bottlenecks).outer();
        let present: Vec<usize> = (0..neighbors.len()).filter(|&i| !neighbors[i].is_empty()).collect();
        if present.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[neighbors.len(), self.linear.fan_out])));
        }
        let members: Vec<Vec<usize>> = present.iter().map(|&i| neighbors[i].clone()).collect();
        let mean = tape.spmm(SparseRows::mean_of(n_in, &members), bottlenecks)?;
        let proj = self.linear.forward(tape, store, mean)?;
        let proj = tape.tanh(proj);
        if present.len() == neighbors.len() {
            return Ok(proj);
        }
        tape.spmm(SparseRows::scatter(neighbors.len(), &present), proj)
    }
}

/// Per-depth entity autoencoder: input → hidden (relu) → bottleneck (tanh)
/// → hidden (relu) → output (linear).
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub bottleneck: usize,
}

impl Autoencoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        bottleneck: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Autoencoder {
            encoder: Mlp::new(store, &format!("{name}.enc"), &[input, hidden, bottleneck], rng),
            decoder: Mlp::new(store, &format!("{name}.dec"), &[bottleneck, hidden, output], rng),
            bottleneck,
        }
    }

    pub fn input_size(&self) -> usize {
        self.encoder.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.decoder.output_size()
    }

    /// Returns `(output, bottleneck)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var), TensorError> {
        let b = self.encoder.forward(tape, store, x)?;
        let b = tape.tanh(b);
        let out = self.decoder.forward(tape, store, b)?;
        Ok((out, b))
    }
}
