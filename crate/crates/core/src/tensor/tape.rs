use std::collections::HashMap;

use super::{gemm, ParamId, ParamStore, SparseRows, Tensor, TensorError, LOG_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    Scalar,
    /// Right shape is a suffix of the left shape; holds its length.
    Trailing(usize),
    /// Left `[r, c]`, right `[r, 1]`; holds `c`.
    Column(usize),
}

impl Bcast {
    fn resolve(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast, TensorError> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if b.len() == 1 && sb.iter().all(|&d| d == 1) {
            return Ok(Bcast::Scalar);
        }
        if !sb.is_empty() && sb.len() < sa.len() && sa.ends_with(sb) {
            return Ok(Bcast::Trailing(b.len()));
        }
        if sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1 {
            return Ok(Bcast::Column(sa[1]));
        }
        Err(TensorError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            Bcast::Trailing(n) => i % n,
            Bcast::Column(c) => i / c,
        }
    }

    /// Sums a left-shaped gradient down to the right operand's shape.
    fn reduce(self, g: &[f64], b_len: usize) -> Vec<f64> {
        match self {
            Bcast::Same => g.to_vec(),
            _ => {
                let mut out = vec![0.0; b_len];
                for (i, v) in g.iter().enumerate() {
                    out[self.index(i)] += v;
                }
                out
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    MatMul(usize, usize),
    Concat(Vec<usize>),
    Slice(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    MeanRows(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Powf(usize, f64),
    Softmax(usize),
    LogSoftmax(usize),
    Gather(usize, Vec<usize>),
    SpMM(Box<SparseRows>, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in evaluation order for reverse-mode
/// differentiation. Values are computed eagerly.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inference: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor> {
        self.params
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameters do not require gradients.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs = !self.inference;
        let v = self.push(store.get(id).clone(), Op::Param(id), needs);
        self.params.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast), TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = Bcast::resolve(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[bc.index(i)]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data).unwrap(), bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0, bc), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0, bc), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0, bc), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(a.0);
        self.push(t, Op::Scale(a.0, s), ng)
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let t = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(t, Op::MatMul(a.0, b.0), ng))
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            message: "no inputs".into(),
        })?;
        let lead = self.nodes[first.0].value.shape().to_vec();
        let lead = &lead[..lead.len().saturating_sub(1)];
        let outer = self.nodes[first.0].value.outer();
        let mut width = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: self.nodes[first.0].value.shape().to_vec(),
                    right: s.to_vec(),
                });
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(outer * width);
        for r in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let w = t.last_dim();
                data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let t = Tensor::new(shape, data).unwrap();
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(t, Op::Concat(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        if start > end || end > w || t.shape().is_empty() {
            return Err(TensorError::Invalid {
                op: "slice",
                message: format!("range {start}..{end} out of bounds for {:?}", t.shape()),
            });
        }
        let outer = t.outer();
        let mut data = Vec::with_capacity(outer * (end - start));
        for r in 0..outer {
            data.extend_from_slice(&t.data()[r * w + start..r * w + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let t = Tensor::new(shape, data).unwrap();
        let ng = self.ng(a.0);
        Ok(self.push(t, Op::Slice(a.0, start), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.len().max(1) as f64;
        let s = t.data().iter().sum::<f64>() / n;
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::MeanAll(a.0), ng)
    }

    fn reduce_rows(&self, a: Var) -> (Vec<f64>, usize, usize) {
        let t = &self.nodes[a.0].value;
        let (outer, w) = (t.outer(), t.last_dim());
        let mut out = vec![0.0; w];
        for r in 0..outer {
            for (o, v) in out.iter_mut().zip(&t.data()[r * w..(r + 1) * w]) {
                *o += v;
            }
        }
        (out, outer, w)
    }

    /// Sum over all axes but the last: `[r, c] → [c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (out, _, _) = self.reduce_rows(a);
        let ng = self.ng(a.0);
        self.push(Tensor::vector(out), Op::SumRows(a.0), ng)
    }

    /// Mean over all axes but the last: `[r, c] → [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (mut out, outer, _) = self.reduce_rows(a);
        let n = outer.max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let ng = self.ng(a.0);
        self.push(Tensor::vector(out), Op::MeanRows(a.0), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(a.0);
        self.push(t, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    /// Natural log of `max(x, LOG_FLOOR)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a.0))
    }

    /// `x^p`; for fractional `p` the base is floored at `LOG_FLOOR`.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let integral = p.fract() == 0.0;
        self.unary(
            a,
            move |x| {
                if integral {
                    x.powf(p)
                } else {
                    x.max(LOG_FLOOR).powf(p)
                }
            },
            Op::Powf(a.0, p),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(a.0);
        self.push(t, Op::Softmax(a.0), ng)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let w = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(w.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        let ng = self.ng(a.0);
        self.push(t, Op::LogSoftmax(a.0), ng)
    }

    /// Row lookup into a `[rows, dim]` table: `→ [indices.len(), dim]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[table.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather",
                message: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Invalid {
                    op: "gather",
                    message: format!("index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![indices.len(), dim], data).unwrap();
        let ng = self.ng(table.0);
        Ok(self.push(out, Op::Gather(table.0, indices.to_vec()), ng))
    }

    /// Sparse-by-dense product `S · X` with `X: [S.cols, width]`.
    pub fn spmm(&mut self, s: SparseRows, x: Var) -> Result<Var, TensorError> {
        let t = &self.nodes[x.0].value;
        if t.shape().len() != 2 || t.shape()[0] != s.n_cols() {
            return Err(TensorError::ShapeMismatch {
                op: "spmm",
                left: vec![s.n_rows(), s.n_cols()],
                right: t.shape().to_vec(),
            });
        }
        let w = t.shape()[1];
        let data = s.apply(t.data(), w);
        let out = Tensor::new(vec![s.n_rows(), w], data).unwrap();
        let ng = self.ng(x.0);
        Ok(self.push(out, Op::SpMM(Box::new(s), x.0), ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = self.nodes.get(loss.0).ok_or(TensorError::UnknownVar(loss.0))?;
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(root.value.shape(), 1.0));
        let mut params = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let gd = g.data();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Param(id) => {
                    params.insert(*id, g.clone());
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b, bc) => {
                    self.acc(&mut grads, *a, gd.to_vec());
                    let bl = self.nodes[*b].value.len();
                    self.acc(&mut grads, *b, bc.reduce(gd, bl));
                }
                Op::Sub(a, b, bc) => {
                    self.acc(&mut grads, *a, gd.to_vec());
                    let bl = self.nodes[*b].value.len();
                    let neg: Vec<f64> = bc.reduce(gd, bl).into_iter().map(|v| -v).collect();
                    self.acc(&mut grads, *b, neg);
                }
                Op::Mul(a, b, bc) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.ng(*a) {
                        let ga = gd
                            .iter()
                            .enumerate()
                            .map(|(k, v)| v * tb.data()[bc.index(k)])
                            .collect();
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let prod: Vec<f64> =
                            gd.iter().zip(ta.data()).map(|(v, x)| v * x).collect();
                        self.acc(&mut grads, *b, bc.reduce(&prod, tb.len()));
                    }
                }
                Op::Scale(a, s) => {
                    self.acc(&mut grads, *a, gd.iter().map(|v| v * s).collect());
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.ng(*a) {
                        // dA = G · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, gd, false, tb.data(), true, &mut ga, 0.0);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        // dB = Aᵀ · G
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, gd, false, &mut gb, 0.0);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Concat(parts) => {
                    let outer = g.outer();
                    let width = g.last_dim();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.last_dim();
                        if self.ng(p) {
                            let mut gp = Vec::with_capacity(outer * w);
                            for r in 0..outer {
                                gp.extend_from_slice(&gd[r * width + col..r * width + col + w]);
                            }
                            self.acc(&mut grads, p, gp);
                        }
                        col += w;
                    }
                }
                Op::Slice(a, start) => {
                    let ta = &self.nodes[*a].value;
                    let (outer, w) = (ta.outer(), ta.last_dim());
                    let sw = g.last_dim();
                    let mut ga = vec![0.0; ta.len()];
                    for r in 0..outer {
                        ga[r * w + start..r * w + start + sw]
                            .copy_from_slice(&gd[r * sw..(r + 1) * sw]);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].value.len();
                    self.acc(&mut grads, *a, vec![gd[0]; n]);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[*a].value.len();
                    self.acc(&mut grads, *a, vec![gd[0] / n.max(1) as f64; n]);
                }
                Op::SumRows(a) | Op::MeanRows(a) => {
                    let ta = &self.nodes[*a].value;
                    let (outer, w) = (ta.outer(), ta.last_dim());
                    let s = if matches!(node.op, Op::MeanRows(_)) {
                        1.0 / outer.max(1) as f64
                    } else {
                        1.0
                    };
                    let mut ga = Vec::with_capacity(ta.len());
                    for _ in 0..outer {
                        ga.extend(gd.iter().take(w).map(|v| v * s));
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = gd.iter().zip(y).map(|(v, y)| v * (1.0 - y * y)).collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = gd.iter().zip(y).map(|(v, y)| v * y * (1.0 - y)).collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    let ga = gd
                        .iter()
                        .zip(x)
                        .map(|(v, x)| if *x > 0.0 { *v } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let ga = gd.iter().zip(y).map(|(v, y)| v * y).collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let x = self.nodes[*a].value.data();
                    let ga = gd
                        .iter()
                        .zip(x)
                        .map(|(v, x)| if *x > LOG_FLOOR { v / x } else { 0.0 })
                        .collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Powf(a, p) => {
                    let x = self.nodes[*a].value.data();
                    let integral = p.fract() == 0.0;
                    let ga = gd
                        .iter()
                        .zip(x)
                        .map(|(v, &x)| {
                            if integral || x > LOG_FLOOR {
                                v * p * x.powf(p - 1.0)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let w = node.value.last_dim().max(1);
                    let mut ga = vec![0.0; y.len()];
                    for ((gr, yr), out) in gd.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                            *o = y * (g - dot);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.data();
                    let w = node.value.last_dim().max(1);
                    let mut ga = vec![0.0; y.len()];
                    for ((gr, yr), out) in gd.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                            *o = g - y.exp() * total;
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gather(table, indices) => {
                    let tt = &self.nodes[*table].value;
                    let dim = tt.shape()[1];
                    let mut ga = vec![0.0; tt.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..dim {
                            ga[i * dim + c] += gd[r * dim + c];
                        }
                    }
                    self.acc(&mut grads, *table, ga);
                }
                Op::SpMM(s, x) => {
                    let w = g.last_dim();
                    self.acc(&mut grads, *x, s.apply_transpose(gd, w));
                }
            }
        }

        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], i: usize, g: Vec<f64>) {
        if !self.nodes[i].needs_grad {
            return;
        }
        match &mut grads[i] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot => {
                *slot = Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).unwrap());
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
