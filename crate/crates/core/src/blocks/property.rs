use std::fmt;

use rand::Rng;
use serde_json::Value;

use super::{Embedding, Gru, Linear, Mlp};
use crate::dataset::{PackedValue, PropertyCodec, END, FIRST_CHAR, START};
use crate::schema::{PropertyDef, PropertyType};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Mlp,
    Embed,
    EmbedGru,
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Mlp,
    Gru,
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Kld,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MLP" => Some(EncoderKind::Mlp),
            "Embed" => Some(EncoderKind::Embed),
            "EmbedGRU" => Some(EncoderKind::EmbedGru),
            "NullEncoder" | "Null" => Some(EncoderKind::Null),
            _ => None,
        }
    }
}

impl DecoderKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MLP" => Some(DecoderKind::Mlp),
            "GRU" => Some(DecoderKind::Gru),
            "NullDecoder" | "Null" => Some(DecoderKind::Null),
            _ => None,
        }
    }
}

impl LossKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "MSE" => Some(LossKind::Mse),
            "KLD" => Some(LossKind::Kld),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "MSE",
            LossKind::Kld => "KLD",
        })
    }
}

/// Architecture choices and sizes for one property, read from its `meta`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertySpec {
    pub name: String,
    pub kind: PropertyType,
    pub encoder: EncoderKind,
    pub decoder: DecoderKind,
    pub loss: LossKind,
    pub weight: f64,
    pub hidden_size: usize,
    pub encoding_size: usize,
    pub embedding_size: usize,
}

impl PropertySpec {
    pub fn from_def(def: &PropertyDef) -> Result<PropertySpec, String> {
        let meta = &def.meta;
        let name = |key: &str| -> Result<&str, String> {
            meta.get(key)
                .and_then(Value::as_str)
                .ok_or_else(|| format!("property {:?} has no {key} in meta", def.name))
        };
        let size = |key: &str| -> Result<Option<usize>, String> {
            match meta.get(key) {
                None => Ok(None),
                Some(v) => v
                    .as_u64()
                    .map(|n| Some(n as usize))
                    .ok_or_else(|| format!("property {:?}: {key} must be a non-negative integer", def.name)),
            }
        };
        let encoder = EncoderKind::parse(name("encoder")?)
            .ok_or_else(|| format!("property {:?}: unknown encoder {:?}", def.name, meta["encoder"]))?;
        let decoder = DecoderKind::parse(name("decoder")?)
            .ok_or_else(|| format!("property {:?}: unknown decoder {:?}", def.name, meta["decoder"]))?;
        let loss = match meta.get("loss").and_then(Value::as_str) {
            Some(s) => LossKind::parse(s).ok_or_else(|| format!("property {:?}: unknown loss {s:?}", def.name))?,
            None if decoder == DecoderKind::Null => LossKind::Mse,
            None => return Err(format!("property {:?} has no loss in meta", def.name)),
        };
        let weight = match meta.get("weight") {
            None => 1.0,
            Some(w) => w
                .as_f64()
                .filter(|w| *w >= 0.0 && w.is_finite())
                .ok_or_else(|| format!("property {:?}: weight must be a non-negative number", def.name))?,
        };
        let hidden_size = size("hidden_size")?.unwrap_or(128);
        let embedding_size = size("embedding_size")?.unwrap_or(32);
        let encoding_size = match size("encoding_size")? {
            Some(n) => n,
            None => match encoder {
                EncoderKind::Embed => embedding_size,
                EncoderKind::EmbedGru => hidden_size,
                EncoderKind::Null => size("embedding_size")?.unwrap_or(hidden_size),
                EncoderKind::Mlp => hidden_size,
            },
        };
        let spec = PropertySpec {
            name: def.name.clone(),
            kind: def.kind,
            encoder,
            decoder,
            loss,
            weight,
            hidden_size,
            encoding_size,
            embedding_size,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<(), String> {
        use PropertyType as T;
        let numeric = matches!(self.kind, T::Scalar | T::Date | T::Place | T::Distribution);
        let enc_ok = match self.encoder {
            EncoderKind::Null => true,
            EncoderKind::Mlp => numeric,
            EncoderKind::Embed => self.kind == T::Categorical,
            EncoderKind::EmbedGru => self.kind == T::Text,
        };
        let dec_ok = match self.decoder {
            DecoderKind::Null => true,
            DecoderKind::Mlp => numeric || self.kind == T::Categorical,
            DecoderKind::Gru => self.kind == T::Text,
        };
        let loss_ok = self.decoder == DecoderKind::Null
            || match self.loss {
                LossKind::Mse => self.kind != T::Text,
                LossKind::Kld => matches!(self.kind, T::Categorical | T::Text | T::Distribution),
            };
        let image_ok = self.kind != T::Image
            || (self.encoder == EncoderKind::Null && self.decoder == DecoderKind::Null);
        if !(enc_ok && image_ok) {
            return Err(format!("property {:?}: encoder {:?} cannot handle {} values", self.name, self.encoder, self.kind));
        }
        if !(dec_ok && image_ok) {
            return Err(format!("property {:?}: decoder {:?} cannot produce {} values", self.name, self.decoder, self.kind));
        }
        if !loss_ok {
            return Err(format!("property {:?}: loss {} does not apply to {} values", self.name, self.loss, self.kind));
        }
        if self.encoder != EncoderKind::Null && self.encoding_size == 0 {
            return Err(format!("property {:?}: encoding size must be positive", self.name));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum EncoderArch {
    Mlp(Mlp),
    Embed(Embedding),
    EmbedGru(Embedding, Gru),
    Null,
}

/// Maps packed values of one property to fixed-length vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyEncoder {
    arch: EncoderArch,
    output_size: usize,
}

impl PropertyEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, spec: &PropertySpec, codec: &PropertyCodec, rng: &mut R) -> Self {
        let name = format!("encoder.{}", spec.name);
        let (arch, output_size) = match spec.encoder {
            EncoderKind::Mlp => (
                EncoderArch::Mlp(Mlp::new(
                    store,
                    &name,
                    &[codec.width().max(1), spec.hidden_size, spec.encoding_size],
                    rng,
                )),
                spec.encoding_size,
            ),
            EncoderKind::Embed => (
                EncoderArch::Embed(Embedding::new(store, &name, codec.vocab_size(), spec.embedding_size, rng)),
                spec.embedding_size,
            ),
            EncoderKind::EmbedGru => {
                let emb = Embedding::new(store, &format!("{name}.embed"), codec.vocab_size(), spec.embedding_size, rng);
                let gru = Gru::new(store, &format!("{name}.gru"), spec.embedding_size, spec.hidden_size, rng);
                (EncoderArch::EmbedGru(emb, gru), spec.hidden_size)
            }
            EncoderKind::Null => (EncoderArch::Null, spec.encoding_size),
        };
        PropertyEncoder { arch, output_size }
    }

    /// `F_p`.
    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn is_null(&self) -> bool {
        self.arch == EncoderArch::Null
    }

    /// Encodes `values` into `[values.len(), F_p]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, values: &[&PackedValue]) -> Result<Var, TensorError> {
        let n = values.len();
        match &self.arch {
            EncoderArch::Null => Ok(tape.constant(Tensor::zeros(&[n, self.output_size]))),
            EncoderArch::Mlp(mlp) => {
                let x = tape.constant(dense_rows(values, mlp.input_size())?);
                mlp.forward(tape, store, x)
            }
            EncoderArch::Embed(emb) => {
                let idx = values.iter().map(|v| as_index(v)).collect::<Result<Vec<_>, _>>()?;
                emb.forward(tape, store, &idx)
            }
            EncoderArch::EmbedGru(emb, gru) => {
                let seqs = values.iter().map(|v| as_sequence(v)).collect::<Result<Vec<_>, _>>()?;
                let h0 = tape.constant(Tensor::zeros(&[n, gru.hidden]));
                gru.run(tape, store, emb, &seqs, h0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum DecoderArch {
    Mlp(Mlp),
    Gru {
        init: Linear,
        embed: Embedding,
        gru: Gru,
        out: Linear,
    },
    Null,
}

/// Maps an entity's decoder input (`F_ae`) back to one property, with its loss.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyDecoder {
    arch: DecoderArch,
    kind: PropertyType,
    loss: LossKind,
    input_size: usize,
    max_len: usize,
}

impl PropertyDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &PropertySpec,
        codec: &PropertyCodec,
        input_size: usize,
        rng: &mut R,
    ) -> Self {
        let name = format!("{prefix}.{}", spec.name);
        let arch = match spec.decoder {
            DecoderKind::Null => DecoderArch::Null,
            DecoderKind::Mlp => {
                let out = match spec.kind {
                    PropertyType::Categorical => codec.vocab_size(),
                    _ => codec.width().max(1),
                };
                DecoderArch::Mlp(Mlp::new(store, &name, &[input_size, spec.hidden_size, out], rng))
            }
            DecoderKind::Gru => DecoderArch::Gru {
                init: Linear::new(store, &format!("{name}.init"), input_size, spec.hidden_size, rng),
                embed: Embedding::new(store, &format!("{name}.embed"), codec.vocab_size(), spec.embedding_size, rng),
                gru: Gru::new(store, &format!("{name}.gru"), spec.embedding_size, spec.hidden_size, rng),
                out: Linear::new(store, &format!("{name}.out"), spec.hidden_size, codec.vocab_size(), rng),
            },
        };
        PropertyDecoder {
            arch,
            kind: spec.kind,
            loss: spec.loss,
            input_size,
            max_len: codec.max_len,
        }
    }

    pub fn is_null(&self) -> bool {
        self.arch == DecoderArch::Null
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Decoded representation for MLP decoders: raw output, or the softmax
    /// for categorical and distribution properties.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Option<Var>, TensorError> {
        match &self.arch {
            DecoderArch::Mlp(mlp) => {
                let out = mlp.forward(tape, store, x)?;
                Ok(Some(match self.kind {
                    PropertyType::Categorical | PropertyType::Distribution => tape.softmax(out),
                    _ => out,
                }))
            }
            _ => Ok(None),
        }
    }

    /// Per-row losses `[rows, 1]` of decoding `x` against `targets`.
    /// `None` for Null decoders.
    pub fn loss_rows(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        targets: &[&PackedValue],
    ) -> Result<Option<Var>, TensorError> {
        match &self.arch {
            DecoderArch::Null => Ok(None),
            DecoderArch::Mlp(mlp) => {
                let out = mlp.forward(tape, store, x)?;
                let width = mlp.output_size();
                let loss = match (self.kind, self.loss) {
                    (PropertyType::Categorical, LossKind::Kld) => {
                        let ls = tape.log_softmax(out);
                        let onehot = tape.constant(one_hot(targets, width)?);
                        let picked = tape.mul(ls, onehot)?;
                        let s = rows_sum(tape, picked)?;
                        tape.scale(s, -1.0)
                    }
                    (PropertyType::Categorical, LossKind::Mse) => {
                        let p = tape.softmax(out);
                        let t = tape.constant(one_hot(targets, width)?);
                        mse_rows(tape, p, t)?
                    }
                    (PropertyType::Distribution, LossKind::Kld) => {
                        let t = dense_rows(targets, width)?;
                        let entropy: Vec<f64> = (0..t.outer())
                            .map(|r| t.row(r).iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum())
                            .collect();
                        let ls = tape.log_softmax(out);
                        let t = tape.constant(t);
                        let cross = tape.mul(ls, t)?;
                        let cross = rows_sum(tape, cross)?;
                        let neg_entropy = tape.constant(row_mask(entropy));
                        tape.sub(neg_entropy, cross)?
                    }
                    (PropertyType::Distribution, LossKind::Mse) => {
                        let p = tape.softmax(out);
                        let t = tape.constant(dense_rows(targets, width)?);
                        mse_rows(tape, p, t)?
                    }
                    _ => {
                        let t = tape.constant(dense_rows(targets, width)?);
                        mse_rows(tape, out, t)?
                    }
                };
                Ok(Some(loss))
            }
            DecoderArch::Gru { embed, .. } => {
                let seqs = targets.iter().map(|v| as_sequence(v)).collect::<Result<Vec<_>, _>>()?;
                let vocab = embed.rows;
                let logits = self.teacher_forced(tape, store, x, &seqs)?;
                let mut total: Option<Var> = None;
                for (t, l) in logits.into_iter().enumerate() {
                    let gold: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(END)).collect();
                    let ls = tape.log_softmax(l);
                    let onehot = tape.constant(one_hot_indices(&gold, vocab)?);
                    let picked = tape.mul(ls, onehot)?;
                    let ce = rows_sum(tape, picked)?;
                    let live: Vec<f64> = seqs.iter().map(|s| if t <= s.len() { -1.0 } else { 0.0 }).collect();
                    let live = tape.constant(row_mask(live));
                    let ce = tape.mul(ce, live)?;
                    total = Some(match total {
                        None => ce,
                        Some(acc) => tape.add(acc, ce)?,
                    });
                }
                Ok(Some(match total {
                    Some(t) => t,
                    None => tape.constant(Tensor::zeros(&[targets.len(), 1])),
                }))
            }
        }
    }

    /// Sequence decoders only: logits `[rows, vocab]` for each position of
    /// the longest target plus its end symbol, feeding the gold previous
    /// symbol at every step.
    pub fn teacher_forced(&self, tape: &mut Tape, store: &ParamStore, x: Var, targets: &[&[usize]]) -> Result<Vec<Var>, TensorError> {
        let DecoderArch::Gru { init, embed, gru, out } = &self.arch else {
            return Err(TensorError::Invalid {
                op: "teacher_forced",
                message: "not a sequence decoder".into(),
            });
        };
        let h = init.forward(tape, store, x)?;
        let mut h = tape.tanh(h);
        let steps = targets.iter().map(|s| s.len() + 1).max().unwrap_or(0);
        let mut logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|s| if t == 0 { START } else { s.get(t - 1).copied().unwrap_or(END) })
                .collect();
            let e = embed.forward(tape, store, &prev)?;
            h = gru.step(tape, store, e, h)?;
            logits.push(out.forward(tape, store, h)?);
        }
        Ok(logits)
    }

    /// Most likely packed values for decoder inputs `x: [rows, F_ae]`.
    /// Empty for Null decoders.
    pub fn reconstruct(&self, store: &ParamStore, x: &Tensor, codec: &PropertyCodec) -> Result<Vec<PackedValue>, TensorError> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let rows = x.outer();
        match &self.arch {
            DecoderArch::Null => Ok(Vec::new()),
            DecoderArch::Mlp(_) => {
                let d = self.decode(&mut tape, store, xv)?.unwrap();
                let d = tape.value(d);
                Ok((0..rows)
                    .map(|r| {
                        let row = d.row(r);
                        match self.kind {
                            PropertyType::Categorical => {
                                let known = codec.categories.len().max(1).min(row.len());
                                PackedValue::Index(argmax(&row[..known]))
                            }
                            PropertyType::Scalar | PropertyType::Date => PackedValue::Scalar(row[0]),
                            _ => PackedValue::Vector(row.to_vec()),
                        }
                    })
                    .collect())
            }
            DecoderArch::Gru { .. } => {
                let seqs = self.greedy(&mut tape, store, xv, self.max_len)?;
                Ok(seqs.into_iter().map(PackedValue::Sequence).collect())
            }
        }
    }

    /// Greedy character decoding until the end symbol or `max_len` symbols.
    pub fn greedy(&self, tape: &mut Tape, store: &ParamStore, x: Var, max_len: usize) -> Result<Vec<Vec<usize>>, TensorError> {
        let DecoderArch::Gru { init, embed, gru, out } = &self.arch else {
            return Err(TensorError::Invalid {
                op: "greedy",
                message: "not a sequence decoder".into(),
            });
        };
        let rows = tape.value(x).outer();
        let mut seqs = vec![Vec::new(); rows];
        let mut done = vec![max_len == 0; rows];
        let h = init.forward(tape, store, x)?;
        let mut h = tape.tanh(h);
        let mut prev = vec![START; rows];
        while !done.iter().all(|&d| d) {
            let e = embed.forward(tape, store, &prev)?;
            h = gru.step(tape, store, e, h)?;
            let logits = out.forward(tape, store, h)?;
            let lv = tape.value(logits).clone();
            for r in 0..rows {
                if done[r] {
                    continue;
                }
                let row = lv.row(r);
                // Choose among the end symbol and observed characters.
                let mut best = END;
                for i in FIRST_CHAR..row.len() {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                if best == END {
                    done[r] = true;
                } else {
                    seqs[r].push(best);
                    done[r] = seqs[r].len() >= max_len;
                }
                prev[r] = best;
            }
        }
        Ok(seqs)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn invalid(message: String) -> TensorError {
    TensorError::Invalid { op: "pack", message }
}

fn as_index(v: &PackedValue) -> Result<usize, TensorError> {
    match v {
        PackedValue::Index(i) => Ok(*i),
        other => Err(invalid(format!("expected an index, got {other:?}"))),
    }
}

fn as_sequence(v: &PackedValue) -> Result<&[usize], TensorError> {
    match v {
        PackedValue::Sequence(s) => Ok(s),
        other => Err(invalid(format!("expected a sequence, got {other:?}"))),
    }
}

/// Dense `[rows, width]` from scalar or vector packed values.
fn dense_rows(values: &[&PackedValue], width: usize) -> Result<Tensor, TensorError> {
    let mut data = Vec::with_capacity(values.len() * width);
    for v in values {
        match v {
            PackedValue::Scalar(x) if width == 1 => data.push(*x),
            PackedValue::Vector(xs) if xs.len() == width => data.extend_from_slice(xs),
            other => return Err(invalid(format!("expected {width} numbers, got {other:?}"))),
        }
    }
    Tensor::new(vec![values.len(), width], data)
}

fn one_hot(values: &[&PackedValue], width: usize) -> Result<Tensor, TensorError> {
    let idx = values.iter().map(|v| as_index(v)).collect::<Result<Vec<_>, _>>()?;
    one_hot_indices(&idx, width)
}

fn one_hot_indices(idx: &[usize], width: usize) -> Result<Tensor, TensorError> {
    let mut t = Tensor::zeros(&[idx.len(), width]);
    for (r, &i) in idx.iter().enumerate() {
        if i >= width {
            return Err(invalid(format!("index {i} out of range for {width} classes")));
        }
        t.data_mut()[r * width + i] = 1.0;
    }
    Ok(t)
}

/// Column vector `[n, 1]`.
pub fn row_mask(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(vec![n, 1], values).unwrap()
}

fn rows_sum(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let w = tape.value(x).last_dim();
    let ones = tape.constant(Tensor::filled(&[w, 1], 1.0));
    tape.matmul(x, ones)
}

/// Mean squared error per row: `[n, w], [n, w] → [n, 1]`.
fn mse_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var, TensorError> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let w = tape.value(sq).last_dim().max(1);
    let avg = tape.constant(Tensor::filled(&[w, 1], 1.0 / w as f64));
    tape.matmul(sq, avg)
}
