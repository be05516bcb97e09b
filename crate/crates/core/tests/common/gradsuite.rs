//! Finite-difference checks of every block and loss on random fixtures.

use graphae::blocks::{
    Autoencoder, BatchNorm, BnStats, DecoderKind, EncoderKind, Embedding, Gru, LossKind, Mlp, PropertyDecoder,
    PropertySpec, Projector,
};
use graphae::dataset::{PackedValue, PropertyCodec};
use graphae::schema::PropertyType;
use graphae::tensor::gradcheck::check_gradients;
use graphae::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct SuiteLine {
    pub name: &'static str,
    pub fixtures: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Redraws every parameter so biases are not exactly zero at a relu kink.
fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform(rng, &shape);
    }
}

/// `Σ v ⊙ r` for a fixed random `r`, so no gradient cancels by symmetry.
fn probe(tape: &mut Tape, v: Var, r: &Tensor) -> Result<Var, TensorError> {
    let r = tape.constant(r.clone());
    let p = tape.mul(v, r)?;
    Ok(tape.sum_all(p))
}

fn run(
    name: &'static str,
    fixtures: usize,
    seed: u64,
    mut one: impl FnMut(&mut ChaCha8Rng) -> Result<(f64, String), TensorError>,
) -> Result<SuiteLine, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut line = SuiteLine {
        name,
        fixtures: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for _ in 0..fixtures {
        let (e, w) = one(&mut rng)?;
        line.fixtures += 1;
        if e >= line.max_rel_error {
            line.max_rel_error = e;
            line.worst = w;
        }
    }
    Ok(line)
}

fn spec(name: &str, kind: PropertyType, decoder: DecoderKind, loss: LossKind) -> PropertySpec {
    PropertySpec {
        name: name.to_string(),
        kind,
        encoder: EncoderKind::Mlp,
        decoder,
        loss,
        weight: 1.0,
        hidden_size: 6,
        encoding_size: 4,
        embedding_size: 3,
    }
}

fn codec(kind: PropertyType, categories: usize, dim: usize) -> PropertyCodec {
    PropertyCodec {
        name: "p".into(),
        kind,
        categories: (0..categories).map(|i| format!("c{i}")).collect(),
        characters: if kind == PropertyType::Text { "abcd".chars().collect() } else { Vec::new() },
        mean: 0.0,
        std: 1.0,
        dim,
        max_len: 5,
    }
}

fn random_target(rng: &mut ChaCha8Rng, c: &PropertyCodec) -> PackedValue {
    match c.kind {
        PropertyType::Categorical => PackedValue::Index(rng.gen_range(0..c.vocab_size())),
        PropertyType::Distribution => {
            let raw: Vec<f64> = (0..c.dim).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            PackedValue::Vector(raw.into_iter().map(|x| x / s).collect())
        }
        PropertyType::Place => PackedValue::Vector(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
        PropertyType::Text => {
            let len = rng.gen_range(0..=c.max_len);
            PackedValue::Sequence((0..len).map(|_| rng.gen_range(3..c.vocab_size())).collect())
        }
        _ => PackedValue::Scalar(rng.gen_range(-2.0..2.0)),
    }
}

fn loss_line(
    name: &'static str,
    fixtures: usize,
    seed: u64,
    kind: PropertyType,
    decoder: DecoderKind,
    loss: LossKind,
) -> Result<SuiteLine, TensorError> {
    run(name, fixtures, seed, |rng| {
        let dim = if kind == PropertyType::Place { 2 } else { rng.gen_range(2..5) };
        let c = codec(kind, rng.gen_range(2..5), dim);
        let mut store = ParamStore::new();
        let input = rng.gen_range(2..5);
        let dec = PropertyDecoder::new(&mut store, "d", &spec("p", kind, decoder, loss), &c, input, rng);
        let rows = rng.gen_range(1..4);
        let targets: Vec<PackedValue> = (0..rows).map(|_| random_target(rng, &c)).collect();
        let x = uniform(rng, &[rows, input]);
        let r = check_gradients(&mut store, &[x], |tape, store, v| {
            let refs: Vec<&PackedValue> = targets.iter().collect();
            let per_row = dec.loss_rows(tape, store, v[0], &refs)?.expect("decoder is not null");
            Ok(tape.sum_all(per_row))
        })?;
        Ok((r.max_rel_error, r.worst))
    })
}

/// One line per block and per loss. Each line covers `fixtures` random
/// fixtures with freshly drawn sizes, parameters and inputs.
pub fn gradient_suite(fixtures: usize) -> Result<Vec<SuiteLine>, TensorError> {
    let mut out = Vec::new();
    out.push(run("mlp", fixtures, 1, |rng| {
        let depth = rng.gen_range(1..4);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..6)).collect();
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &sizes, rng);
        scramble(&mut store, rng);
        let rows = rng.gen_range(1..4);
        let x = uniform(rng, &[rows, sizes[0]]);
        let r = uniform(rng, &[rows, sizes[depth]]);
        let rep = check_gradients(&mut store, &[x], |tape, store, v| {
            let y = mlp.forward(tape, store, v[0])?;
            probe(tape, y, &r)
        })?;
        Ok((rep.max_rel_error, rep.worst))
    })?);
    out.push(run("embedding", fixtures, 2, |rng| {
        let (rows, dim) = (rng.gen_range(2..6), rng.gen_range(1..5));
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, "e", rows, dim, rng);
        let idx: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..rows)).collect();
        let r = uniform(rng, &[idx.len(), dim]);
        let rep = check_gradients(&mut store, &[], |tape, store, _| {
            let y = emb.forward(tape, store, &idx)?;
            probe(tape, y, &r)
        })?;
        Ok((rep.max_rel_error, rep.worst))
    })?);
    out.push(run("gru step", fixtures, 3, |rng| {
        let (input, hidden, rows) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3));
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "g", input, hidden, rng);
        let x = uniform(rng, &[rows, input]);
        let h = uniform(rng, &[rows, hidden]).into_data().into_iter().map(|v| v * 0.4).collect();
        let h = Tensor::new(vec![rows, hidden], h).unwrap();
        let r = uniform(rng, &[rows, hidden]);
        let rep = check_gradients(&mut store, &[x, h], |tape, store, v| {
            let y = gru.step(tape, store, v[0], v[1])?;
            probe(tape, y, &r)
        })?;
        Ok((rep.max_rel_error, rep.worst))
    })?);
    out.push(run("batch-norm", fixtures, 4, |rng| {
        let (dim, rows) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", dim);
        *store.get_mut(bn.gamma) = uniform(rng, &[dim]);
        *store.get_mut(bn.beta) = uniform(rng, &[dim]);
        let stats = BnStats::new(dim);
        let x = uniform(rng, &[rows, dim]);
        let r = uniform(rng, &[rows, dim]);
        let rep = check_gradients(&mut store, &[x], |tape, store, v| {
            let (y, _) = bn.forward(tape, store, &stats, v[0], true)?;
            probe(tape, y, &r)
        })?;
        Ok((rep.max_rel_error, rep.worst))
    })?);
    out.push(run("autoencoder", fixtures, 5, |rng| {
        let (input, hidden, b, output) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let ae = Autoencoder::new(&mut store, "ae", input, hidden, b, output, rng);
        scramble(&mut store, rng);
        let rows = rng.gen_range(1..4);
        let x = uniform(rng, &[rows, input]);
        let r1 = uniform(rng, &[rows, output]);
        let r2 = uniform(rng, &[rows, b]);
        let rep = check_gradients(&mut store, &[x], |tape, store, v| {
            let (y, bott) = ae.forward(tape, store, v[0])?;
            let a = probe(tape, y, &r1)?;
            let c = probe(tape, bott, &r2)?;
            tape.add(a, c)
        })?;
        Ok((rep.max_rel_error, rep.worst))
    })?);
    out.push(run("projector", fixtures, 6, |rng| {
        let (b, s, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(2..6));
        let mut store = ParamStore::new();
        let proj = Projector::new(&mut store, "p", b, s, rng);
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..rng.gen_range(0..3)).map(|_| rng.gen_range(0..n)).collect())
            .collect();
        let x = uniform(rng, &[n, b]);
        let r = uniform(rng, &[n, s]);
        let rep = check_gradients(&mut store, &[x], |tape, store, v| {
            let y = proj.forward(tape, store, v[0], &neighbors)?;
            probe(tape, y, &r)
        })?;
        Ok((rep.max_rel_error, rep.worst))
    })?);
    use DecoderKind::{Gru as G, Mlp as M};
    use LossKind::{Kld, Mse};
    use PropertyType::*;
    out.push(loss_line("loss scalar MSE", fixtures, 7, Scalar, M, Mse)?);
    out.push(loss_line("loss date MSE", fixtures, 8, Date, M, Mse)?);
    out.push(loss_line("loss place MSE", fixtures, 9, Place, M, Mse)?);
    out.push(loss_line("loss categorical KLD", fixtures, 10, Categorical, M, Kld)?);
    out.push(loss_line("loss categorical MSE", fixtures, 11, Categorical, M, Mse)?);
    out.push(loss_line("loss distribution KLD", fixtures, 12, Distribution, M, Kld)?);
    out.push(loss_line("loss distribution MSE", fixtures, 13, Distribution, M, Mse)?);
    out.push(loss_line("loss text GRU KLD", fixtures, 14, Text, G, Kld)?);
    Ok(out)
}
