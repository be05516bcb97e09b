mod common;

use graphae::blocks::{
    BatchNorm, BnStats, DecoderKind, EncoderKind, Gru, LossKind, Mlp, PropertyDecoder, PropertyEncoder, PropertySpec,
    BN_EPS,
};
use graphae::dataset::{PackedValue, PropertyCodec, END, FIRST_CHAR};
use graphae::schema::PropertyType;
use graphae::tensor::{ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn spec(kind: PropertyType, encoder: EncoderKind, decoder: DecoderKind, loss: LossKind) -> PropertySpec {
    PropertySpec {
        name: "p".into(),
        kind,
        encoder,
        decoder,
        loss,
        weight: 1.0,
        hidden_size: 128,
        encoding_size: 128,
        embedding_size: 32,
    }
}

fn codec(kind: PropertyType) -> PropertyCodec {
    PropertyCodec {
        name: "p".into(),
        kind,
        categories: vec!["clerk".into(), "smith".into()],
        characters: "abc".chars().collect(),
        mean: 0.0,
        std: 1.0,
        dim: 1,
        max_len: 6,
    }
}

#[test]
fn single_affine_with_identity_weights_is_identity() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "m", &[3, 3], &mut rng());
    *store.get_mut(mlp.layers[0].weight) = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![0.5, -2.0, 7.0]).unwrap());
    let y = mlp.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -2.0, 7.0]);
}

#[test]
fn scalar_encoder_output_size() {
    let mut store = ParamStore::new();
    let s = spec(PropertyType::Scalar, EncoderKind::Mlp, DecoderKind::Mlp, LossKind::Mse);
    let enc = PropertyEncoder::new(&mut store, &s, &codec(PropertyType::Scalar), &mut rng());
    let mut tape = Tape::new();
    let y = enc.encode(&mut tape, &store, &[&PackedValue::Scalar(0.3)]).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 128]);
}

fn text_encoder() -> (ParamStore, PropertyEncoder) {
    let mut store = ParamStore::new();
    let s = spec(PropertyType::Text, EncoderKind::EmbedGru, DecoderKind::Gru, LossKind::Kld);
    let enc = PropertyEncoder::new(&mut store, &s, &codec(PropertyType::Text), &mut rng());
    (store, enc)
}

#[test]
fn empty_text_encodes_to_zero_state() {
    let (store, enc) = text_encoder();
    let mut tape = Tape::new();
    let y = enc.encode(&mut tape, &store, &[&PackedValue::Sequence(vec![])]).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 128]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn text_encoding_has_fixed_length() {
    let (store, enc) = text_encoder();
    let seqs: Vec<PackedValue> = (0..5).map(|n| PackedValue::Sequence(vec![FIRST_CHAR; n])).collect();
    let refs: Vec<&PackedValue> = seqs.iter().collect();
    let mut tape = Tape::new();
    let y = enc.encode(&mut tape, &store, &refs).unwrap();
    assert_eq!(tape.value(y).shape(), &[5, 128]);
    // Rows stop at their own length: the 2-symbol row equals a lone 2-symbol encoding.
    let mut tape2 = Tape::new();
    let lone = enc.encode(&mut tape2, &store, &[&seqs[2]]).unwrap();
    assert_eq!(tape.value(y).row(2), tape2.value(lone).row(0));
}

#[test]
fn gru_matches_hand_evaluated_two_unit_toy() {
    let mut store = ParamStore::new();
    let gru = Gru::new(&mut store, "g", 1, 2, &mut rng());
    let set = |store: &mut ParamStore, id, shape: Vec<usize>, v: Vec<f64>| *store.get_mut(id) = Tensor::new(shape, v).unwrap();
    // Gate columns: z0 z1 r0 r1 h0 h1.
    set(&mut store, gru.w_x, vec![1, 6], vec![0.5, -0.5, 0.3, 0.1, 1.0, 2.0]);
    set(&mut store, gru.bias, vec![6], vec![0.1, 0.0, 0.0, 0.2, -0.3, 0.0]);
    set(&mut store, gru.u_zr, vec![2, 4], vec![0.2, 0.0, 1.0, 0.0, 0.0, 0.4, 0.0, 1.0]);
    set(&mut store, gru.u_h, vec![2, 2], vec![0.5, -1.0, 1.0, 0.5]);
    let mut tape = Tape::new();
    let h0 = tape.constant(Tensor::zeros(&[1, 2]));
    let x1 = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
    let h1 = gru.step(&mut tape, &store, x1, h0).unwrap();
    let x2 = tape.constant(Tensor::new(vec![1, 1], vec![-0.5]).unwrap());
    let h2 = gru.step(&mut tape, &store, x2, h1).unwrap();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-14);
    assert!(close(tape.value(h1).data(), &[0.39021386657536267, 0.3639596173216816]), "{:?}", tape.value(h1));
    assert!(close(tape.value(h2).data(), &[-0.006379122008410176, -0.3329261475983678]), "{:?}", tape.value(h2));
}

fn bn_forward(x: &[f64], rows: usize, training: bool, stats: &BnStats, shift: f64) -> Vec<f64> {
    let dim = x.len() / rows;
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", dim);
    *store.get_mut(bn.beta) = Tensor::filled(&[dim], shift);
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![rows, dim], x.to_vec()).unwrap());
    let (y, _) = bn.forward(&mut tape, &store, stats, v, training).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn batchnorm_constant_column_maps_to_shift() {
    let y = bn_forward(&[4.0, 4.0, 4.0], 3, true, &BnStats::new(1), 0.7);
    assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn batchnorm_two_point_batch() {
    let y = bn_forward(&[-1.0, 1.0], 2, true, &BnStats::new(1), 0.0);
    let s = 1.0 / (1.0 + BN_EPS).sqrt();
    assert!((y[0] + s).abs() < 1e-15 && (y[1] - s).abs() < 1e-15);
}

#[test]
fn batchnorm_eval_ignores_other_rows_and_single_row_training_uses_running_stats() {
    let stats = BnStats {
        mean: vec![1.0, -1.0],
        var: vec![4.0, 0.25],
    };
    let alone = bn_forward(&[3.0, 0.0], 1, false, &stats, 0.0);
    let batch = bn_forward(&[3.0, 0.0, 100.0, -7.0], 2, false, &stats, 0.0);
    assert_eq!(alone, batch[..2]);
    assert_eq!(bn_forward(&[3.0, 0.0], 1, true, &stats, 0.0), alone);
}

#[test]
fn running_statistics_update() {
    let mut s = BnStats::new(1);
    s.update(&[2.0], &[0.5], 2);
    // Unbiased batch variance 0.5 · 2 / 1 = 1.
    assert!((s.mean[0] - 0.2).abs() < 1e-15);
    assert!((s.var[0] - (0.9 + 0.1)).abs() < 1e-15);
}

fn decoder(kind: PropertyType, dec: DecoderKind, loss: LossKind, input: usize) -> (ParamStore, PropertyDecoder) {
    let mut store = ParamStore::new();
    let mut s = spec(kind, EncoderKind::Mlp, dec, loss);
    s.hidden_size = 8;
    s.embedding_size = 4;
    let d = PropertyDecoder::new(&mut store, "d", &s, &codec(kind), input, &mut rng());
    (store, d)
}

fn loss_of(store: &ParamStore, d: &PropertyDecoder, x: Tensor, targets: &[PackedValue]) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let refs: Vec<&PackedValue> = targets.iter().collect();
    let l = d.loss_rows(&mut tape, store, xv, &refs).unwrap().unwrap();
    tape.value(l).data().to_vec()
}

/// Zeroes every parameter and sets the final bias.
fn constant_output(store: &mut ParamStore, last_bias: Vec<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in &ids {
        let shape = store.get(*id).shape().to_vec();
        *store.get_mut(*id) = Tensor::zeros(&shape);
    }
    let n = last_bias.len();
    *store.get_mut(*ids.last().unwrap()) = Tensor::new(vec![n], last_bias).unwrap();
}

#[test]
fn scalar_mse_of_decoded_two_against_zero_is_four() {
    let (mut store, d) = decoder(PropertyType::Scalar, DecoderKind::Mlp, LossKind::Mse, 3);
    constant_output(&mut store, vec![2.0]);
    let l = loss_of(&store, &d, Tensor::filled(&[1, 3], 0.4), &[PackedValue::Scalar(0.0)]);
    assert_eq!(l, [4.0]);
}

#[test]
fn confident_correct_categorical_has_zero_loss() {
    let (mut store, d) = decoder(PropertyType::Categorical, DecoderKind::Mlp, LossKind::Kld, 3);
    constant_output(&mut store, vec![0.0, 60.0, 0.0]);
    let l = loss_of(&store, &d, Tensor::filled(&[1, 3], 0.4), &[PackedValue::Index(1)]);
    assert!(l[0] >= 0.0 && l[0] < 1e-20);
    let wrong = loss_of(&store, &d, Tensor::filled(&[1, 3], 0.4), &[PackedValue::Index(0)]);
    assert!((wrong[0] - 60.0).abs() < 1e-9);
}

#[test]
fn categorical_reconstruction_is_argmax_over_known_values() {
    let (mut store, d) = decoder(PropertyType::Categorical, DecoderKind::Mlp, LossKind::Kld, 2);
    constant_output(&mut store, vec![0.9f64.ln(), 0.1f64.ln(), 5.0]);
    let out = d.reconstruct(&store, &Tensor::zeros(&[1, 2]), &codec(PropertyType::Categorical)).unwrap();
    assert_eq!(out, [PackedValue::Index(0)]);
    assert_eq!(codec(PropertyType::Categorical).unpack(&out[0]).unwrap(), "clerk");
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[test]
fn text_loss_is_sum_of_positionwise_cross_entropies() {
    let (store, d) = decoder(PropertyType::Text, DecoderKind::Gru, LossKind::Kld, 3);
    let x = Tensor::new(vec![1, 3], vec![0.3, -0.2, 0.8]).unwrap();
    let target = vec![FIRST_CHAR + 1, FIRST_CHAR];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = d.teacher_forced(&mut tape, &store, xv, &[&target]).unwrap();
    // Two characters plus the end symbol.
    assert_eq!(logits.len(), 3);
    let gold = [target[0], target[1], END];
    let mut hand = 0.0;
    for (l, g) in logits.iter().zip(gold) {
        let p: f64 = log_softmax(tape.value(*l).row(0)).iter().map(|v| v.exp()).sum();
        assert!((p - 1.0).abs() < 1e-9);
        hand -= log_softmax(tape.value(*l).row(0))[g];
    }
    let l = loss_of(&store, &d, x, &[PackedValue::Sequence(target)]);
    assert!((l[0] - hand).abs() < 1e-12);
}

#[test]
fn greedy_decoding_respects_zero_max_length() {
    let (store, d) = decoder(PropertyType::Text, DecoderKind::Gru, LossKind::Kld, 3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(d.greedy(&mut tape, &store, x, 0).unwrap(), vec![Vec::<usize>::new(); 2]);
}

#[test]
fn trained_toy_decoder_stops_at_end_symbol() {
    use graphae::tensor::{Adam, AdamConfig};
    let (mut store, d) = decoder(PropertyType::Text, DecoderKind::Gru, LossKind::Kld, 2);
    let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
    let target = PackedValue::Sequence(vec![FIRST_CHAR, FIRST_CHAR + 2]);
    let mut adam = Adam::new(&store, AdamConfig { learning_rate: 0.05, ..Default::default() });
    for _ in 0..200 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = d.loss_rows(&mut tape, &store, xv, &[&target]).unwrap().unwrap();
        let s = tape.sum_all(l);
        let g = tape.backward(s).unwrap();
        adam.step(&mut store, &g);
    }
    let out = d.reconstruct(&store, &x, &codec(PropertyType::Text)).unwrap();
    assert_eq!(out, [target]);
    assert_eq!(codec(PropertyType::Text).unpack(&out[0]).unwrap(), "ac");
}

#[test]
fn null_encoder_and_decoder() {
    let mut store = ParamStore::new();
    let mut s = spec(PropertyType::Categorical, EncoderKind::Null, DecoderKind::Null, LossKind::Kld);
    s.encoding_size = 7;
    let enc = PropertyEncoder::new(&mut store, &s, &codec(PropertyType::Categorical), &mut rng());
    let dec = PropertyDecoder::new(&mut store, "d", &s, &codec(PropertyType::Categorical), 4, &mut rng());
    assert!(store.is_empty());
    let mut tape = Tape::new();
    let y = enc.encode(&mut tape, &store, &[&PackedValue::Index(1), &PackedValue::Index(0)]).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 7]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(dec.loss_rows(&mut tape, &store, x, &[&PackedValue::Index(0)]).unwrap().is_none());
}

#[test]
fn losses_are_nonnegative_and_vanish_on_exact_mse_reconstruction() {
    for kind in [PropertyType::Scalar, PropertyType::Date] {
        let (mut store, d) = decoder(kind, DecoderKind::Mlp, LossKind::Mse, 2);
        constant_output(&mut store, vec![-1.25]);
        let l = loss_of(&store, &d, Tensor::zeros(&[2, 2]), &[PackedValue::Scalar(-1.25), PackedValue::Scalar(0.0)]);
        assert_eq!(l[0], 0.0);
        assert!(l[1] > 0.0);
    }
}

#[test]
fn gradient_suite_small() {
    for line in common::gradsuite::gradient_suite(4).unwrap() {
        assert!(line.max_rel_error < 1e-4, "{}: {} ({})", line.name, line.max_rel_error, line.worst);
    }
}
