use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{numeric_gradient, relative_error};
use crate::autodiff::{Graph, Tensor};
use crate::error::Error;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 12,
        max_seq_len: 10,
        head: TaskHead::Classification { classes: 3 },
        seed: 4,
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = Checkpoint::init(&small()).unwrap();
    let b = Checkpoint::init(&small()).unwrap();
    assert_eq!(a, b);
    let c = Checkpoint::init(&ModelConfig { seed: 5, ..small() }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn indivisible_heads_are_rejected() {
    let cfg = ModelConfig { embed_dim: 32, num_heads: 5, ..ModelConfig::default() };
    let err = Checkpoint::init(&cfg).unwrap_err();
    assert!(matches!(err, Error::ModelConfig(ref m) if m.contains("divisible")), "{err}");
}

#[test]
fn forward_structure() {
    let ck = Checkpoint::init(&small()).unwrap();
    let mut g = Graph::new();
    let tr = ck.forward(&mut g, &[3, 4, 5, 6]).unwrap();
    assert_eq!(tr.layers.len(), 2);
    for &z in &tr.layers {
        assert_eq!(g.shape(z), &[1, 8]);
    }
    assert_eq!(g.shape(tr.input), &[4, 8]);
    let p = g.value(tr.probs.unwrap());
    assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn zero_perturbation_reproduces_logits() {
    let ck = Checkpoint::init(&small()).unwrap();
    let batch = vec![vec![2, 7, 9]];
    let mut g = Graph::new();
    let clean = ck.forward_batch(&mut g, &batch, None).unwrap();
    let noisy = ck.forward_batch(&mut g, &batch, Some(&Tensor::zeros(&[3, 8]))).unwrap();
    assert_eq!(g.value(clean.logits), g.value(noisy.logits));
}

#[test]
fn rejects_bad_tokens_and_lengths() {
    let ck = Checkpoint::init(&small()).unwrap();
    let mut g = Graph::new();
    assert!(matches!(ck.forward(&mut g, &[2, 16]), Err(Error::OutOfVocab { token: 16, .. })));
    assert!(matches!(ck.forward(&mut g, &[2; 11]), Err(Error::SequenceTooLong { .. })));
    assert!(matches!(ck.pair_forward(&mut g, &[2; 5], &[3; 5]), Err(Error::SequenceTooLong { len: 11, .. })));
}

#[test]
fn pair_forward_joins_with_one_separator() {
    let joined = join_pair(&[2, 3], &[4]);
    assert_eq!(joined, vec![2, 3, EOS, 4]);
    assert_eq!(joined.iter().filter(|&&t| t == EOS).count(), 1);

    let ck = Checkpoint::init(&small()).unwrap();
    let mut g = Graph::new();
    let pair = ck.pair_forward(&mut g, &[2, 3], &[4, 5]).unwrap();
    let direct = ck.forward(&mut g, &[2, 3, EOS, 4, 5]).unwrap();
    assert_eq!(g.value(pair.logits), g.value(direct.logits));

    let empty = ck.pair_forward(&mut g, &[2, 3], &[]).unwrap();
    let direct = ck.forward(&mut g, &[2, 3, EOS]).unwrap();
    assert_eq!(g.value(empty.logits), g.value(direct.logits));
}

#[test]
fn padding_after_last_token_does_not_change_representations() {
    let ck = Checkpoint::init(&small()).unwrap();
    let short = vec![5, 6, 7];
    let mut g = Graph::new();
    let alone = ck.forward(&mut g, &short).unwrap();
    let batched = ck.forward_batch(&mut g, &[short.clone(), vec![2, 3, 4, 5, 6, 7, 8]], None).unwrap();
    for k in 0..2 {
        let a = g.value(alone.layers[k]).data().to_vec();
        let b = g.value(batched.layers[k]).data()[..8].to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_depend_on_input_embeddings() {
    let ck = Checkpoint::init(&small()).unwrap();
    let mut g = Graph::new();
    let tr = ck.forward(&mut g, &[2, 9, 4]).unwrap();
    let s = g.sum(tr.logits).unwrap();
    let grads = g.backward(s, &[tr.input], false).unwrap();
    assert!(!grads.has_warning());
    assert!(grads.get(tr.input).unwrap().sum_squares() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let mut ck = Checkpoint::init(&small()).unwrap();
    ck.step = 17;
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(buf.as_slice()).unwrap();
    assert_eq!(back, ck);
    let (mut g1, mut g2) = (Graph::new(), Graph::new());
    let a = ck.forward(&mut g1, &[3, 3, 8]).unwrap();
    let b = back.forward(&mut g2, &[3, 3, 8]).unwrap();
    assert_eq!(g1.value(a.logits), g2.value(b.logits));

    buf[0] = b'X';
    assert!(matches!(Checkpoint::read_from(buf.as_slice()), Err(Error::Checkpoint(_))));
}

fn loss_of(ck: &Checkpoint, batch: &[Vec<usize>], targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let m = ck.bind(&mut g, true);
    let tr = m.forward(&mut g, batch, None).unwrap();
    let l = g.cross_entropy(tr.logits, targets).unwrap();
    g.value(l).item()
}

#[test]
fn full_model_loss_gradient_matches_finite_differences() {
    let ck = Checkpoint::init(&small()).unwrap();
    let batch = vec![vec![2, 3, 9, 4], vec![7, 8]];
    let targets = [2, 0];
    let mut g = Graph::new();
    let m = ck.bind(&mut g, true);
    let tr = m.forward(&mut g, &batch, None).unwrap();
    let l = g.cross_entropy(tr.logits, &targets).unwrap();
    let grads = g.backward(l, m.param_vars(), false).unwrap().into_tensors();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..6 {
        let pi = rng.random_range(0..ck.params.len());
        let name = ck.params[pi].0.clone();
        let numeric = numeric_gradient(
            |t| {
                let mut c = ck.clone();
                *c.param_mut(&name).unwrap() = t.clone();
                Ok(loss_of(&c, &batch, &targets))
            },
            &ck.params[pi].1,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&grads[pi], &numeric, 1e-7);
        assert!(err < 1e-4, "{name}: {err}");
    }
}
