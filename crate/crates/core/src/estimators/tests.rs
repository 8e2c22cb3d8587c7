use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::model::{Checkpoint, ModelConfig, TaskHead};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn apply(a: &Tensor, v: &[f64]) -> Vec<f64> {
    let n = a.shape()[1];
    (0..a.shape()[0]).map(|i| (0..n).map(|j| a.data()[i * n + j] * v[j]).sum()).collect()
}

fn frob_sq(a: &Tensor) -> f64 {
    a.sum_squares()
}

/// `z = x Aᵀ` for a single instance `x` of shape `[1, n]`.
fn linear_map(g: &mut Graph, a: &Tensor) -> (Var, Var) {
    let n = a.shape()[1];
    let x = g.leaf(Tensor::new(vec![1, n], (0..n).map(|i| 0.1 * i as f64).collect()).unwrap());
    let at = g.constant(a.clone());
    let at = g.transpose(at).unwrap();
    (g.matmul(x, at).unwrap(), x)
}

/// Two tanh layers over `batch` instances of width `n`; returns (input, hidden, output).
fn tanh_net(g: &mut Graph, batch: usize, n: usize, width: usize, seed: u64) -> (Var, Var, Var) {
    let x = g.leaf(random_matrix(batch, n, seed));
    let w1 = g.constant(random_matrix(n, width, seed + 1));
    let w2 = g.constant(random_matrix(width, width, seed + 2));
    let h = g.matmul(x, w1).unwrap();
    let h = g.scale(h, 0.5).unwrap();
    let h = g.tanh(h).unwrap();
    let o = g.matmul(h, w2).unwrap();
    let o = g.scale(o, 0.5).unwrap();
    let o = g.tanh(o).unwrap();
    (x, h, o)
}

#[test]
fn trace_of_identity() {
    let mut s = ProjectionSampler::gaussian(1);
    let est = trace_estimate(|v| v.to_vec(), 4, &mut s, 4000).unwrap();
    assert!((est - 4.0).abs() < 0.2, "{est}");
}

#[test]
fn trace_of_diagonal_converges() {
    let mut s = ProjectionSampler::gaussian(2);
    let est = trace_estimate(|v| vec![v[0], 2.0 * v[1], 3.0 * v[2]], 3, &mut s, 100_000).unwrap();
    assert!((est - 6.0).abs() / 6.0 < 0.02, "{est}");
}

#[test]
fn trace_with_fixed_vector() {
    let mut s = ProjectionSampler::fixed(vec![vec![1.0, 0.0]]);
    let est = trace_estimate(|v| vec![5.0 * v[0], 0.0 * v[1]], 2, &mut s, 1).unwrap();
    assert_eq!(est, 5.0);
}

#[test]
fn zero_projections_is_an_error() {
    let mut s = ProjectionSampler::gaussian(0);
    assert!(matches!(trace_estimate(|v| v.to_vec(), 2, &mut s, 0), Err(Error::Estimator(_))));
}

#[test]
fn trace_estimate_is_unbiased_on_fixed_matrix() {
    let b = random_matrix(8, 8, 11);
    // A = BᵀB / 8 + I keeps the trace well away from zero.
    let mut a = vec![0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            a[i * 8 + j] = (0..8).map(|k| b.data()[k * 8 + i] * b.data()[k * 8 + j]).sum::<f64>() / 8.0;
        }
        a[i * 8 + i] += 1.0;
    }
    let a = Tensor::new(vec![8, 8], a).unwrap();
    let tr: f64 = (0..8).map(|i| a.data()[i * 9]).sum();
    let mut s = ProjectionSampler::gaussian(12);
    let est = trace_estimate(|v| apply(&a, v), 8, &mut s, 100_000).unwrap();
    assert!((est - tr).abs() / tr < 0.01, "{est} vs {tr}");
}

#[test]
fn variance_shrinks_with_more_projections() {
    let a = random_matrix(6, 6, 3);
    let variance = |p: usize| {
        let mut s = ProjectionSampler::gaussian(p as u64);
        let xs: Vec<f64> = (0..40).map(|_| trace_estimate(|v| apply(&a, v), 6, &mut s, p).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let (lo, hi) = (variance(1000), variance(10));
    assert!(lo < hi, "{lo} !< {hi}");
}

#[test]
fn sphere_draws_are_unit_norm() {
    let mut s = ProjectionSampler::new(5, &[], ProjectionMode::NormalizedSphere);
    for _ in 0..100 {
        let v = s.draw(17);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

#[test]
fn jacobian_of_two_by_two_linear_map() {
    let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let (z, x) = linear_map(&mut g, &a);
    let mut s = ProjectionSampler::gaussian(7);
    let est = jacobian_frob_sq_of(&mut g, z, x, 1, &mut s, 2000).unwrap();
    assert!((est.value - 30.0).abs() / 30.0 < 0.1, "{}", est.value);
    assert_eq!(est.projections, 2000);
    assert_eq!(exact_jacobian_of(&mut g, z, x, 1, 0).unwrap(), a);
}

#[test]
fn jacobian_of_identity() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 8], vec![0.3; 8]).unwrap());
    let z = g.scale(x, 1.0).unwrap();
    let mut s = ProjectionSampler::gaussian(8);
    let est = jacobian_frob_sq_of(&mut g, z, x, 1, &mut s, 2000).unwrap();
    assert!((est.value - 8.0).abs() / 8.0 < 0.1, "{}", est.value);
    assert_eq!(exact_jacobian_of(&mut g, z, x, 1, 0).unwrap(), Tensor::identity(8));

    let mut raw = ProjectionSampler::new(8, &[], ProjectionMode::NormalizedSphere);
    raw.correct = false;
    let under = jacobian_frob_sq_of(&mut g, z, x, 1, &mut raw, 200).unwrap();
    assert!((under.value - 1.0).abs() < 1e-9, "uncorrected unit vectors give ‖I‖²/n");
    assert!(!under.corrected);
}

#[test]
fn corrected_sphere_mode_is_unbiased_on_linear_maps() {
    let a = random_matrix(5, 7, 21);
    let mut g = Graph::new();
    let (z, x) = linear_map(&mut g, &a);
    let mut s = ProjectionSampler::new(3, &[], ProjectionMode::NormalizedSphere);
    let est = jacobian_frob_sq_of(&mut g, z, x, 1, &mut s, 2000).unwrap();
    assert!(est.corrected);
    let exact = frob_sq(&a);
    assert!((est.value - exact).abs() / exact < 0.05, "{} vs {exact}", est.value);
}

#[test]
fn jacobian_estimate_matches_exact_on_batched_network() {
    let mut g = Graph::new();
    let (x, _, o) = tanh_net(&mut g, 3, 6, 5, 30);
    let exact = exact_jacobian_frob_sq_of(&mut g, o, x, 3).unwrap();
    for b in 0..3 {
        let j = exact_jacobian_of(&mut g, o, x, 3, b).unwrap();
        assert!((frob_sq(&j) - exact[b]).abs() < 1e-10);
    }
    let mean = exact.iter().sum::<f64>() / 3.0;
    let mut s = ProjectionSampler::gaussian(31);
    let est = jacobian_frob_sq_of(&mut g, o, x, 3, &mut s, 1000).unwrap();
    assert!((est.value - mean).abs() / mean < 0.1, "{} vs {mean}", est.value);
}

#[test]
fn exact_jacobian_rows_match_one_hot_vjps() {
    let mut g = Graph::new();
    let (x, _, o) = tanh_net(&mut g, 1, 4, 6, 40);
    let j = exact_jacobian_of(&mut g, o, x, 1, 0).unwrap();
    for i in 0..6 {
        let mut e = vec![0.0; 6];
        e[i] = 1.0;
        let v = g.constant(Tensor::new(vec![1, 6], e).unwrap());
        let r = g.vjp(o, v, x).unwrap();
        let row = &j.data()[i * 4..(i + 1) * 4];
        for (a, b) in row.iter().zip(g.value(r).data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn exact_jacobian_size_guard() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 300]));
    let w = g.constant(Tensor::zeros(&[300, 300]));
    let z = g.matmul(x, w).unwrap();
    assert!(matches!(exact_jacobian_of(&mut g, z, x, 1, 0), Err(Error::Estimator(_))));
    assert!(matches!(exact_hessian_of(&mut g, z, x, 1, 0, 0), Err(Error::Estimator(_))));
}

fn monomial(g: &mut Graph) -> (Var, Var) {
    // f(x) = x₁² x₂ as a one-dimensional layer.
    let x = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
    let x1 = column(g, x, 0);
    let x2 = column(g, x, 1);
    let sq = g.square(x1).unwrap();
    let f = g.mul(sq, x2).unwrap();
    (g.reshape(f, &[1, 1]).unwrap(), x)
}

fn column(g: &mut Graph, x: Var, c: usize) -> Var {
    let t = g.transpose(x).unwrap();
    let r = g.slice_rows(t, c, c + 1).unwrap();
    g.sum(r).unwrap()
}

#[test]
fn hessian_of_monomial() {
    let mut g = Graph::new();
    let (z, x) = monomial(&mut g);
    let h = exact_hessian_of(&mut g, z, x, 1, 0, 0).unwrap();
    assert_eq!(h.data(), &[2.0, 2.0, 2.0, 0.0]);
    assert_eq!(frob_sq(&h), 12.0);
    let mut s = ProjectionSampler::gaussian(50);
    let est = hessian_frob_sq_of(&mut g, z, x, 1, 0, &mut s, 2000).unwrap();
    assert!((est.value - 12.0).abs() / 12.0 < 0.1, "{}", est.value);
}

#[test]
fn linear_layers_have_zero_hessian() {
    let a = random_matrix(3, 4, 60);
    let mut g = Graph::new();
    let (z, x) = linear_map(&mut g, &a);
    let mut s = ProjectionSampler::gaussian(61);
    for d in 0..3 {
        let est = hessian_frob_sq_of(&mut g, z, x, 1, d, &mut s, 20).unwrap();
        assert!(est.value.abs() < 1e-12);
        assert_eq!(exact_hessian_of(&mut g, z, x, 1, d, 0).unwrap(), Tensor::zeros(&[4, 4]));
    }
}

#[test]
fn hessian_estimate_matches_exact_on_tanh_network() {
    let mut g = Graph::new();
    let (x, _, o) = tanh_net(&mut g, 2, 6, 8, 70);
    for d in [0, 5] {
        let exact: f64 = (0..2).map(|b| frob_sq(&exact_hessian_of(&mut g, o, x, 2, d, b).unwrap())).sum::<f64>() / 2.0;
        let mut s = ProjectionSampler::gaussian(71 + d as u64);
        let est = hessian_frob_sq_of(&mut g, o, x, 2, d, &mut s, 1000).unwrap();
        assert!((est.value - exact).abs() / exact < 0.1, "d={d}: {} vs {exact}", est.value);
    }
}

#[test]
fn batched_hessian_oracle_matches_per_instance() {
    let mut g = Graph::new();
    let (x, _, o) = tanh_net(&mut g, 3, 5, 4, 90);
    for d in 0..4 {
        let per = exact_hessian_frob_sq_of(&mut g, o, x, 3, d).unwrap();
        for (b, v) in per.iter().enumerate() {
            let h = frob_sq(&exact_hessian_of(&mut g, o, x, 3, d, b).unwrap());
            assert!((v - h).abs() < 1e-12 * h.max(1.0));
        }
    }
    assert!(exact_hessian_frob_sq_of(&mut g, o, x, 3, 4).is_err());
}

#[test]
fn exact_hessian_of_quadratic_form_and_symmetry() {
    let mut g = Graph::new();
    let a = Tensor::matrix(3, 3, vec![2.0, -1.0, 0.5, -1.0, 3.0, 0.0, 0.5, 0.0, 1.0]).unwrap();
    let x = g.leaf(Tensor::new(vec![1, 3], vec![0.2, -0.4, 1.0]).unwrap());
    let ac = g.constant(a.clone());
    let xa = g.matmul(x, ac).unwrap();
    let q = g.dot(xa, x).unwrap();
    let q = g.reshape(q, &[1, 1]).unwrap();
    let h = exact_hessian_of(&mut g, q, x, 1, 0, 0).unwrap();
    for (hv, av) in h.data().iter().zip(a.data()) {
        assert!((hv - 2.0 * av).abs() < 1e-12);
    }

    let (x, _, o) = tanh_net(&mut g, 1, 7, 4, 80);
    let h = exact_hessian_of(&mut g, o, x, 1, 2, 0).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            assert!((h.data()[i * 7 + j] - h.data()[j * 7 + i]).abs() < 1e-8);
        }
    }
}

#[test]
fn hessian_requires_recording() {
    let mut g = Graph::new();
    let (x, _, o) = tanh_net(&mut g, 1, 3, 3, 90);
    let mut s = ProjectionSampler::gaussian(0);
    let err = g.with_grad(false, |g| hessian_frob_sq_of(g, o, x, 1, 0, &mut s, 1)).unwrap_err();
    assert!(err.to_string().contains("recorded gradient"), "{err}");
    assert!(matches!(hessian_frob_sq_of(&mut g, o, x, 1, 3, &mut s, 1), Err(Error::Estimator(_))));
}

#[test]
fn model_trace_estimates() {
    let cfg = ModelConfig {
        vocab_size: 12,
        embed_dim: 4,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 6,
        max_seq_len: 4,
        head: TaskHead::Classification { classes: 2 },
        seed: 3,
    };
    let ck = Checkpoint::init(&cfg).unwrap();
    let mut g = Graph::new();
    let tr = ck.forward_batch(&mut g, &[vec![2, 5, 7], vec![3, 4]], None).unwrap();
    assert!(matches!(jacobian_frob_sq(&mut g, &tr, 2, &mut ProjectionSampler::gaussian(0), 1), Err(Error::Estimator(_))));
    let exact = exact_jacobian_frob_sq_of(&mut g, tr.layers[1], tr.input, 2).unwrap();
    let mean = exact.iter().sum::<f64>() / 2.0;
    let est = jacobian_frob_sq(&mut g, &tr, 1, &mut ProjectionSampler::gaussian(1), 1000).unwrap();
    assert!((est.value - mean).abs() / mean < 0.1, "{} vs {mean}", est.value);
    let h = exact_hessian(&mut g, &tr, 0, 1, 1).unwrap();
    assert_eq!(h.shape(), &[12, 12]);
    let graph_len = g.len();
    hessian_frob_sq(&mut g, &tr, 0, 1, &mut ProjectionSampler::gaussian(2), 3).unwrap();
    assert_eq!(g.len(), graph_len, "value estimates leave the graph as they found it");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn spectral_frobenius_ordering(seed in 0u64..10_000, rank in 1usize..5, m in 4usize..8, n in 4usize..8) {
        let b = random_matrix(m, rank, seed);
        let c = random_matrix(rank, n, seed + 1);
        let mut a = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                a[i * n + j] = (0..rank).map(|k| b.data()[i * rank + k] * c.data()[k * n + j]).sum();
            }
        }
        let a = Tensor::new(vec![m, n], a).unwrap();
        let sigma = spectral_norm(&a, 2000, seed);
        let frob = frob_sq(&a).sqrt();
        prop_assert!(sigma <= frob * (1.0 + 1e-9));
        prop_assert!(frob <= (rank as f64).sqrt() * sigma * (1.0 + 1e-6));
    }
}
