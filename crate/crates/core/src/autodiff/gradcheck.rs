//! Central finite differences, used to validate analytic gradients.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient of a scalar function of `x`.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both are
/// below `floor`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.sum_squares().sqrt().max(b.sum_squares().sqrt());
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

/// A primitive wrapped as a function of one or more random inputs.
pub struct Probe {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are drawn from `[lo, hi]`.
    pub domain: (f64, f64),
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
}

macro_rules! probe {
    ($name:expr, [$($shape:expr),*], $dom:expr, $f:expr) => {
        Probe { name: $name, shapes: vec![$($shape.to_vec()),*], domain: $dom, build: $f }
    };
}

const WIDE: (f64, f64) = (-2.0, 2.0);
const POSITIVE: (f64, f64) = (0.5, 2.0);

/// One probe per primitive (and per composite used by the model).
pub fn primitive_probes() -> Vec<Probe> {
    vec![
        probe!("add", [[3, 4], [3, 4]], WIDE, |g, x| g.add(x[0], x[1])),
        probe!("subtract", [[3, 4], [3, 4]], WIDE, |g, x| g.sub(x[0], x[1])),
        probe!("multiply", [[3, 4], [3, 4]], WIDE, |g, x| g.mul(x[0], x[1])),
        probe!("negate", [[5]], WIDE, |g, x| g.neg(x[0])),
        probe!("scale", [[5]], WIDE, |g, x| g.scale(x[0], -1.7)),
        probe!("add-scalar", [[5]], WIDE, |g, x| g.add_scalar(x[0], 0.3)),
        probe!("scale-by", [[2, 3], []], WIDE, |g, x| g.scale_by(x[0], x[1])),
        probe!("matmul", [[3, 4], [4, 2]], WIDE, |g, x| g.matmul(x[0], x[1])),
        probe!("matmul-batched", [[2, 3, 4], [2, 4, 3]], WIDE, |g, x| g.matmul(x[0], x[1])),
        probe!("transpose", [[2, 3, 4]], WIDE, |g, x| g.transpose(x[0])),
        probe!("reshape", [[2, 6]], WIDE, |g, x| g.reshape(x[0], &[3, 4])),
        probe!("permute", [[2, 3, 4]], WIDE, |g, x| g.permute(x[0], &[2, 0, 1])),
        probe!("sum", [[3, 4]], WIDE, |g, x| g.sum(x[0])),
        probe!("fill", [[]], WIDE, |g, x| g.fill(x[0], &[2, 3])),
        probe!("sum-last", [[3, 4]], WIDE, |g, x| g.sum_last(x[0])),
        probe!("expand-last", [[3]], WIDE, |g, x| g.expand_last(x[0], 4)),
        probe!("sum-leading", [[3, 4]], WIDE, |g, x| g.sum_leading(x[0])),
        probe!("broadcast-leading", [[4]], WIDE, |g, x| g.broadcast_leading(x[0], 3)),
        probe!("softmax", [[3, 5]], WIDE, |g, x| g.softmax(x[0])),
        probe!("tanh", [[6]], WIDE, |g, x| g.tanh(x[0])),
        probe!("relu", [[6]], WIDE, |g, x| g.relu(x[0])),
        probe!("exp", [[6]], WIDE, |g, x| g.exp(x[0])),
        probe!("square", [[6]], WIDE, |g, x| g.square(x[0])),
        probe!("sqrt", [[6]], POSITIVE, |g, x| g.sqrt(x[0])),
        probe!("reciprocal", [[6]], POSITIVE, |g, x| g.recip(x[0])),
        probe!("gather", [[4, 3]], WIDE, |g, x| g.gather(x[0], &[2, 0, 2, 3])),
        probe!("scatter", [[4, 3]], WIDE, |g, x| g.scatter(x[0], &[1, 4, 1, 0], 5)),
        probe!("concat", [[2, 3], [3, 3]], WIDE, |g, x| g.concat(&[x[0], x[1]])),
        probe!("slice", [[5, 2]], WIDE, |g, x| g.slice_rows(x[0], 1, 4)),
        probe!("cross-entropy", [[3, 4]], WIDE, |g, x| g.cross_entropy(x[0], &[1, 3, 0])),
        probe!("mean", [[3, 4]], WIDE, |g, x| g.mean(x[0])),
        probe!("dot", [[5], [5]], WIDE, |g, x| g.dot(x[0], x[1])),
        probe!("mse", [[5], [5]], WIDE, |g, x| g.mse(x[0], x[1])),
        probe!("gelu", [[6]], WIDE, |g, x| g.gelu(x[0])),
        probe!("layer-norm", [[3, 4], [4], [4]], WIDE, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        probe!("linear", [[3, 4], [4, 2], [2]], WIDE, |g, x| g.linear(x[0], x[1], x[2])),
    ]
}

/// Outcome of checking one probe at one random point.
#[derive(Debug, Clone)]
pub struct ProbeCheck {
    pub name: &'static str,
    /// Worst relative error of first derivatives over all inputs.
    pub first_order: f64,
    /// Worst relative error of a directional second derivative.
    pub second_order: f64,
}

fn sample(shape: &[usize], (lo, hi): (f64, f64), rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Checks `probe` at a random point: analytic first derivatives of
/// `sum(w * f(x))` and the gradient of `sum_i <u_i, ∂/∂x_i>` (which exercises
/// the recorded backward) both against central differences.
pub fn check_probe(probe: &Probe, rng: &mut impl Rng, h: f64) -> Result<ProbeCheck> {
    let inputs: Vec<Tensor> = probe.shapes.iter().map(|s| sample(s, probe.domain, rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let xs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = (probe.build)(&mut g, &xs)?;
        g.shape(y).to_vec()
    };
    let weights = sample(&out_shape, (-1.0, 1.0), rng);
    let dirs: Vec<Tensor> = probe.shapes.iter().map(|s| sample(s, (-1.0, 1.0), rng)).collect();

    let first = |vals: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let xs: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let y = (probe.build)(&mut g, &xs)?;
        let w = g.constant(weights.clone());
        let s = g.dot(y, w)?;
        Ok((g, xs, s))
    };
    let second = |vals: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let (mut g, xs, s) = first(vals)?;
        let grads = g.grad(s, &xs)?;
        let mut total: Option<Var> = None;
        for (gr, u) in grads.iter().zip(&dirs) {
            let u = g.constant(u.clone());
            let d = g.dot(*gr, u)?;
            total = Some(match total {
                Some(t) => g.add(t, d)?,
                None => d,
            });
        }
        Ok((g, xs, total.expect("at least one input")))
    };

    let mut worst = [0.0f64; 2];
    for (order, build) in [&first as &dyn Fn(&[Tensor]) -> _, &second].into_iter().enumerate() {
        let (mut g, xs, s) = build(&inputs)?;
        let analytic = g.backward(s, &xs, false)?.into_tensors();
        for (i, a) in analytic.iter().enumerate() {
            let numeric = numeric_gradient(
                |xi| {
                    let mut vals = inputs.clone();
                    vals[i] = xi.clone();
                    let (g, _, s) = build(&vals)?;
                    Ok(g.value(s).item())
                },
                &inputs[i],
                h,
            )?;
            worst[order] = worst[order].max(relative_error(a, &numeric, 1e-6));
        }
    }
    Ok(ProbeCheck { name: probe.name, first_order: worst[0], second_order: worst[1] })
}
