//! Stochastic Frobenius-norm estimates of layer Jacobians and Hessians with
//! respect to the input embeddings, plus exact brute-force oracles.
//!
//! The estimators rest on `E[vᵀAv] = tr(A)` for isotropic `v`:
//! `‖J‖²_F = E‖vᵀJ‖²` with `v` over the output dimensions, and
//! `‖H_d‖²_F = E‖H_d v‖²` with `v` over the input dimensions, where `H_d v` is
//! obtained by differentiating `vᵀ ∂z_d/∂x` a second time.
//!
//! In [`ProjectionMode::GaussianRaw`] the estimates are unbiased as is. Unit
//! vectors ([`ProjectionMode::NormalizedSphere`]) shrink every estimate by the
//! projection dimension, which the correction flag multiplies back in.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::rng;

/// Size guard for [`exact_jacobian`]: `m * n` entries.
pub const EXACT_JACOBIAN_MAX: usize = 65_536;
/// Size guard for [`exact_hessian`]: input dimension `n`.
pub const EXACT_HESSIAN_MAX_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMode {
    #[default]
    GaussianRaw,
    NormalizedSphere,
}

#[derive(Debug, Clone)]
enum Source {
    Random(ChaCha8Rng),
    Fixed { vectors: Vec<Vec<f64>>, next: usize },
}

/// Draws projection vectors.
#[derive(Debug, Clone)]
pub struct ProjectionSampler {
    source: Source,
    mode: ProjectionMode,
    /// Undo the `1/dim` shrinkage of unit vectors.
    pub correct: bool,
}

impl ProjectionSampler {
    pub fn new(seed: u64, path: &[u64], mode: ProjectionMode) -> Self {
        let mut full = vec![rng::tag::PROJECTION];
        full.extend_from_slice(path);
        Self { source: Source::Random(rng::stream(seed, &full)), mode, correct: true }
    }

    pub fn gaussian(seed: u64) -> Self {
        Self::new(seed, &[], ProjectionMode::GaussianRaw)
    }

    /// Replays `vectors` in order, cycling. Vectors are used as given.
    pub fn fixed(vectors: Vec<Vec<f64>>) -> Self {
        Self { source: Source::Fixed { vectors, next: 0 }, mode: ProjectionMode::GaussianRaw, correct: false }
    }

    pub fn mode(&self) -> ProjectionMode {
        self.mode
    }

    /// Factor applied to raw quadratic forms of vectors of length `dim`.
    pub fn correction(&self, dim: usize) -> f64 {
        match (self.mode, self.correct) {
            (ProjectionMode::NormalizedSphere, true) => dim as f64,
            _ => 1.0,
        }
    }

    pub fn draw(&mut self, dim: usize) -> Vec<f64> {
        match &mut self.source {
            Source::Fixed { vectors, next } => {
                let v = vectors[*next % vectors.len()].clone();
                *next += 1;
                assert_eq!(v.len(), dim, "fixed projection has wrong length");
                v
            }
            Source::Random(r) => {
                let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
                if self.mode == ProjectionMode::NormalizedSphere {
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            }
        }
    }

    /// `rows` independent vectors stacked into a `[rows, dim]` tensor.
    pub fn draw_rows(&mut self, rows: usize, dim: usize) -> Tensor {
        let data = (0..rows).flat_map(|_| self.draw(dim)).collect();
        Tensor::new(vec![rows, dim], data).expect("rows * dim values")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    /// Estimated squared Frobenius norm, averaged over instances.
    pub value: f64,
    pub projections: usize,
    pub mode: ProjectionMode,
    pub corrected: bool,
}

/// Hutchinson trace estimate `(1/p) Σ vᵢᵀ A vᵢ` of a matrix-free operator.
pub fn trace_estimate(
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<f64> {
    if p == 0 {
        return Err(Error::Estimator("trace estimate needs at least one projection".into()));
    }
    let mut total = 0.0;
    for _ in 0..p {
        let v = sampler.draw(dim);
        let av = apply(&v);
        if av.len() != dim {
            return Err(Error::Estimator(format!("operator returned {} values for dim {dim}", av.len())));
        }
        total += v.iter().zip(&av).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(sampler.correction(dim) * total / p as f64)
}

fn instance_dim(g: &Graph, x: Var, batch: usize) -> Result<usize> {
    let n = g.value(x).numel();
    if batch == 0 || n % batch != 0 {
        return Err(Error::Estimator(format!("input of {n} values does not split into {batch} instances")));
    }
    Ok(n / batch)
}

fn layer_width(g: &Graph, z: Var, batch: usize) -> Result<usize> {
    let s = g.shape(z);
    if s.len() != 2 || s[0] != batch {
        return Err(Error::Estimator(format!("representation shape {s:?} is not [{batch}, width]")));
    }
    Ok(s[1])
}

/// Mean over instances of the squared norm of each instance block of `r`.
fn mean_instance_sq(g: &mut Graph, r: Var, batch: usize) -> Result<Var> {
    let n = g.value(r).numel() / batch;
    let r = g.reshape(r, &[batch, n])?;
    let sq = g.square(r)?;
    let per = g.sum_last(sq)?;
    g.mean(per)
}

/// Mean of `p` one-projection Jacobian estimates, recorded so it can be
/// differentiated again (e.g. with respect to model parameters).
pub fn jacobian_term(
    g: &mut Graph,
    z: Var,
    x: Var,
    batch: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<Var> {
    let m = layer_width(g, z, batch)?;
    instance_dim(g, x, batch)?;
    mean_of(g, p, |g| {
        let v = g.constant(sampler.draw_rows(batch, m));
        let r = g.vjp(z, v, x)?;
        let est = mean_instance_sq(g, r, batch)?;
        scale_if(g, est, sampler.correction(m))
    })
}

/// `∂(Σ_b z[b, d])/∂x`, recorded: the first half of every Hessian product.
fn hessian_setup(g: &mut Graph, z: Var, x: Var, batch: usize, d: usize) -> Result<(Var, usize)> {
    if !g.grad_enabled() || !g.requires_grad(x) {
        return Err(Error::Estimator(
            "Hessian estimates differentiate a recorded gradient; enable gradient recording \
             and build the forward pass with a differentiable input"
                .into(),
        ));
    }
    let m = layer_width(g, z, batch)?;
    if d >= m {
        return Err(Error::Estimator(format!("output dimension {d} out of range for width {m}")));
    }
    let n = instance_dim(g, x, batch)?;
    let zd = select_column(g, z, d)?;
    Ok((g.grad(zd, &[x])?[0], n))
}

fn hessian_projection(
    g: &mut Graph,
    gd: Var,
    x: Var,
    batch: usize,
    n: usize,
    sampler: &mut ProjectionSampler,
) -> Result<Var> {
    let v = sampler.draw_rows(batch, n).reshaped(g.shape(x).to_vec())?;
    let v = g.constant(v);
    let s = g.dot(gd, v)?;
    let hv = g.grad(s, &[x])?[0];
    let est = mean_instance_sq(g, hv, batch)?;
    scale_if(g, est, sampler.correction(n))
}

/// Mean of `p` one-projection estimates of `‖H_d‖²_F` for output dimension
/// `d`, recorded.
pub fn hessian_term(
    g: &mut Graph,
    z: Var,
    x: Var,
    batch: usize,
    d: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<Var> {
    let (gd, n) = hessian_setup(g, z, x, batch, d)?;
    mean_of(g, p, |g| hessian_projection(g, gd, x, batch, n, sampler))
}

fn mean_of(g: &mut Graph, p: usize, mut f: impl FnMut(&mut Graph) -> Result<Var>) -> Result<Var> {
    if p == 0 {
        return Err(Error::Estimator("at least one projection is required".into()));
    }
    let mut acc = f(g)?;
    for _ in 1..p {
        let next = f(g)?;
        acc = g.add(acc, next)?;
    }
    scale_if(g, acc, 1.0 / p as f64)
}

fn scale_if(g: &mut Graph, v: Var, c: f64) -> Result<Var> {
    if c == 1.0 {
        Ok(v)
    } else {
        g.scale(v, c)
    }
}

/// `Σ_b z[b, d]`.
fn select_column(g: &mut Graph, z: Var, d: usize) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let mut mask = vec![0.0; s[0] * s[1]];
    for b in 0..s[0] {
        mask[b * s[1] + d] = 1.0;
    }
    let mask = g.constant(Tensor::new(s, mask)?);
    g.dot(z, mask)
}

/// `z[row, col]` as a scalar node.
fn select_entry(g: &mut Graph, z: Var, row: usize, col: usize) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let mut mask = vec![0.0; s[0] * s[1]];
    mask[row * s[1] + col] = 1.0;
    let mask = g.constant(Tensor::new(s, mask)?);
    g.dot(z, mask)
}

/// Value-only mean of `p` estimates; the graph is restored after each one.
fn averaged(
    g: &mut Graph,
    p: usize,
    sampler: &mut ProjectionSampler,
    mut term: impl FnMut(&mut Graph, &mut ProjectionSampler) -> Result<Var>,
) -> Result<NormEstimate> {
    if p == 0 {
        return Err(Error::Estimator("at least one projection is required".into()));
    }
    let mark = g.len();
    let mut total = 0.0;
    for _ in 0..p {
        let v = term(g, sampler)?;
        total += g.value(v).item();
        g.truncate(mark);
    }
    Ok(NormEstimate {
        value: total / p as f64,
        projections: p,
        mode: sampler.mode(),
        corrected: sampler.correction(2) != 1.0,
    })
}

/// `‖J‖²_F` of representation `z` with respect to `x`, averaged over instances.
pub fn jacobian_frob_sq_of(
    g: &mut Graph,
    z: Var,
    x: Var,
    batch: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<NormEstimate> {
    averaged(g, p, sampler, |g, s| jacobian_term(g, z, x, batch, s, 1))
}

/// `‖H_d‖²_F` of output dimension `d` of `z`, averaged over instances.
pub fn hessian_frob_sq_of(
    g: &mut Graph,
    z: Var,
    x: Var,
    batch: usize,
    d: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<NormEstimate> {
    let mark = g.len();
    let (gd, n) = hessian_setup(g, z, x, batch, d)?;
    let est = averaged(g, p, sampler, |g, s| hessian_projection(g, gd, x, batch, n, s));
    g.truncate(mark);
    est
}

/// Jacobian estimate for block `k` (0-based) of a trace.
pub fn jacobian_frob_sq(
    g: &mut Graph,
    trace: &ForwardTrace,
    k: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<NormEstimate> {
    let z = trace.layer(k)?;
    jacobian_frob_sq_of(g, z, trace.input, trace.batch, sampler, p)
}

/// Hessian estimate for output dimension `d` of block `k` (0-based).
pub fn hessian_frob_sq(
    g: &mut Graph,
    trace: &ForwardTrace,
    k: usize,
    d: usize,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<NormEstimate> {
    let z = trace.layer(k)?;
    hessian_frob_sq_of(g, z, trace.input, trace.batch, d, sampler, p)
}

// --- exact oracles ----------------------------------------------------------

fn instance_block(t: &Tensor, instance: usize, n: usize) -> Vec<f64> {
    t.data()[instance * n..(instance + 1) * n].to_vec()
}

/// Full `m × n` Jacobian of `z[instance]` with respect to that instance's
/// input block, one backward pass per output row.
pub fn exact_jacobian_of(g: &mut Graph, z: Var, x: Var, batch: usize, instance: usize) -> Result<Tensor> {
    let m = layer_width(g, z, batch)?;
    let n = instance_dim(g, x, batch)?;
    if m * n > EXACT_JACOBIAN_MAX {
        return Err(Error::Estimator(format!(
            "exact Jacobian of {m}x{n} exceeds the {EXACT_JACOBIAN_MAX}-entry guard"
        )));
    }
    if instance >= batch {
        return Err(Error::Estimator(format!("instance {instance} out of range for batch {batch}")));
    }
    let mark = g.len();
    let mut rows = Vec::with_capacity(m * n);
    for i in 0..m {
        let zi = select_entry(g, z, instance, i)?;
        let grad = g.backward(zi, &[x], false)?.into_tensors().remove(0);
        rows.extend(instance_block(&grad, instance, n));
        g.truncate(mark);
    }
    Tensor::new(vec![m, n], rows)
}

/// Exact per-instance `‖J‖²_F` for every instance of the batch, using one
/// backward pass per output dimension.
pub fn exact_jacobian_frob_sq_of(g: &mut Graph, z: Var, x: Var, batch: usize) -> Result<Vec<f64>> {
    let m = layer_width(g, z, batch)?;
    let n = instance_dim(g, x, batch)?;
    if m * n > EXACT_JACOBIAN_MAX {
        return Err(Error::Estimator(format!(
            "exact Jacobian of {m}x{n} exceeds the {EXACT_JACOBIAN_MAX}-entry guard"
        )));
    }
    let mark = g.len();
    let mut per = vec![0.0; batch];
    for i in 0..m {
        let zi = select_column(g, z, i)?;
        let grad = g.backward(zi, &[x], false)?.into_tensors().remove(0);
        for (b, acc) in per.iter_mut().enumerate() {
            *acc += grad.data()[b * n..(b + 1) * n].iter().map(|v| v * v).sum::<f64>();
        }
        g.truncate(mark);
    }
    Ok(per)
}

/// Full `n × n` Hessian of `z[instance, d]` with respect to that instance's
/// input block.
pub fn exact_hessian_of(g: &mut Graph, z: Var, x: Var, batch: usize, d: usize, instance: usize) -> Result<Tensor> {
    let m = layer_width(g, z, batch)?;
    let n = instance_dim(g, x, batch)?;
    if n > EXACT_HESSIAN_MAX_DIM {
        return Err(Error::Estimator(format!(
            "exact Hessian of dimension {n} exceeds the {EXACT_HESSIAN_MAX_DIM} guard"
        )));
    }
    if d >= m || instance >= batch {
        return Err(Error::Estimator(format!("dimension {d} / instance {instance} out of range")));
    }
    if !g.requires_grad(x) {
        return Err(Error::Estimator("input is not differentiable".into()));
    }
    let mark = g.len();
    let zd = select_entry(g, z, instance, d)?;
    let gd = g.grad(zd, &[x])?[0];
    let total = g.value(gd).numel();
    let flat = g.reshape(gd, &[total, 1])?;
    let inner = g.len();
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        let e = g.gather(flat, &[instance * n + i])?;
        let e = g.sum(e)?;
        let row = g.backward(e, &[x], false)?.into_tensors().remove(0);
        rows.extend(instance_block(&row, instance, n));
        g.truncate(inner);
    }
    g.truncate(mark);
    Tensor::new(vec![n, n], rows)
}

/// Exact per-instance `‖H_d‖²_F`, one second backward pass per input
/// coordinate shared across the batch.
pub fn exact_hessian_frob_sq_of(g: &mut Graph, z: Var, x: Var, batch: usize, d: usize) -> Result<Vec<f64>> {
    let m = layer_width(g, z, batch)?;
    let n = instance_dim(g, x, batch)?;
    if n > EXACT_HESSIAN_MAX_DIM {
        return Err(Error::Estimator(format!(
            "exact Hessian of dimension {n} exceeds the {EXACT_HESSIAN_MAX_DIM} guard"
        )));
    }
    if d >= m {
        return Err(Error::Estimator(format!("dimension {d} out of range for width {m}")));
    }
    if !g.requires_grad(x) {
        return Err(Error::Estimator("input is not differentiable".into()));
    }
    let mark = g.len();
    let zd = select_column(g, z, d)?;
    let gd = g.grad(zd, &[x])?[0];
    let shape = g.shape(gd).to_vec();
    let inner = g.len();
    let mut per = vec![0.0; batch];
    for i in 0..n {
        let mut mask = vec![0.0; batch * n];
        for b in 0..batch {
            mask[b * n + i] = 1.0;
        }
        let mask = g.constant(Tensor::new(shape.clone(), mask)?);
        let e = g.dot(gd, mask)?;
        let row = g.backward(e, &[x], false)?.into_tensors().remove(0);
        for (b, acc) in per.iter_mut().enumerate() {
            *acc += row.data()[b * n..(b + 1) * n].iter().map(|v| v * v).sum::<f64>();
        }
        g.truncate(inner);
    }
    g.truncate(mark);
    Ok(per)
}

pub fn exact_jacobian(g: &mut Graph, trace: &ForwardTrace, k: usize, instance: usize) -> Result<Tensor> {
    let z = trace.layer(k)?;
    exact_jacobian_of(g, z, trace.input, trace.batch, instance)
}

pub fn exact_hessian(g: &mut Graph, trace: &ForwardTrace, k: usize, d: usize, instance: usize) -> Result<Tensor> {
    let z = trace.layer(k)?;
    exact_hessian_of(g, z, trace.input, trace.batch, d, instance)
}

/// Largest singular value of a dense matrix by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Tensor, iters: usize, seed: u64) -> f64 {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut r = rng::stream(seed, &[]);
    let mut v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let av: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a.data()[i * n + j] * v[j]).sum()).collect();
        sigma = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j] * av[i]).sum()).collect();
    }
    sigma
}

#[cfg(test)]
mod tests;
