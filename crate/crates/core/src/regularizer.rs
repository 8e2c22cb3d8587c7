//! The layer-wise smoothness penalty
//!
//! ```text
//! Ω = Σₖ λ₁⁽ᵏ⁾ ‖J⁽ᵏ⁾‖² + λ₂⁽ᵏ⁾ Σ_{d ∈ D⁽ᵏ⁾} ‖H_d⁽ᵏ⁾‖²
//! ```
//!
//! over the last-token representations of every block, with per-layer
//! factors allocated from the Jacobian norms of the starting checkpoint and a
//! fresh random subset `D⁽ᵏ⁾` of output dimensions per batch.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::estimators::{self, ProjectionMode, ProjectionSampler};
use crate::model::{Checkpoint, ForwardTrace};
use crate::rng;

/// Instances per graph when profiling a calibration set.
const PROFILE_CHUNK: usize = 32;
/// Keeps the square-root penalty differentiable at zero.
const ROOT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Everything on the final representation, taken at the logits.
    PenultimateOnly,
    Uniform,
    /// `ξ·j/Σj`: rougher layers get more weight.
    InverseBaseSmoothness,
    /// `ξ·(1/j)/Σ(1/j)`.
    NormalizedBaseSmoothness,
    /// `ξ·softmax(−j)`.
    #[default]
    SoftmaxBaseSmoothness,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::PenultimateOnly,
        Strategy::Uniform,
        Strategy::InverseBaseSmoothness,
        Strategy::NormalizedBaseSmoothness,
        Strategy::SoftmaxBaseSmoothness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PenultimateOnly => "penultimate-only",
            Strategy::Uniform => "uniform",
            Strategy::InverseBaseSmoothness => "inverse-base-smoothness",
            Strategy::NormalizedBaseSmoothness => "normalized-base-smoothness",
            Strategy::SoftmaxBaseSmoothness => "softmax-base-smoothness",
        }
    }
}

/// Whether each term enters as the squared-norm estimate or its square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyForm {
    #[default]
    Squared,
    Root,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub xi: f64,
    pub projections: usize,
    pub hessian_dims: usize,
    pub strategy: Strategy,
    /// Explicit Jacobian factors; overrides the strategy when set.
    pub lambdas: Option<Vec<f64>>,
    /// Hessian factors, only consulted when `tie_lambdas` is off.
    pub hessian_lambdas: Option<Vec<f64>>,
    pub tie_lambdas: bool,
    pub form: PenaltyForm,
    pub projection_mode: ProjectionMode,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            xi: 3e-4,
            projections: 1,
            hessian_dims: 10,
            strategy: Strategy::default(),
            lambdas: None,
            hessian_lambdas: None,
            tie_lambdas: true,
            form: PenaltyForm::default(),
            projection_mode: ProjectionMode::default(),
        }
    }
}

/// Per-layer factors for the Jacobian and Hessian terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub jacobian: Vec<f64>,
    pub hessian: Vec<f64>,
    pub strategy: Strategy,
}

impl LayerWeights {
    pub fn tied(lambdas: Vec<f64>, strategy: Strategy) -> Self {
        Self { hessian: lambdas.clone(), jacobian: lambdas, strategy }
    }

    pub fn is_zero(&self) -> bool {
        self.jacobian.iter().chain(&self.hessian).all(|&l| l == 0.0)
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Regularizer(m));
        if !(self.xi >= 0.0) {
            return fail(format!("xi must be non-negative, got {}", self.xi));
        }
        if self.projections == 0 {
            return fail("projections must be at least 1".into());
        }
        for l in self.lambdas.iter().chain(&self.hessian_lambdas).flatten() {
            if !(*l >= 0.0) {
                return fail(format!("lambda factors must be non-negative, got {l}"));
            }
        }
        if self.tie_lambdas && self.hessian_lambdas.is_some() && self.hessian_lambdas != self.lambdas {
            return fail("tie-lambdas is set but separate Hessian factors were given".into());
        }
        Ok(())
    }

    /// Resolves the per-layer factors for a `layers`-deep model.
    pub fn weights(&self, profile: &SmoothnessProfile) -> Result<LayerWeights> {
        self.validate()?;
        let k = profile.norms.len();
        let jacobian = match &self.lambdas {
            Some(l) => l.clone(),
            None => allocate_lambdas(profile, self.xi, self.strategy)?,
        };
        let hessian = match (&self.hessian_lambdas, self.tie_lambdas) {
            (Some(h), false) => h.clone(),
            _ => jacobian.clone(),
        };
        if jacobian.len() != k || hessian.len() != k {
            return Err(Error::Regularizer(format!(
                "expected {k} lambda factors, got {} and {}",
                jacobian.len(),
                hessian.len()
            )));
        }
        Ok(LayerWeights { jacobian, hessian, strategy: self.strategy })
    }

    pub fn sampler(&self, seed: u64, path: &[u64]) -> ProjectionSampler {
        ProjectionSampler::new(seed, path, self.projection_mode)
    }
}

/// Per-layer Jacobian Frobenius norms of a reference model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    pub norms: Vec<f64>,
    pub calibration_id: String,
    pub projections: usize,
}

/// Output dimensions drawn for one layer's Hessian terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimSample {
    pub layer: usize,
    pub dims: Vec<usize>,
    pub draw: u64,
}

/// `count` distinct dimensions out of `width`, uniformly without replacement.
pub fn sample_dims(width: usize, count: usize, rng: &mut impl Rng, layer: usize, draw: u64) -> Result<DimSample> {
    if count > width {
        return Err(Error::Regularizer(format!(
            "cannot sample {count} Hessian dimensions from a layer of width {width}"
        )));
    }
    let dims = index::sample(rng, width, count).into_vec();
    Ok(DimSample { layer, dims, draw })
}

/// Mean squared Jacobian estimate of every layer of one trace.
pub fn layer_profile(g: &mut Graph, trace: &ForwardTrace, sampler: &mut ProjectionSampler, p: usize) -> Result<Vec<f64>> {
    (0..trace.num_layers())
        .map(|k| estimators::jacobian_frob_sq(g, trace, k, sampler, p).map(|e| e.value))
        .collect()
}

/// Per-layer Jacobian norms over a calibration set: the square root of the
/// instance-averaged squared-norm estimates.
pub fn profile_smoothness(
    checkpoint: &Checkpoint,
    batch: &[Vec<usize>],
    p: usize,
    mode: ProjectionMode,
    calibration_id: &str,
) -> Result<SmoothnessProfile> {
    if batch.is_empty() {
        return Err(Error::Regularizer("calibration batch is empty".into()));
    }
    let mut sums = vec![0.0; checkpoint.config.num_layers];
    for (c, chunk) in batch.chunks(PROFILE_CHUNK).enumerate() {
        let mut g = Graph::new();
        let trace = checkpoint.forward_batch(&mut g, chunk, None)?;
        let mut sampler = ProjectionSampler::new(checkpoint.config.seed, &[rng::tag::PROFILE, c as u64], mode);
        for (s, v) in sums.iter_mut().zip(layer_profile(&mut g, &trace, &mut sampler, p)?) {
            *s += v * chunk.len() as f64;
        }
    }
    let norms = sums.iter().map(|s| (s / batch.len() as f64).sqrt()).collect();
    Ok(SmoothnessProfile { norms, calibration_id: calibration_id.to_string(), projections: p })
}

/// Per-layer Jacobian norms from exact Jacobians: `sqrt(mean_b ‖J_b⁽ᵏ⁾‖²_F)`.
pub fn exact_profile(checkpoint: &Checkpoint, batch: &[Vec<usize>]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Regularizer("calibration batch is empty".into()));
    }
    let mut sums = vec![0.0; checkpoint.config.num_layers];
    for chunk in batch.chunks(PROFILE_CHUNK) {
        let mut g = Graph::new();
        let trace = checkpoint.forward_batch(&mut g, chunk, None)?;
        for (k, s) in sums.iter_mut().enumerate() {
            let per = estimators::exact_jacobian_frob_sq_of(&mut g, trace.layers[k], trace.input, chunk.len())?;
            *s += per.iter().sum::<f64>();
        }
    }
    Ok(sums.iter().map(|s| (s / batch.len() as f64).sqrt()).collect())
}

/// Per-layer factors for a profile `j`.
pub fn allocate_lambdas(profile: &SmoothnessProfile, xi: f64, strategy: Strategy) -> Result<Vec<f64>> {
    let j = &profile.norms;
    let k = j.len();
    if k == 0 {
        return Err(Error::Regularizer("profile has no layers".into()));
    }
    if !(xi > 0.0) {
        return Err(Error::Regularizer(format!("xi must be positive, got {xi}")));
    }
    if let Some(bad) = j.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Regularizer(format!("profile entries must be non-negative, got {bad}")));
    }
    let scaled = |w: Vec<f64>| {
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| xi * v / total).collect()
    };
    Ok(match strategy {
        Strategy::Uniform => vec![xi / k as f64; k],
        Strategy::PenultimateOnly => {
            let mut l = vec![0.0; k];
            l[k - 1] = xi;
            l
        }
        Strategy::SoftmaxBaseSmoothness => {
            let lo = j.iter().cloned().fold(f64::INFINITY, f64::min);
            scaled(j.iter().map(|v| (lo - v).exp()).collect())
        }
        Strategy::NormalizedBaseSmoothness => {
            if j.contains(&0.0) {
                return Err(Error::Regularizer(
                    "normalized-base-smoothness divides by the layer norms, and one of them is zero".into(),
                ));
            }
            scaled(j.iter().map(|v| 1.0 / v).collect())
        }
        Strategy::InverseBaseSmoothness => {
            if j.iter().all(|&v| v == 0.0) {
                return Err(Error::Regularizer("inverse-base-smoothness needs a nonzero profile".into()));
            }
            scaled(j.clone())
        }
    })
}

/// A differentiable penalty together with the dimensions it used.
#[derive(Debug, Clone)]
pub struct Omega {
    pub value: Var,
    pub dims: Vec<DimSample>,
}

/// Representations the penalty acts on. The final slot moves to the logits
/// when all weight sits on the last layer.
pub fn penalty_targets(trace: &ForwardTrace, strategy: Strategy) -> Vec<Var> {
    let mut t = trace.layers.clone();
    if strategy == Strategy::PenultimateOnly {
        if let Some(last) = t.last_mut() {
            *last = trace.logits;
        }
    }
    t
}

fn term(g: &mut Graph, est: Var, form: PenaltyForm) -> Result<Var> {
    match form {
        PenaltyForm::Squared => Ok(est),
        PenaltyForm::Root => {
            let e = g.add_scalar(est, ROOT_EPS)?;
            g.sqrt(e)
        }
    }
}

/// The penalty for one batch. Each layer draws one dimension subset, shared
/// by all its Hessian terms. `hessian_dims` is capped at each layer's width.
pub fn omega(
    g: &mut Graph,
    trace: &ForwardTrace,
    config: &RegularizerConfig,
    weights: &LayerWeights,
    sampler: &mut ProjectionSampler,
    dims_rng: &mut impl Rng,
    draw: u64,
) -> Result<Omega> {
    config.validate()?;
    let targets = penalty_targets(trace, weights.strategy);
    if weights.jacobian.len() != targets.len() || weights.hessian.len() != targets.len() {
        return Err(Error::Regularizer(format!(
            "{} layers but {} lambda factors",
            targets.len(),
            weights.jacobian.len()
        )));
    }
    let (x, b, p) = (trace.input, trace.batch, config.projections);
    let mut total: Option<Var> = None;
    let mut dims = Vec::new();
    for (k, &z) in targets.iter().enumerate() {
        let (lj, lh) = (weights.jacobian[k], weights.hessian[k]);
        let mut layer: Option<Var> = None;
        if lj != 0.0 {
            let j = estimators::jacobian_term(g, z, x, b, sampler, p)?;
            let j = term(g, j, config.form)?;
            layer = Some(g.scale(j, lj)?);
        }
        if lh != 0.0 && config.hessian_dims > 0 {
            let width = g.shape(z)[1];
            let sample = sample_dims(width, config.hessian_dims.min(width), dims_rng, k, draw)?;
            for &d in &sample.dims {
                let h = estimators::hessian_term(g, z, x, b, d, sampler, p)?;
                let h = term(g, h, config.form)?;
                let h = g.scale(h, lh)?;
                layer = Some(match layer {
                    Some(acc) => g.add(acc, h)?,
                    None => h,
                });
            }
            dims.push(sample);
        }
        if let Some(l) = layer {
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
    }
    let value = match total {
        Some(v) => v,
        None => g.constant(crate::autodiff::Tensor::scalar(0.0)),
    };
    Ok(Omega { value, dims })
}
