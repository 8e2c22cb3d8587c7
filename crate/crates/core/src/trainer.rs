//! Training loops for the unregularized model and every penalized variant.
//!
//! `*-train` methods add the penalty to the task loss on each labeled batch.
//! `*-val` methods alternate a labeled pass on the task loss with a pass that
//! minimizes the penalty alone on unlabeled inputs.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{Example, SplitSet, Target, TaskSpec};
use crate::error::{Error, Result};
use crate::estimators::{self, ProjectionSampler};
use crate::model::{Checkpoint, ForwardTrace, ModelConfig, TaskHead};
use crate::regularizer::{self, LayerWeights, RegularizerConfig, SmoothnessProfile};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Base,
    JacobianTrain,
    JacobianVal,
    CrossHolderTrain,
    CrossHolderVal,
    JachessTrain,
    JachessVal,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Base,
        Method::JacobianTrain,
        Method::JacobianVal,
        Method::CrossHolderTrain,
        Method::CrossHolderVal,
        Method::JachessTrain,
        Method::JachessVal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::JacobianTrain => "jacobian-train",
            Method::JacobianVal => "jacobian-val",
            Method::CrossHolderTrain => "cross-holder-train",
            Method::CrossHolderVal => "cross-holder-val",
            Method::JachessTrain => "jachess-train",
            Method::JachessVal => "jachess-val",
        }
    }

    pub fn is_val(self) -> bool {
        matches!(self, Method::JacobianVal | Method::CrossHolderVal | Method::JachessVal)
    }

    pub fn penalty(self) -> Option<Penalty> {
        match self {
            Method::Base => None,
            Method::JacobianTrain | Method::JacobianVal => Some(Penalty::LogitJacobian),
            Method::CrossHolderTrain | Method::CrossHolderVal => Some(Penalty::CrossHolder),
            Method::JachessTrain | Method::JachessVal => Some(Penalty::Jachess),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    LogitJacobian,
    CrossHolder,
    Jachess,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Ordering of the labeled and unlabeled passes of `*-val` methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ValSchedule {
    /// Labeled pass then penalty pass, every epoch.
    #[default]
    Alternate,
    /// All labeled epochs first, then as many penalty passes.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Penalty budget; the learning rate when absent.
    pub xi: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub max_train_instances: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub val_schedule: ValSchedule,
    /// Calibration instances and projections for the starting profile.
    pub profile_instances: usize,
    pub profile_projections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Base,
            learning_rate: 3e-4,
            xi: None,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            max_train_instances: 10_000,
            optimizer: Optimizer::default(),
            clip_norm: Some(1.0),
            val_schedule: ValSchedule::default(),
            profile_instances: 64,
            profile_projections: 16,
        }
    }
}

impl TrainConfig {
    pub fn xi(&self) -> f64 {
        self.xi.unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Training(m));
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning-rate must be positive, got {}", self.learning_rate));
        }
        if !(self.xi() >= 0.0) {
            return fail(format!("xi must be non-negative, got {}", self.xi()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.max_train_instances == 0 {
            return fail("epochs, batch-size and max-train-instances must be positive".into());
        }
        if self.profile_instances == 0 || self.profile_projections == 0 {
            return fail("profile-instances and profile-projections must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    /// Mean task loss per epoch.
    pub task_loss: Vec<f64>,
    /// Mean penalty value per epoch.
    pub omega: Vec<f64>,
    pub clipped_steps: usize,
    pub profile: Option<SmoothnessProfile>,
    pub weights: Option<LayerWeights>,
    /// Kept out of the serialized record so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

/// `ξ·‖∂logits/∂x‖²` estimate.
pub fn jacobian_penalty(g: &mut Graph, trace: &ForwardTrace, xi: f64, sampler: &mut ProjectionSampler, p: usize) -> Result<Var> {
    if xi == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let j = estimators::jacobian_term(g, trace.logits, trace.input, trace.batch, sampler, p)?;
    g.scale(j, xi)
}

/// `ξ·(‖∂logits/∂x‖² + Σ_c ‖H_c‖²)` over every logit dimension `c`.
pub fn cross_holder_penalty(
    g: &mut Graph,
    trace: &ForwardTrace,
    head: TaskHead,
    xi: f64,
    sampler: &mut ProjectionSampler,
    p: usize,
) -> Result<Var> {
    if !head.is_classification() {
        return Err(Error::Training("the cross-holder penalty needs a classification head".into()));
    }
    if xi == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let (z, x, b) = (trace.logits, trace.input, trace.batch);
    let mut total = estimators::jacobian_term(g, z, x, b, sampler, p)?;
    for c in 0..head.outputs() {
        let h = estimators::hessian_term(g, z, x, b, c, sampler, p)?;
        total = g.add(total, h)?;
    }
    g.scale(total, xi)
}

/// Model config for a task: its head, the run seed, and enough positions.
pub fn model_config_for(base: &ModelConfig, task: &TaskSpec, seed: u64) -> Result<ModelConfig> {
    let cfg = ModelConfig { head: task.kind.head(), seed, ..base.clone() };
    if cfg.max_seq_len < task.max_input_len() {
        return Err(Error::Config(format!(
            "max-seq-len {} is shorter than the {} tokens task {} can produce",
            cfg.max_seq_len,
            task.max_input_len(),
            task.name
        )));
    }
    if cfg.vocab_size < task.vocab_size {
        return Err(Error::Config(format!(
            "vocab-size {} is smaller than the task vocabulary {}",
            cfg.vocab_size, task.vocab_size
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

struct OptState {
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptState {
    fn new(ck: &Checkpoint) -> Self {
        let zeros = || ck.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    fn apply(&mut self, ck: &mut Checkpoint, grads: &[Tensor], opt: Optimizer, lr: f64) {
        self.step += 1;
        for (i, ((_, p), g)) in ck.params.iter_mut().zip(grads).enumerate() {
            match opt {
                Optimizer::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (((w, d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        ck.step += 1;
    }
}

/// Scales `grads` to global norm `max` when above it. Returns whether it did.
fn clip(grads: &mut [Tensor], max: Option<f64>) -> bool {
    let Some(max) = max else { return false };
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm <= max || !norm.is_finite() {
        return false;
    }
    let s = max / norm;
    for g in grads {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    true
}

fn task_loss(g: &mut Graph, trace: &ForwardTrace, head: TaskHead, targets: &[Target]) -> Result<Var> {
    match head {
        TaskHead::Classification { classes } => {
            let ids = targets
                .iter()
                .map(|t| match t.class() {
                    Some(c) if c < classes => Ok(c),
                    _ => Err(Error::Training(format!("target {t:?} is not a class below {classes}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            g.cross_entropy(trace.logits, &ids)
        }
        TaskHead::Regression => {
            let y = Tensor::new(vec![targets.len(), 1], targets.iter().map(|t| t.value()).collect())?;
            let y = g.constant(y);
            g.mse(trace.logits, y)
        }
    }
}

/// Penalty machinery resolved once per run.
struct PenaltyPlan {
    kind: Penalty,
    xi: f64,
    reg: RegularizerConfig,
    weights: Option<LayerWeights>,
}

impl PenaltyPlan {
    fn is_zero(&self) -> bool {
        match self.kind {
            Penalty::Jachess => self.weights.as_ref().is_none_or(LayerWeights::is_zero),
            _ => self.xi == 0.0,
        }
    }

    fn build(&self, g: &mut Graph, trace: &ForwardTrace, head: TaskHead, seed: u64, counter: [u64; 3]) -> Result<Var> {
        let mut sampler = self.reg.sampler(seed, &counter);
        let p = self.reg.projections;
        match self.kind {
            Penalty::LogitJacobian => jacobian_penalty(g, trace, self.xi, &mut sampler, p),
            Penalty::CrossHolder => cross_holder_penalty(g, trace, head, self.xi, &mut sampler, p),
            Penalty::Jachess => {
                let weights = self.weights.as_ref().expect("weights resolved for jachess");
                let mut path = vec![rng::tag::DIMS];
                path.extend_from_slice(&counter);
                let mut dims = rng::stream(seed, &path);
                Ok(regularizer::omega(g, trace, &self.reg, weights, &mut sampler, &mut dims, counter[1])?.value)
            }
        }
    }
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    ck: Checkpoint,
    opt: OptState,
    plan: Option<PenaltyPlan>,
    clipped: usize,
}

/// One optimizer step's inputs.
enum StepKind<'b> {
    Labeled(&'b [Target]),
    PenaltyOnly,
}

impl Run<'_> {
    /// Returns (task loss, penalty value).
    fn step(&mut self, batch: &[Vec<usize>], kind: StepKind, counter: [u64; 3]) -> Result<(f64, f64)> {
        let head = self.ck.config.head;
        let mut g = Graph::new();
        let model = self.ck.bind(&mut g, true);
        let trace = model.forward(&mut g, batch, None)?;
        let (task, with_penalty) = match kind {
            StepKind::Labeled(t) => (Some(task_loss(&mut g, &trace, head, t)?), !self.cfg.method.is_val()),
            StepKind::PenaltyOnly => (None, true),
        };
        let penalty = match &self.plan {
            Some(plan) if with_penalty && !plan.is_zero() => {
                Some(plan.build(&mut g, &trace, head, self.cfg.seed, counter)?)
            }
            _ => None,
        };
        let (loss, tv, pv) = match (task, penalty) {
            (Some(t), Some(p)) => (g.add(t, p)?, g.value(t).item(), g.value(p).item()),
            (Some(t), None) => (t, g.value(t).item(), 0.0),
            (None, Some(p)) => (p, 0.0, g.value(p).item()),
            (None, None) => return Ok((0.0, 0.0)),
        };
        if !g.value(loss).item().is_finite() {
            return Err(Error::Training(format!("non-finite loss at step {}", self.ck.step)));
        }
        let mut grads = g.backward(loss, model.param_vars(), false)?.into_tensors();
        if clip(&mut grads, self.cfg.clip_norm) {
            self.clipped += 1;
            log::debug!("step {}: gradient clipped to norm {:?}", self.ck.step, self.cfg.clip_norm);
        }
        self.opt.apply(&mut self.ck, &grads, self.cfg.optimizer, self.cfg.learning_rate);
        Ok((tv, pv))
    }

    fn order(&self, n: usize, epoch: usize, phase: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng::stream(self.cfg.seed, &[rng::tag::SHUFFLE, epoch as u64, phase]));
        idx
    }

    fn labeled_pass(&mut self, data: &[Example], epoch: usize) -> Result<(f64, f64)> {
        let order = self.order(data.len(), epoch, 0);
        let (mut tl, mut om) = (0.0, 0.0);
        let chunks: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for (b, chunk) in chunks.iter().enumerate() {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].tokens()).collect();
            let targets = chunk
                .iter()
                .map(|&i| data[i].target.ok_or_else(|| Error::Training("labeled example without target".into())))
                .collect::<Result<Vec<_>>>()?;
            let (t, o) = self.step(&tokens, StepKind::Labeled(&targets), [epoch as u64, b as u64, 0])?;
            tl += t * chunk.len() as f64;
            om += o * chunk.len() as f64;
        }
        Ok((tl / data.len() as f64, om / data.len() as f64))
    }

    fn penalty_pass(&mut self, data: &[Example], epoch: usize) -> Result<f64> {
        if self.plan.as_ref().is_none_or(PenaltyPlan::is_zero) {
            return Ok(0.0);
        }
        let order = self.order(data.len(), epoch, 1);
        let mut om = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        for (b, chunk) in chunks.iter().enumerate() {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|&i| data[i].tokens()).collect();
            let (_, o) = self.step(&tokens, StepKind::PenaltyOnly, [epoch as u64, b as u64, 1])?;
            om += o * chunk.len() as f64;
        }
        Ok(om / data.len() as f64)
    }
}

/// Trains one model from its seeded initialization.
pub fn train(
    cfg: &TrainConfig,
    reg: &RegularizerConfig,
    task: &TaskSpec,
    labeled: &[Example],
    unlabeled: Option<&[Example]>,
    model: &ModelConfig,
) -> Result<RunRecord> {
    let started = Instant::now();
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Training("no labeled training data".into()));
    }
    let unlabeled = match (cfg.method.is_val(), unlabeled) {
        (true, Some(u)) if !u.is_empty() => u,
        (true, _) => {
            return Err(Error::Training(format!(
                "method {} needs a non-empty unlabeled split",
                cfg.method.name()
            )))
        }
        (false, _) => &[][..],
    };
    let labeled = &labeled[..labeled.len().min(cfg.max_train_instances)];
    let model = model_config_for(model, task, cfg.seed)?;
    let ck = Checkpoint::init(&model)?;

    let xi = cfg.xi();
    let reg = RegularizerConfig { xi, ..reg.clone() };
    let mut profile = None;
    let plan = match cfg.method.penalty() {
        None => None,
        Some(Penalty::Jachess) => {
            let source = if unlabeled.is_empty() { labeled } else { unlabeled };
            let cal: Vec<Vec<usize>> = source.iter().take(cfg.profile_instances).map(Example::tokens).collect();
            let p = regularizer::profile_smoothness(&ck, &cal, cfg.profile_projections, reg.projection_mode, &task.name)?;
            let weights = if xi == 0.0 && reg.lambdas.is_none() {
                LayerWeights::tied(vec![0.0; model.num_layers], reg.strategy)
            } else {
                reg.weights(&p)?
            };
            profile = Some(p);
            Some(PenaltyPlan { kind: Penalty::Jachess, xi, reg, weights: Some(weights) })
        }
        Some(kind) => {
            reg.validate()?;
            Some(PenaltyPlan { kind, xi, reg, weights: None })
        }
    };

    let mut run = Run { cfg, opt: OptState::new(&ck), ck, plan, clipped: 0 };
    let mut task_loss = Vec::with_capacity(cfg.epochs);
    let mut omega = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (tl, mut om) = run.labeled_pass(labeled, epoch)?;
        if cfg.method.is_val() && cfg.val_schedule == ValSchedule::Alternate {
            om = run.penalty_pass(unlabeled, epoch)?;
        }
        task_loss.push(tl);
        omega.push(om);
        log::info!("{} seed {} epoch {epoch}: loss {tl:.5} penalty {om:.5}", cfg.method.name(), cfg.seed);
    }
    if cfg.method.is_val() && cfg.val_schedule == ValSchedule::Sequential {
        for (epoch, om) in omega.iter_mut().enumerate() {
            *om = run.penalty_pass(unlabeled, cfg.epochs + epoch)?;
        }
    }
    if run.clipped > 0 {
        log::info!("{} seed {}: {} step(s) clipped", cfg.method.name(), cfg.seed, run.clipped);
    }
    Ok(RunRecord {
        task: task.name.clone(),
        method: cfg.method,
        seed: cfg.seed,
        task_loss,
        omega,
        clipped_steps: run.clipped,
        profile,
        weights: run.plan.and_then(|p| p.weights),
        wall_time_secs: started.elapsed().as_secs_f64(),
        checkpoint: Some(run.ck),
    })
}

/// Every method × seed × task, in that nesting order (task outermost).
pub fn run_suite(
    methods: &[Method],
    seeds: &[u64],
    tasks: &[(TaskSpec, SplitSet)],
    base: &TrainConfig,
    reg: &RegularizerConfig,
    model: &ModelConfig,
) -> Result<Vec<RunRecord>> {
    if seeds.is_empty() {
        return Err(Error::Training("at least one seed is required".into()));
    }
    let mut out = Vec::with_capacity(methods.len() * seeds.len() * tasks.len());
    for (spec, data) in tasks {
        for &method in methods {
            for &seed in seeds {
                let cfg = TrainConfig { method, seed, ..base.clone() };
                out.push(train(&cfg, reg, spec, &data.train, Some(&data.unlabeled), model)?);
            }
        }
    }
    Ok(out)
}
