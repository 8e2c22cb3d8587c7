//! Task metrics, probability calibration and robustness measurements.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{Example, Metric, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{is_special, Checkpoint, FIRST_TOKEN};
use crate::rng;

pub const CALIBRATION_BINS: usize = 8;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Corruption rates evaluated by default.
pub const DEFAULT_CORRUPTION_RATES: [f64; 3] = [0.10, 0.15, 0.20];
/// Instances per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

/// `x + δ·v` with `v` drawn i.i.d. standard normal.
pub fn perturb_embeddings(x: &Tensor, delta: f64, r: &mut impl Rng) -> Tensor {
    let mut out = x.clone();
    if delta != 0.0 {
        for v in out.data_mut() {
            *v += delta * r.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Replaces each ordinary token with probability `rate` by a uniformly drawn
/// different ordinary token. Specials are never touched.
pub fn corrupt_tokens(tokens: &[usize], rate: f64, r: &mut impl Rng, vocab_size: usize) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Evaluation(format!("corruption rate {rate} outside [0, 1]")));
    }
    let ordinary = vocab_size.saturating_sub(FIRST_TOKEN);
    Ok(tokens
        .iter()
        .map(|&t| {
            if is_special(t) || ordinary < 2 || !r.random_bool(rate) {
                return t;
            }
            // Uniform over the other ordinary tokens.
            let pick = FIRST_TOKEN + r.random_range(0..ordinary - 1);
            if pick >= t {
                pick + 1
            } else {
                pick
            }
        })
        .collect())
}

/// Model outputs for a list of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    /// Predicted class, or the regression output.
    pub outputs: Vec<f64>,
    /// Class probabilities for classification heads.
    pub probs: Option<Vec<Vec<f64>>>,
}

impl Predictions {
    /// Probability of class 1 per instance.
    pub fn positive_probs(&self) -> Option<Vec<f64>> {
        self.probs.as_ref().map(|p| p.iter().map(|row| row.get(1).copied().unwrap_or(0.0)).collect())
    }
}

/// Forward passes over `examples`. With `noise = Some((δ, seed))` every
/// instance's embeddings get fresh Gaussian noise from its own substream.
pub fn predict(ck: &Checkpoint, examples: &[Vec<usize>], noise: Option<(f64, u64)>) -> Result<Predictions> {
    let d = ck.config.embed_dim;
    let classification = ck.config.head.is_classification();
    let mut outputs = Vec::with_capacity(examples.len());
    let mut probs = Vec::new();
    for (c, chunk) in examples.chunks(EVAL_CHUNK).enumerate() {
        let t = chunk.iter().map(Vec::len).max().unwrap_or(0);
        let noise_tensor = match noise {
            Some((delta, seed)) if delta != 0.0 => {
                let mut data = vec![0.0; chunk.len() * t * d];
                for (i, seq) in chunk.iter().enumerate() {
                    let instance = (c * EVAL_CHUNK + i) as u64;
                    let mut r = rng::stream(seed, &[rng::tag::PERTURB, instance]);
                    let block = Tensor::zeros(&[seq.len() * d]);
                    let block = perturb_embeddings(&block, delta, &mut r);
                    data[i * t * d..i * t * d + seq.len() * d].copy_from_slice(block.data());
                }
                Some(Tensor::new(vec![chunk.len() * t, d], data)?)
            }
            _ => None,
        };
        let mut g = Graph::new();
        let trace = g.with_grad(false, |g| ck.forward_batch(g, chunk, noise_tensor.as_ref()))?;
        let logits = g.value(trace.logits);
        for row in logits.rows() {
            if classification {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|v| v / s).collect();
                outputs.push(argmax(&p) as f64);
                probs.push(p);
            } else {
                outputs.push(row[0]);
            }
        }
    }
    Ok(Predictions { outputs, probs: classification.then_some(probs) })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    /// Set when the metric was undefined (e.g. constant predictions) and
    /// reported as 0.
    pub degenerate: bool,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Evaluation(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Evaluation("no predictions to score".into()));
    }
    Ok(())
}

pub fn task_score(predictions: &[f64], labels: &[f64], metric: Metric) -> Result<Score> {
    check_lengths(predictions.len(), labels.len())?;
    let ok = |value| Ok(Score { value, degenerate: false });
    match metric {
        Metric::Accuracy => ok(accuracy(predictions, labels)),
        Metric::F1 => {
            let c = Confusion::new(predictions, labels);
            if c.tp == 0.0 {
                return Ok(Score { value: 0.0, degenerate: c.tp + c.fp == 0.0 || c.tp + c.fn_ == 0.0 });
            }
            ok(2.0 * c.tp / (2.0 * c.tp + c.fp + c.fn_))
        }
        Metric::Matthews => {
            let c = Confusion::new(predictions, labels);
            let den = ((c.tp + c.fp) * (c.tp + c.fn_) * (c.tn + c.fp) * (c.tn + c.fn_)).sqrt();
            if den == 0.0 {
                return Ok(Score { value: 0.0, degenerate: true });
            }
            ok((c.tp * c.tn - c.fp * c.fn_) / den)
        }
        Metric::Spearman => {
            let (rp, rl) = (average_ranks(predictions), average_ranks(labels));
            match pearson(&rp, &rl) {
                Some(v) => ok(v),
                None => Ok(Score { value: 0.0, degenerate: true }),
            }
        }
    }
}

pub fn accuracy(predictions: &[f64], labels: &[f64]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

struct Confusion {
    tp: f64,
    fp: f64,
    tn: f64,
    fn_: f64,
}

impl Confusion {
    fn new(p: &[f64], l: &[f64]) -> Self {
        let mut c = Confusion { tp: 0.0, fp: 0.0, tn: 0.0, fn_: 0.0 };
        for (&p, &l) in p.iter().zip(l) {
            match (p == 1.0, l == 1.0) {
                (true, true) => c.tp += 1.0,
                (true, false) => c.fp += 1.0,
                (false, false) => c.tn += 1.0,
                (false, true) => c.fn_ += 1.0,
            }
        }
        c
    }
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Evaluation(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Mean of `(p − y)²` over positive-class probabilities and 0/1 labels.
pub fn brier(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    check_probs(probs)?;
    Ok(probs.iter().zip(labels).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_prob: Option<f64>,
    pub frequency: Option<f64>,
}

impl CalibrationBin {
    pub fn center(&self) -> f64 {
        (self.lower + self.upper) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub brier: f64,
}

pub fn calibration_bin(p: f64) -> usize {
    ((p * CALIBRATION_BINS as f64) as usize).min(CALIBRATION_BINS - 1)
}

/// Reliability data over eight uniform bins, the last one closed at 1.
pub fn calibration_report(probs: &[f64], labels: &[f64]) -> Result<CalibrationReport> {
    check_lengths(probs.len(), labels.len())?;
    check_probs(probs)?;
    let mut sum_p = [0.0; CALIBRATION_BINS];
    let mut sum_y = [0.0; CALIBRATION_BINS];
    let mut count = [0usize; CALIBRATION_BINS];
    for (&p, &y) in probs.iter().zip(labels) {
        let b = calibration_bin(p);
        sum_p[b] += p;
        sum_y[b] += y;
        count[b] += 1;
    }
    let n = probs.len() as f64;
    let width = 1.0 / CALIBRATION_BINS as f64;
    let mut ece = 0.0;
    let bins = (0..CALIBRATION_BINS)
        .map(|b| {
            let (mean_prob, frequency) = if count[b] == 0 {
                (None, None)
            } else {
                let c = count[b] as f64;
                let (mp, fr) = (sum_p[b] / c, sum_y[b] / c);
                ece += c / n * (fr - mp).abs();
                (Some(mp), Some(fr))
            };
            CalibrationBin { lower: b as f64 * width, upper: (b + 1) as f64 * width, count: count[b], mean_prob, frequency }
        })
        .collect();
    Ok(CalibrationReport { bins, ece, brier: brier(probs, labels)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub axis: Vec<f64>,
    pub mean: Vec<f64>,
    /// `per_seed[level][seed]`.
    pub per_seed: Vec<Vec<f64>>,
}

fn check_axis(axis: &[f64]) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::Evaluation("empty sweep axis".into()));
    }
    if axis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Evaluation(format!("sweep axis {axis:?} is not strictly increasing")));
    }
    Ok(())
}

fn labels(examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| e.target.map(|t| t.value()).ok_or_else(|| Error::Evaluation("example without target".into())))
        .collect()
}

fn inputs(examples: &[Example]) -> Vec<Vec<usize>> {
    examples.iter().map(Example::tokens).collect()
}

fn score_of(p: &Predictions, labels: &[f64], metric: Metric) -> Result<f64> {
    Ok(task_score(&p.outputs, labels, metric)?.value)
}

fn curve(axis: &[f64], seeds: &[u64], mut at: impl FnMut(f64, u64) -> Result<f64>) -> Result<RobustnessCurve> {
    check_axis(axis)?;
    if seeds.is_empty() {
        return Err(Error::Evaluation("at least one seed is required".into()));
    }
    let mut per_seed = Vec::with_capacity(axis.len());
    for &level in axis {
        per_seed.push(seeds.iter().map(|&s| at(level, s)).collect::<Result<Vec<_>>>()?);
    }
    let mean = per_seed.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    Ok(RobustnessCurve { axis: axis.to_vec(), mean, per_seed })
}

/// Task score under Gaussian embedding noise of each magnitude.
pub fn perturbation_sweep(
    ck: &Checkpoint,
    examples: &[Example],
    metric: Metric,
    deltas: &[f64],
    seeds: &[u64],
) -> Result<RobustnessCurve> {
    if let Some(d) = deltas.iter().find(|d| **d < 0.0) {
        return Err(Error::Evaluation(format!("negative perturbation size {d}")));
    }
    let y = labels(examples)?;
    let x = inputs(examples);
    curve(deltas, seeds, |delta, seed| score_of(&predict(ck, &x, Some((delta, seed)))?, &y, metric))
}

/// Corrupts the test inputs at each rate (one draw per seed) and scores.
pub fn corrupt_examples(examples: &[Example], rate: f64, seed: u64, vocab_size: usize) -> Result<Vec<Example>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut r = rng::stream(seed, &[rng::tag::CORRUPT, i as u64]);
            let tokens_a = corrupt_tokens(&e.tokens_a, rate, &mut r, vocab_size)?;
            let tokens_b = e.tokens_b.as_ref().map(|b| corrupt_tokens(b, rate, &mut r, vocab_size)).transpose()?;
            Ok(Example { tokens_a, tokens_b, target: e.target })
        })
        .collect()
}

pub fn corruption_sweep(
    ck: &Checkpoint,
    examples: &[Example],
    metric: Metric,
    rates: &[f64],
    seeds: &[u64],
) -> Result<RobustnessCurve> {
    let y = labels(examples)?;
    curve(rates, seeds, |rate, seed| {
        let corrupted = corrupt_examples(examples, rate, seed, ck.config.vocab_size)?;
        score_of(&predict(ck, &inputs(&corrupted), None)?, &y, metric)
    })
}

/// Clean-data measurements of one checkpoint on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanEval {
    pub score: Score,
    pub accuracy: Option<f64>,
    pub brier: Option<f64>,
    pub calibration: Option<CalibrationReport>,
}

pub fn evaluate(ck: &Checkpoint, examples: &[Example], task: &TaskSpec) -> Result<CleanEval> {
    evaluate_noisy(ck, examples, task, None)
}

/// [`evaluate`] with optional embedding noise `(delta, seed)`.
pub fn evaluate_noisy(
    ck: &Checkpoint,
    examples: &[Example],
    task: &TaskSpec,
    noise: Option<(f64, u64)>,
) -> Result<CleanEval> {
    let y = labels(examples)?;
    let p = predict(ck, &inputs(examples), noise)?;
    let score = task_score(&p.outputs, &y, task.metric)?;
    let accuracy = (task.kind != TaskKind::Regression).then(|| accuracy(&p.outputs, &y));
    let calibration = match (task.kind.is_binary(), p.positive_probs()) {
        (true, Some(pp)) => Some(calibration_report(&pp, &y)?),
        _ => None,
    };
    Ok(CleanEval { score, accuracy, brier: calibration.as_ref().map(|c| c.brier), calibration })
}

/// One line of a report: a method × seed × task at one sweep level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub task: String,
    pub method: String,
    pub seed: u64,
    /// `clean`, `perturbation` or `corruption`.
    pub sweep: String,
    pub level: f64,
    pub metric: Metric,
    pub score: f64,
    pub accuracy: Option<f64>,
    pub brier: Option<f64>,
    pub ece: Option<f64>,
}

/// Seed-averaged [`EvalRow`]s of one task × method × sweep level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub sweep: String,
    pub level: f64,
    pub metric: Metric,
    pub seeds: usize,
    pub score: f64,
    pub accuracy: Option<f64>,
    pub brier: Option<f64>,
    pub ece: Option<f64>,
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = v.iter().copied().collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups rows by task, method, sweep and level, in first-seen order.
pub fn summarize(rows: &[EvalRow]) -> Vec<SummaryRow> {
    let mut groups: Vec<Vec<&EvalRow>> = Vec::new();
    for r in rows {
        let same = |g: &&mut Vec<&EvalRow>| {
            let h = g[0];
            h.task == r.task && h.method == r.method && h.sweep == r.sweep && h.level.to_bits() == r.level.to_bits()
        };
        match groups.iter_mut().find(same) {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let n = g.len();
            let col = |f: fn(&EvalRow) -> Option<f64>| mean_opt(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                task: g[0].task.clone(),
                method: g[0].method.clone(),
                sweep: g[0].sweep.clone(),
                level: g[0].level,
                metric: g[0].metric,
                seeds: n,
                score: g.iter().map(|r| r.score).sum::<f64>() / n as f64,
                accuracy: col(|r| r.accuracy),
                brier: col(|r| r.brier),
                ece: col(|r| r.ece),
            }
        })
        .collect()
}

/// Reliability-diagram rows for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub bin_center: f64,
    pub mean_prob: Option<f64>,
    pub frequency: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: Vec<EvalRow>,
    pub reliability: Vec<ReliabilityRow>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self { schema_version: REPORT_SCHEMA_VERSION, ..Default::default() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn rows_csv(&self) -> Result<String> {
        to_csv(&self.rows)
    }

    pub fn reliability_csv(&self) -> Result<String> {
        to_csv(&self.reliability)
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Evaluation(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Evaluation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
