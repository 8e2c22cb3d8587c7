//! Synthetic sequence tasks and small tab-separated datasets.
//!
//! Every generator draws ordinary tokens from `FIRST_TOKEN..vocab_size`; a
//! handful of the lowest ordinary ids act as marker tokens.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{join_pair, TaskHead, FIRST_TOKEN};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Target {
    Class(usize),
    Score(f64),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Score(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Target::Class(c) => c as f64,
            Target::Score(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens_a: Vec<usize>,
    pub tokens_b: Option<Vec<usize>>,
    pub target: Option<Target>,
}

impl Example {
    /// Model input: `a`, or `a ⊕ EOS ⊕ b` for pairs.
    pub fn tokens(&self) -> Vec<usize> {
        match &self.tokens_b {
            Some(b) => join_pair(&self.tokens_a, b),
            None => self.tokens_a.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleBinary,
    PairBinary,
    MultiClass { classes: usize },
    Regression,
}

impl TaskKind {
    pub fn head(self) -> TaskHead {
        match self {
            TaskKind::SingleBinary | TaskKind::PairBinary => TaskHead::Classification { classes: 2 },
            TaskKind::MultiClass { classes } => TaskHead::Classification { classes },
            TaskKind::Regression => TaskHead::Regression,
        }
    }

    pub fn is_pair(self) -> bool {
        matches!(self, TaskKind::PairBinary)
    }

    pub fn is_binary(self) -> bool {
        matches!(self, TaskKind::SingleBinary | TaskKind::PairBinary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    F1,
    Matthews,
    Spearman,
}

impl Metric {
    pub fn compatible(self, kind: TaskKind) -> bool {
        match self {
            Metric::Accuracy => kind != TaskKind::Regression,
            Metric::F1 | Metric::Matthews => kind.is_binary(),
            Metric::Spearman => kind == TaskKind::Regression,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Binary: which of two marker tokens occurs more often.
    TokenMajority,
    /// Binary: whether a fixed trigram occurs.
    PatternContainment,
    /// Pair binary: token-set Jaccard overlap above one half.
    PairOverlap,
    /// Three classes: which of three marker tokens occurs most often.
    ThreeWayCount,
    /// Pair regression: share of second-part tokens that occur in the first.
    OverlapScore,
}

impl Generator {
    pub const ALL: [Generator; 5] = [
        Generator::TokenMajority,
        Generator::PatternContainment,
        Generator::PairOverlap,
        Generator::ThreeWayCount,
        Generator::OverlapScore,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Generator::TokenMajority => "token-majority",
            Generator::PatternContainment => "pattern-containment",
            Generator::PairOverlap => "pair-overlap",
            Generator::ThreeWayCount => "three-way-count",
            Generator::OverlapScore => "overlap-score",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::Data(format!("unknown task generator `{name}`")))
    }

    fn kind(self) -> TaskKind {
        match self {
            Generator::TokenMajority | Generator::PatternContainment => TaskKind::SingleBinary,
            Generator::PairOverlap => TaskKind::PairBinary,
            Generator::ThreeWayCount => TaskKind::MultiClass { classes: 3 },
            Generator::OverlapScore => TaskKind::Regression,
        }
    }

    fn metric(self) -> Metric {
        match self {
            Generator::TokenMajority | Generator::ThreeWayCount => Metric::Accuracy,
            Generator::PatternContainment => Metric::Matthews,
            Generator::PairOverlap => Metric::F1,
            Generator::OverlapScore => Metric::Spearman,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TaskSpec {
    pub name: String,
    /// `None` for tasks loaded from a file.
    pub generator: Option<Generator>,
    pub kind: TaskKind,
    /// Whether inputs come as two joined parts.
    pub pair: bool,
    pub metric: Metric,
    pub vocab_size: usize,
    /// Length range of each generated sequence (each half for pairs).
    pub min_len: usize,
    pub max_len: usize,
}

/// Lowest ordinary ids, used as markers.
const MARKERS: [usize; 3] = [FIRST_TOKEN, FIRST_TOKEN + 1, FIRST_TOKEN + 2];
const TRIGRAM: [usize; 3] = [FIRST_TOKEN, FIRST_TOKEN + 1, FIRST_TOKEN + 2];

impl TaskSpec {
    /// Registry entry for a built-in generator, with its fixed metric.
    pub fn builtin(name: &str, vocab_size: usize, min_len: usize, max_len: usize) -> Result<Self> {
        let generator = Generator::from_name(name)?;
        let spec = Self {
            name: name.to_string(),
            generator: Some(generator),
            kind: generator.kind(),
            pair: generator.kind().is_pair() || generator == Generator::OverlapScore,
            metric: generator.metric(),
            vocab_size,
            min_len,
            max_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.metric.compatible(self.kind) {
            return Err(Error::Data(format!("metric {:?} does not fit task kind {:?}", self.metric, self.kind)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Data(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.kind.is_pair() && !self.pair {
            return Err(Error::Data(format!("task kind {:?} needs paired inputs", self.kind)));
        }
        if self.generator.is_some() && self.vocab_size < FIRST_TOKEN + 8 {
            return Err(Error::Data(format!("vocab-size {} is too small for the generators", self.vocab_size)));
        }
        if self.generator == Some(Generator::PatternContainment) && self.min_len < TRIGRAM.len() {
            return Err(Error::Data("pattern-containment needs sequences of at least 3 tokens".into()));
        }
        Ok(())
    }

    /// Longest model input the task produces.
    pub fn max_input_len(&self) -> usize {
        if self.pair {
            2 * self.max_len + 1
        } else {
            self.max_len
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Sizes {
    pub train: usize,
    pub unlabeled: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub test: Vec<Example>,
    pub seed: u64,
}

/// Which marker among `markers` occurs most often; `None` on a tie.
pub fn majority_marker(tokens: &[usize], markers: &[usize]) -> Option<usize> {
    let counts: Vec<usize> = markers.iter().map(|m| tokens.iter().filter(|&t| t == m).count()).collect();
    let best = *counts.iter().max()?;
    let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
    let (i, _) = winners.next()?;
    winners.next().is_none().then_some(i)
}

pub fn contains_pattern(tokens: &[usize]) -> bool {
    tokens.windows(TRIGRAM.len()).any(|w| w == TRIGRAM)
}

/// Fraction of positions in `b` whose token also occurs in `a`; 1 for empty `b`.
pub fn shared_fraction(a: &[usize], b: &[usize]) -> f64 {
    if b.is_empty() {
        return 1.0;
    }
    let sa: HashSet<_> = a.iter().collect();
    b.iter().filter(|t| sa.contains(t)).count() as f64 / b.len() as f64
}

/// Token-set Jaccard overlap.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sa: HashSet<_> = a.iter().collect();
    let sb: HashSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

struct Draw<'a> {
    spec: &'a TaskSpec,
    generator: Generator,
    r: &'a mut ChaCha8Rng,
}

impl Draw<'_> {
    fn len(&mut self) -> usize {
        self.r.random_range(self.spec.min_len..=self.spec.max_len)
    }

    fn filler(&mut self, avoid: &[usize]) -> usize {
        loop {
            let t = self.r.random_range(FIRST_TOKEN..self.spec.vocab_size);
            if !avoid.contains(&t) {
                return t;
            }
        }
    }

    fn fillers(&mut self, n: usize, avoid: &[usize]) -> Vec<usize> {
        (0..n).map(|_| self.filler(avoid)).collect()
    }

    /// Marker counts with a unique winner `class`, placed among fillers.
    fn majority(&mut self, class: usize, markers: &[usize]) -> Vec<usize> {
        let len = self.len();
        let top = self.r.random_range(1..=len.min(3));
        let mut seq = vec![markers[class]; top];
        for (i, &m) in markers.iter().enumerate() {
            if i != class && seq.len() < len {
                let n = self.r.random_range(0..top).min(len - seq.len());
                seq.extend(std::iter::repeat_n(m, n));
            }
        }
        let rest = len - seq.len();
        seq.extend(self.fillers(rest, markers));
        seq.shuffle(self.r);
        seq
    }

    fn pattern(&mut self, positive: bool) -> Vec<usize> {
        loop {
            let len = self.len();
            let mut seq = self.fillers(len, &[]);
            if positive {
                let at = self.r.random_range(0..=len - TRIGRAM.len());
                seq[at..at + TRIGRAM.len()].copy_from_slice(&TRIGRAM);
            }
            if contains_pattern(&seq) == positive {
                return seq;
            }
        }
    }

    /// `a` and a copy of it with roughly `keep` of its tokens retained.
    fn pair(&mut self, keep: f64) -> (Vec<usize>, Vec<usize>) {
        let len_a = self.len();
        let a = self.fillers(len_a, &[]);
        let len_b = self.len();
        let mut b = Vec::with_capacity(len_b);
        for _ in 0..len_b {
            let t = if self.r.random::<f64>() < keep { a[self.r.random_range(0..a.len())] } else { self.filler(&a) };
            b.push(t);
        }
        (a, b)
    }

    fn example(&mut self) -> Example {
        match self.generator {
            Generator::TokenMajority => {
                let class = self.r.random_range(0..2);
                let seq = self.majority(class, &MARKERS[..2]);
                Example { tokens_a: seq, tokens_b: None, target: Some(Target::Class(class)) }
            }
            Generator::ThreeWayCount => {
                let class = self.r.random_range(0..3);
                let seq = self.majority(class, &MARKERS);
                Example { tokens_a: seq, tokens_b: None, target: Some(Target::Class(class)) }
            }
            Generator::PatternContainment => {
                let positive = self.r.random::<bool>();
                let seq = self.pattern(positive);
                Example { tokens_a: seq, tokens_b: None, target: Some(Target::Class(positive as usize)) }
            }
            Generator::PairOverlap => {
                let want = self.r.random_range(0..2);
                loop {
                    let keep = if want == 1 { 1.0 } else { 0.2 };
                    let (a, b) = self.pair(keep);
                    let label = (jaccard(&a, &b) > 0.5) as usize;
                    if label == want {
                        return Example { tokens_a: a, tokens_b: Some(b), target: Some(Target::Class(label)) };
                    }
                }
            }
            Generator::OverlapScore => {
                let keep = self.r.random::<f64>();
                let (a, b) = self.pair(keep);
                let score = shared_fraction(&a, &b);
                Example { tokens_a: a, tokens_b: Some(b), target: Some(Target::Score(score)) }
            }
        }
    }
}

/// Deterministic train / unlabeled / test splits with no repeated input.
pub fn generate_task(spec: &TaskSpec, sizes: Sizes, seed: u64) -> Result<SplitSet> {
    spec.validate()?;
    if sizes.train == 0 || sizes.test == 0 {
        return Err(Error::Data("train and test sizes must be positive".into()));
    }
    let total = sizes.train + sizes.unlabeled + sizes.test;
    let generator = spec
        .generator
        .ok_or_else(|| Error::Data(format!("task {} has no generator; load it from a file", spec.name)))?;
    let task_tag = Generator::ALL.iter().position(|g| *g == generator).expect("registered") as u64;
    let mut r = rng::stream(seed, &[rng::tag::DATA, task_tag]);
    let mut draw = Draw { spec, generator, r: &mut r };
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while all.len() < total {
        attempts += 1;
        if attempts > 100 * total + 1000 {
            return Err(Error::Data(format!(
                "could not draw {total} distinct examples for {}; widen the vocabulary or lengths",
                spec.name
            )));
        }
        let ex = draw.example();
        if seen.insert((ex.tokens_a.clone(), ex.tokens_b.clone())) {
            all.push(ex);
        }
    }
    let test = all.split_off(sizes.train + sizes.unlabeled);
    let unlabeled = strip_labels(&all.split_off(sizes.train));
    Ok(SplitSet { train: all, unlabeled, test, seed })
}

pub fn strip_labels(examples: &[Example]) -> Vec<Example> {
    examples.iter().map(|e| Example { target: None, ..e.clone() }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetType {
    Class,
    Score,
}

/// Column layout of a tab-separated file: `text_a [text_b] target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TsvSchema {
    pub pair: bool,
    pub target: TargetType,
}

impl TsvSchema {
    fn columns(self) -> Vec<&'static str> {
        if self.pair {
            vec!["text_a", "text_b", "target"]
        } else {
            vec!["text_a", "target"]
        }
    }
}

/// Whitespace tokenization with hashed ids in `FIRST_TOKEN..vocab_size`.
pub fn hash_tokens(text: &str, vocab_size: usize) -> Vec<usize> {
    let span = (vocab_size - FIRST_TOKEN) as u64;
    text.split_whitespace()
        .map(|w| {
            let h = Sha256::digest(w.as_bytes());
            let v = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
            FIRST_TOKEN + (v % span) as usize
        })
        .collect()
}

pub fn parse_tsv(text: &str, path: &str, schema: TsvSchema, vocab_size: usize) -> Result<Vec<Example>> {
    if vocab_size <= FIRST_TOKEN {
        return Err(Error::Data(format!("vocab-size {vocab_size} leaves no ordinary tokens")));
    }
    let err = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing header row".into()))?;
    let expected = schema.columns();
    let found: Vec<&str> = header.split('\t').map(str::trim).collect();
    if found != expected {
        return Err(err(1, format!("schema expects columns {expected:?}, header has {found:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected.len() {
            return Err(err(lineno, format!("expected {} columns, found {}", expected.len(), cols.len())));
        }
        let tokens_a = hash_tokens(cols[0], vocab_size);
        if tokens_a.is_empty() {
            return Err(err(lineno, "text_a is empty".into()));
        }
        let tokens_b = schema.pair.then(|| hash_tokens(cols[1], vocab_size));
        let raw = cols[cols.len() - 1].trim();
        let target = match schema.target {
            TargetType::Class => Target::Class(
                raw.parse().map_err(|_| err(lineno, format!("target `{raw}` is not a class index")))?,
            ),
            TargetType::Score => {
                Target::Score(raw.parse().map_err(|_| err(lineno, format!("target `{raw}` is not a number")))?)
            }
        };
        out.push(Example { tokens_a, tokens_b, target: Some(target) });
    }
    Ok(out)
}

pub fn load_tsv(path: impl AsRef<Path>, schema: TsvSchema, vocab_size: usize) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_tsv(&text, &path.display().to_string(), schema, vocab_size)
}

/// Shuffles `examples` and cuts them into train / unlabeled / test by the
/// given fractions (test takes the remainder).
pub fn split_examples(mut examples: Vec<Example>, train: f64, unlabeled: f64, seed: u64) -> Result<SplitSet> {
    if !(train > 0.0 && unlabeled >= 0.0 && train + unlabeled < 1.0) {
        return Err(Error::Data(format!("bad split fractions {train} / {unlabeled}")));
    }
    let mut r = rng::stream(seed, &[rng::tag::SHUFFLE, u64::MAX]);
    examples.shuffle(&mut r);
    let n = examples.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_unl = (n as f64 * unlabeled).round() as usize;
    if n_train == 0 || n_train + n_unl >= n {
        return Err(Error::Data(format!("{n} examples are too few for the requested splits")));
    }
    let test = examples.split_off(n_train + n_unl);
    let unlabeled = strip_labels(&examples.split_off(n_train));
    Ok(SplitSet { train: examples, unlabeled, test, seed })
}

#[cfg(test)]
mod tests;
