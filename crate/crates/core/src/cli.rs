//! Config-driven commands behind the `jachess` binary: training suites,
//! evaluation reports, ablation sweeps and smoothness diagnostics.
//!
//! Every command reads one TOML [`RunConfig`]; command-line flags only carry
//! paths, a seed override and verbosity.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{ArgAction, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Graph;
use crate::data::{self, Example, Generator, Metric, Sizes, SplitSet, TargetType, TaskKind, TaskSpec, TsvSchema};
use crate::error::{Error, Result};
use crate::estimators::{self, NormEstimate, ProjectionMode, ProjectionSampler, EXACT_HESSIAN_MAX_DIM, EXACT_JACOBIAN_MAX};
use crate::evaluation::{self, EvalReport, EvalRow, ReliabilityRow, SummaryRow, DEFAULT_CORRUPTION_RATES};
use crate::model::{Checkpoint, ModelConfig};
use crate::regularizer::{self, RegularizerConfig, SmoothnessProfile, Strategy};
use crate::rng;
use crate::trainer::{self, Method, Penalty, RunRecord, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "JACHESS_OUTPUT_ROOT";
/// Hessian-dimension counts swept by default.
pub const HESSIAN_DIM_GRID: [usize; 5] = [0, 5, 10, 20, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// One task of a run: a built-in generator or a tab-separated file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    /// Built-in generator; defaults to the generator called `name`.
    #[serde(default)]
    pub generator: Option<Generator>,
    /// File source, relative to the config file.
    #[serde(default)]
    pub tsv: Option<PathBuf>,
    /// Required for file sources.
    #[serde(default)]
    pub kind: Option<TaskKind>,
    #[serde(default)]
    pub metric: Option<Metric>,
    /// File sources with a `text_b` column; implied by pair kinds.
    #[serde(default)]
    pub pair: bool,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_sizes")]
    pub sizes: Sizes,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_unlabeled_fraction")]
    pub unlabeled_fraction: f64,
    #[serde(default)]
    pub data_seed: u64,
}

fn default_vocab() -> usize {
    24
}
fn default_min_len() -> usize {
    4
}
fn default_max_len() -> usize {
    8
}
fn default_sizes() -> Sizes {
    Sizes { train: 256, unlabeled: 128, test: 200 }
}
fn default_train_fraction() -> f64 {
    0.6
}
fn default_unlabeled_fraction() -> f64 {
    0.2
}

impl TaskEntry {
    fn generator(&self) -> Result<Generator> {
        match self.generator {
            Some(g) => Ok(g),
            None => Generator::from_name(&self.name).map_err(|_| {
                let names: Vec<_> = Generator::ALL.iter().map(|g| g.name()).collect();
                Error::Config(format!(
                    "task `{}` names no built-in generator ({}) and has no tsv source",
                    self.name,
                    names.join(", ")
                ))
            }),
        }
    }

    fn builtin_spec(&self) -> Result<TaskSpec> {
        let g = self.generator()?;
        let mut spec = TaskSpec::builtin(g.name(), self.vocab_size, self.min_len, self.max_len)
            .map_err(|e| Error::Config(format!("task `{}`: {e}", self.name)))?;
        spec.name = self.name.clone();
        if self.kind.is_some_and(|k| k != spec.kind) || self.metric.is_some_and(|m| m != spec.metric) {
            return Err(Error::Config(format!(
                "task `{}`: generator {} fixes kind {:?} and metric {:?}",
                self.name,
                g.name(),
                spec.kind,
                spec.metric
            )));
        }
        Ok(spec)
    }

    fn has_unlabeled(&self) -> bool {
        if self.tsv.is_some() {
            self.unlabeled_fraction > 0.0
        } else {
            self.sizes.unlabeled > 0
        }
    }

    fn check(&self, base: &Path) -> Result<()> {
        let safe = !self.name.is_empty()
            && self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !safe {
            return Err(Error::Config(format!(
                "task name `{}` must be non-empty ASCII letters, digits, `-` or `_`",
                self.name
            )));
        }
        match &self.tsv {
            Some(p) => {
                let kind = self
                    .kind
                    .ok_or_else(|| Error::Config(format!("task `{}`: kind is required for tsv sources", self.name)))?;
                if self.generator.is_some() {
                    return Err(Error::Config(format!("task `{}`: give a generator or a tsv, not both", self.name)));
                }
                let path = base.join(p);
                if !path.is_file() {
                    return Err(Error::Config(format!("task `{}`: no such file {}", self.name, path.display())));
                }
                if let Some(m) = self.metric {
                    if !m.compatible(kind) {
                        return Err(Error::Config(format!("task `{}`: metric {m:?} does not fit {kind:?}", self.name)));
                    }
                }
                Ok(())
            }
            None => self.builtin_spec().map(|_| ()),
        }
    }

    /// The task description and its deterministic splits.
    pub fn materialize(&self, base: &Path) -> Result<(TaskSpec, SplitSet)> {
        let Some(rel) = &self.tsv else {
            let spec = self.builtin_spec()?;
            let data = data::generate_task(&spec, self.sizes, self.data_seed)?;
            return Ok((spec, data));
        };
        let kind = self
            .kind
            .ok_or_else(|| Error::Config(format!("task `{}`: kind is required for tsv sources", self.name)))?;
        let pair = self.pair || kind.is_pair();
        let target = if kind == TaskKind::Regression { TargetType::Score } else { TargetType::Class };
        let path = base.join(rel);
        let examples = data::load_tsv(&path, TsvSchema { pair, target }, self.vocab_size).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
            e => e,
        })?;
        let classes = kind.head().outputs();
        if let Some(bad) = examples.iter().filter_map(|e| e.target.and_then(|t| t.class())).find(|&c| c >= classes) {
            return Err(Error::Data(format!("{}: class {bad} outside the {classes} classes of {kind:?}", path.display())));
        }
        let lens = examples.iter().flat_map(|e| std::iter::once(e.tokens_a.len()).chain(e.tokens_b.as_ref().map(Vec::len)));
        let (min_len, max_len) = lens.fold((usize::MAX, 0), |(lo, hi), l| (lo.min(l), hi.max(l)));
        let metric = self.metric.unwrap_or(if kind == TaskKind::Regression { Metric::Spearman } else { Metric::Accuracy });
        let spec = TaskSpec {
            name: self.name.clone(),
            generator: None,
            kind,
            pair,
            metric,
            vocab_size: self.vocab_size,
            min_len: min_len.max(1),
            max_len: max_len.max(1),
        };
        spec.validate()?;
        let data = data::split_examples(examples, self.train_fraction, self.unlabeled_fraction, self.data_seed)?;
        Ok((spec, data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Embedding-noise magnitudes; 0 reproduces the clean evaluation.
    pub deltas: Vec<f64>,
    pub corruption_rates: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { deltas: vec![0.0, 0.1, 0.2, 0.5], corruption_rates: DEFAULT_CORRUPTION_RATES.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct SweepConfig {
    pub method: Method,
    pub strategies: Vec<Strategy>,
    pub hessian_dims: Vec<usize>,
    /// Adds a matching cross-holder run as a reference row.
    pub cross_holder_reference: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            method: Method::JachessTrain,
            strategies: Strategy::ALL.to_vec(),
            hessian_dims: HESSIAN_DIM_GRID.to_vec(),
            cross_holder_reference: true,
        }
    }
}

/// The single structured config shared by every command.
///
/// `train.method` and `train.seed` are ignored: runs cover `methods` ×
/// `seeds`. The penalty budget is `train.xi` (the learning rate when unset),
/// which takes precedence over `regularizer.xi`. The model head and seed are
/// set per task and run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Relative to the output root.
    pub output_dir: PathBuf,
    #[serde(default = "default_formats")]
    pub report_formats: Vec<ReportFormat>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Directory that relative task files are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_formats() -> Vec<ReportFormat> {
    vec![ReportFormat::Csv, ReportFormat::Json]
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn config_err(section: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Config(format!("[{section}] {e}"))
}

fn check_axis(name: &str, v: &[f64], max: f64) -> Result<()> {
    if v.iter().any(|x| !(0.0..=max).contains(x)) || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("eval.{name} must be increasing values in [0, {max}], got {v:?}")));
    }
    Ok(())
}

impl RunConfig {
    /// Parses and validates; errors carry the file path and line.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(0);
            Error::Config(format!("{}:{line}: {}", path.display(), e.message()))
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "schema-version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.output_dir.as_os_str().is_empty() || self.output_dir.is_absolute() {
            return fail(format!("output-dir `{}` must be a non-empty relative path", self.output_dir.display()));
        }
        if self.seeds.is_empty() || self.methods.is_empty() || self.tasks.is_empty() {
            return fail("seeds, methods and tasks must each list at least one entry".into());
        }
        if self.report_formats.is_empty() {
            return fail("report-formats must name csv, json or both".into());
        }
        self.model.validate().map_err(config_err("model"))?;
        self.train.validate().map_err(config_err("train"))?;
        RegularizerConfig { xi: self.train.xi(), ..self.regularizer.clone() }
            .validate()
            .map_err(config_err("regularizer"))?;
        for (i, t) in self.tasks.iter().enumerate() {
            t.check(&self.base_dir)?;
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return fail(format!("task `{}` is listed twice", t.name));
            }
            if t.tsv.is_none() {
                trainer::model_config_for(&self.model, &t.builtin_spec()?, 0)?;
            }
            if let Some(m) = self.methods.iter().find(|m| m.is_val()) {
                if !t.has_unlabeled() {
                    return fail(format!("method {} needs an unlabeled split, task `{}` has none", m.name(), t.name));
                }
            }
        }
        check_axis("deltas", &self.eval.deltas, f64::INFINITY)?;
        check_axis("corruption-rates", &self.eval.corruption_rates, 1.0)?;
        Ok(())
    }

    /// Hash of every semantic field: everything except where outputs go.
    pub fn hash(&self) -> String {
        let semantic = RunConfig { output_dir: PathBuf::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&semantic).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }

    pub fn output_path(&self, root: &Path) -> PathBuf {
        root.join(&self.output_dir)
    }

    fn wants(&self, f: ReportFormat) -> bool {
        self.report_formats.contains(&f)
    }

    fn tasks(&self) -> Result<Vec<(TaskSpec, SplitSet)>> {
        self.tasks.iter().map(|t| t.materialize(&self.base_dir)).collect()
    }
}

/// Output root: the explicit flag, else the environment, else the current directory.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn run_stem(task: &str, method: Method, seed: u64) -> String {
    format!("{task}__{}__seed{seed}", method.name())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub task: String,
    pub method: Method,
    pub seed: u64,
    pub checkpoint: String,
    pub record: String,
    pub wall_time_secs: f64,
}

/// Run index of a command. The only output that carries timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub created_unix_secs: u64,
    pub wall_time_secs: f64,
    pub runs: Vec<ManifestRun>,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            command: command.into(),
            config_hash: cfg.hash(),
            created_unix_secs: now_unix(),
            wall_time_secs: 0.0,
            runs: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub struct TrainOutcome {
    pub records: Vec<RunRecord>,
    pub manifest: Manifest,
    pub dir: PathBuf,
}

/// Trains every task × method × seed and writes checkpoints, run records
/// and a manifest under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let started = Instant::now();
    let tasks = cfg.tasks()?;
    let mut manifest = Manifest::new("train", cfg);
    let mut reg = cfg.regularizer.clone();
    reg.xi = cfg.train.xi();
    let records = trainer::run_suite(&cfg.methods, &cfg.seeds, &tasks, &cfg.train, &reg, &cfg.model)?;
    write(&out.join("config.json"), json(cfg)?)?;
    for r in &records {
        let stem = run_stem(&r.task, r.method, r.seed);
        let ckpt = format!("checkpoints/{stem}.ckpt");
        let record = format!("records/{stem}.json");
        fs::create_dir_all(out.join("checkpoints"))?;
        r.checkpoint.as_ref().expect("trained runs keep their checkpoint").save(out.join(&ckpt))?;
        write(&out.join(&record), json(r)?)?;
        manifest.runs.push(ManifestRun {
            task: r.task.clone(),
            method: r.method,
            seed: r.seed,
            checkpoint: ckpt,
            record,
            wall_time_secs: r.wall_time_secs,
        });
    }
    manifest.files.push("config.json".into());
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    write(&out.join("manifest.json"), json(&manifest)?)?;
    Ok(TrainOutcome { records, manifest, dir: out.to_path_buf() })
}

/// Checkpoint directory inside a training output, or the directory itself.
fn checkpoint_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("checkpoints");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn row(spec: &TaskSpec, method: Method, seed: u64, sweep: &str, level: f64, e: &evaluation::CleanEval) -> EvalRow {
    EvalRow {
        task: spec.name.clone(),
        method: method.name().into(),
        seed,
        sweep: sweep.into(),
        level,
        metric: spec.metric,
        score: e.score.value,
        accuracy: e.accuracy,
        brier: e.brier,
        ece: e.calibration.as_ref().map(|c| c.ece),
    }
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub summary: Vec<SummaryRow>,
}

/// Perturbation and corruption sweeps of every trained checkpoint, one row
/// per task × method × seed × level, plus reliability diagrams.
pub fn cmd_eval(cfg: &RunConfig, ckpt_dir: &Path, out: &Path) -> Result<EvalOutcome> {
    let dir = checkpoint_dir(ckpt_dir);
    let mut expected = Vec::new();
    for t in &cfg.tasks {
        for &m in &cfg.methods {
            for &s in &cfg.seeds {
                expected.push(dir.join(format!("{}.ckpt", run_stem(&t.name, m, s))));
            }
        }
    }
    let missing: Vec<String> = expected.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} of {} expected checkpoint(s) missing: {}",
            missing.len(),
            expected.len(),
            missing.join(", ")
        )));
    }

    let started = Instant::now();
    let mut report = EvalReport::new();
    let mut paths = expected.iter();
    for (spec, data) in cfg.tasks()? {
        for &method in &cfg.methods {
            for &seed in &cfg.seeds {
                let ck = Checkpoint::load(paths.next().expect("one path per run"))?;
                let clean = evaluation::evaluate(&ck, &data.test, &spec)?;
                if let Some(cal) = &clean.calibration {
                    for b in &cal.bins {
                        report.reliability.push(ReliabilityRow {
                            task: spec.name.clone(),
                            method: method.name().into(),
                            seed,
                            bin_center: b.center(),
                            mean_prob: b.mean_prob,
                            frequency: b.frequency,
                            count: b.count,
                        });
                    }
                }
                for &delta in &cfg.eval.deltas {
                    let e = evaluation::evaluate_noisy(&ck, &data.test, &spec, Some((delta, seed)))?;
                    report.rows.push(row(&spec, method, seed, "perturbation", delta, &e));
                }
                for &rate in &cfg.eval.corruption_rates {
                    let corrupted = evaluation::corrupt_examples(&data.test, rate, seed, ck.config.vocab_size)?;
                    let e = evaluation::evaluate(&ck, &corrupted, &spec)?;
                    report.rows.push(row(&spec, method, seed, "corruption", rate, &e));
                }
                log::info!("evaluated {}", run_stem(&spec.name, method, seed));
            }
        }
    }
    let summary = evaluation::summarize(&report.rows);

    let mut manifest = Manifest::new("eval", cfg);
    let eval_dir = out.join("eval");
    let mut files = Vec::new();
    if cfg.wants(ReportFormat::Json) {
        files.push(("report.json", report.to_json()? + "\n"));
        files.push(("summary.json", json(&summary)?));
    }
    if cfg.wants(ReportFormat::Csv) {
        files.push(("rows.csv", report.rows_csv()?));
        files.push(("reliability.csv", report.reliability_csv()?));
        files.push(("summary.csv", evaluation::to_csv(&summary)?));
    }
    for (name, text) in files {
        write(&eval_dir.join(name), text)?;
        manifest.files.push(format!("eval/{name}"));
    }
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    write(&eval_dir.join("manifest.json"), json(&manifest)?)?;
    Ok(EvalOutcome { report, summary })
}

/// One trained run of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub task: String,
    /// Strategy name, or the reference method.
    pub variant: String,
    pub hessian_dims: Option<usize>,
    pub seed: u64,
    pub score: f64,
    pub final_omega: f64,
}

/// Seed mean of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub task: String,
    pub variant: String,
    pub hessian_dims: Option<usize>,
    pub metric: Metric,
    pub seeds: usize,
    pub mean_score: f64,
    pub mean_final_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub method: Method,
    pub cells: Vec<SweepCell>,
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    /// Strategy rows × dimension-count columns of mean scores, per task.
    pub fn table_csv(&self) -> Result<String> {
        let mut dims: Vec<usize> = self.cells.iter().filter_map(|c| c.hessian_dims).collect();
        dims.sort_unstable();
        dims.dedup();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["task".to_string(), "variant".to_string()];
        header.extend(dims.iter().map(|d| format!("dims_{d}")));
        header.push("all_dims".into());
        let csv_err = |e: csv::Error| Error::Evaluation(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        let mut keys: Vec<(&str, &str)> = Vec::new();
        for c in &self.cells {
            if !keys.contains(&(c.task.as_str(), c.variant.as_str())) {
                keys.push((&c.task, &c.variant));
            }
        }
        for (task, variant) in keys {
            let cell = |d: Option<usize>| {
                self.cells
                    .iter()
                    .find(|c| c.task == task && c.variant == variant && c.hessian_dims == d)
                    .map(|c| c.mean_score.to_string())
                    .unwrap_or_default()
            };
            let mut rec = vec![task.to_string(), variant.to_string()];
            rec.extend(dims.iter().map(|&d| cell(Some(d))));
            rec.push(cell(None));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Evaluation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn cell_of(task: &TaskSpec, runs: &[SweepRun]) -> SweepCell {
    let n = runs.len() as f64;
    SweepCell {
        task: task.name.clone(),
        variant: runs[0].variant.clone(),
        hessian_dims: runs[0].hessian_dims,
        metric: task.metric,
        seeds: runs.len(),
        mean_score: runs.iter().map(|r| r.score).sum::<f64>() / n,
        mean_final_omega: runs.iter().map(|r| r.final_omega).sum::<f64>() / n,
    }
}

fn sweep_run(
    cfg: &RunConfig,
    train: &TrainConfig,
    reg: &RegularizerConfig,
    spec: &TaskSpec,
    data: &SplitSet,
) -> Result<(f64, f64)> {
    let rec = trainer::train(train, reg, spec, &data.train, Some(&data.unlabeled), &cfg.model)?;
    let ck = rec.checkpoint.as_ref().expect("trained runs keep their checkpoint");
    let score = evaluation::evaluate(ck, &data.test, spec)?.score.value;
    Ok((score, rec.omega.last().copied().unwrap_or(0.0)))
}

/// Grid over λ strategies × Hessian-dimension counts, each cell the seed
/// mean of the clean test score.
pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<SweepReport> {
    let sw = &cfg.sweep;
    if sw.strategies.is_empty() || sw.hessian_dims.is_empty() {
        return Err(Error::Config("sweep grid is empty: list strategies and hessian-dims".into()));
    }
    if sw.method.penalty() != Some(Penalty::Jachess) {
        return Err(Error::Config(format!("sweep method {} does not use the layer-wise penalty", sw.method.name())));
    }
    if sw.method.is_val() && cfg.tasks.iter().any(|t| !t.has_unlabeled()) {
        return Err(Error::Config(format!("sweep method {} needs unlabeled splits", sw.method.name())));
    }
    let started = Instant::now();
    let mut report = SweepReport { schema_version: CONFIG_SCHEMA_VERSION, method: sw.method, cells: vec![], runs: vec![] };
    let xi = cfg.train.xi();
    for (spec, data) in cfg.tasks()? {
        for &strategy in &sw.strategies {
            for &dims in &sw.hessian_dims {
                let reg = RegularizerConfig { xi, strategy, hessian_dims: dims, ..cfg.regularizer.clone() };
                let mut runs = Vec::with_capacity(cfg.seeds.len());
                for &seed in &cfg.seeds {
                    let train = TrainConfig { method: sw.method, seed, ..cfg.train.clone() };
                    let (score, final_omega) = sweep_run(cfg, &train, &reg, &spec, &data)?;
                    runs.push(SweepRun {
                        task: spec.name.clone(),
                        variant: strategy.name().into(),
                        hessian_dims: Some(dims),
                        seed,
                        score,
                        final_omega,
                    });
                }
                log::info!("sweep {} {} |D|={dims} done", spec.name, strategy.name());
                report.cells.push(cell_of(&spec, &runs));
                report.runs.extend(runs);
            }
        }
        if sw.cross_holder_reference {
            let method = if sw.method.is_val() { Method::CrossHolderVal } else { Method::CrossHolderTrain };
            let reg = RegularizerConfig { xi, ..cfg.regularizer.clone() };
            let mut runs = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let train = TrainConfig { method, seed, ..cfg.train.clone() };
                let (score, final_omega) = sweep_run(cfg, &train, &reg, &spec, &data)?;
                runs.push(SweepRun {
                    task: spec.name.clone(),
                    variant: method.name().into(),
                    hessian_dims: None,
                    seed,
                    score,
                    final_omega,
                });
            }
            report.cells.push(cell_of(&spec, &runs));
            report.runs.extend(runs);
        }
    }

    let mut manifest = Manifest::new("sweep", cfg);
    let dir = out.join("sweep");
    let mut files = Vec::new();
    if cfg.wants(ReportFormat::Json) {
        files.push(("report.json", json(&report)?));
    }
    if cfg.wants(ReportFormat::Csv) {
        files.push(("cells.csv", evaluation::to_csv(&report.cells)?));
        files.push(("runs.csv", evaluation::to_csv(&report.runs)?));
        files.push(("table.csv", report.table_csv()?));
    }
    for (name, text) in files {
        write(&dir.join(name), text)?;
        manifest.files.push(format!("sweep/{name}"));
    }
    manifest.wall_time_secs = started.elapsed().as_secs_f64();
    write(&dir.join("manifest.json"), json(&manifest)?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub instances: usize,
    pub projections: usize,
    pub hessian_dims: usize,
    pub xi: f64,
    pub seed: u64,
    pub projection_mode: ProjectionMode,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            instances: 8,
            projections: 100,
            hessian_dims: 10,
            xi: 3e-4,
            seed: 0,
            projection_mode: ProjectionMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnosis {
    /// 1-based block index.
    pub layer: usize,
    pub jacobian: NormEstimate,
    /// Instance-mean exact `‖J‖²_F`.
    pub jacobian_exact: Option<f64>,
    pub hessian_dims: Vec<usize>,
    /// Sum over `hessian_dims` of the instance-mean `‖H_d‖²_F` estimates.
    pub hessian: f64,
    pub hessian_exact: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyLambdas {
    pub strategy: Strategy,
    pub lambdas: Option<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStatus {
    pub jacobian: bool,
    pub hessian: bool,
    /// Why an oracle was skipped.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub schema_version: u32,
    pub checkpoint: String,
    pub data: String,
    pub options: DiagnoseOptions,
    pub layers: Vec<LayerDiagnosis>,
    /// Allocation of `options.xi` from the estimated profile.
    pub lambdas: Vec<StrategyLambdas>,
    pub oracle: OracleStatus,
}

fn diagnose_inputs(ck: &Checkpoint, data: &str, count: usize) -> Result<Vec<Vec<usize>>> {
    let path = Path::new(data);
    let vocab = ck.config.vocab_size;
    let examples: Vec<Example> = if path.is_file() {
        let text = fs::read_to_string(path)?;
        let header = text.lines().next().unwrap_or_default();
        let pair = header.split('\t').any(|c| c.trim() == "text_b");
        data::parse_tsv(&text, data, TsvSchema { pair, target: TargetType::Score }, vocab)?
    } else if let Ok(g) = Generator::from_name(data) {
        let max_seq = ck.config.max_seq_len;
        let paired = g == Generator::PairOverlap || g == Generator::OverlapScore;
        let max_len = if paired { (max_seq.saturating_sub(1)) / 2 } else { max_seq }.min(8);
        let spec = TaskSpec::builtin(data, vocab, 4.min(max_len).max(3), max_len)?;
        data::generate_task(&spec, Sizes { train: count, unlabeled: 0, test: 1 }, 0)?.train
    } else {
        let names: Vec<_> = Generator::ALL.iter().map(|g| g.name()).collect();
        return Err(Error::Data(format!(
            "`{data}` is neither a readable file nor a built-in task ({})",
            names.join(", ")
        )));
    };
    if examples.is_empty() {
        return Err(Error::Data(format!("{data} holds no examples")));
    }
    Ok(examples.iter().take(count).map(Example::tokens).collect())
}

/// Per-layer norm estimates, λ under every strategy, and exact oracles when
/// the model is small enough.
pub fn cmd_diagnose(ckpt: &Path, data: &str, opts: &DiagnoseOptions) -> Result<DiagnoseReport> {
    if opts.instances == 0 || opts.projections == 0 {
        return Err(Error::Config("instances and projections must be positive".into()));
    }
    let ck = Checkpoint::load(ckpt).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("cannot read {}: {io}", ckpt.display())),
        e => e,
    })?;
    let inputs = diagnose_inputs(&ck, data, opts.instances)?;
    let b = inputs.len();
    let mut g = Graph::new();
    let trace = ck.forward_batch(&mut g, &inputs, None)?;
    let n = g.value(trace.input).numel() / b;
    let width = ck.config.embed_dim;
    let jac_oracle = width * n <= EXACT_JACOBIAN_MAX;
    let hess_oracle = n <= EXACT_HESSIAN_MAX_DIM;
    let mut notes = Vec::new();
    if !jac_oracle {
        notes.push(format!("Jacobian oracle skipped: {width}x{n} exceeds {EXACT_JACOBIAN_MAX} entries"));
    }
    if !hess_oracle {
        notes.push(format!("Hessian oracle skipped: input dimension {n} exceeds {EXACT_HESSIAN_MAX_DIM}"));
    }
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let tag = rng::tag::DIAGNOSE;

    let mut layers = Vec::with_capacity(trace.num_layers());
    for k in 0..trace.num_layers() {
        let z = trace.layers[k];
        let mut s = ProjectionSampler::new(opts.seed, &[tag, k as u64, 0], opts.projection_mode);
        let jacobian = estimators::jacobian_frob_sq(&mut g, &trace, k, &mut s, opts.projections)?;
        let jacobian_exact = if jac_oracle {
            Some(mean(estimators::exact_jacobian_frob_sq_of(&mut g, z, trace.input, b)?))
        } else {
            None
        };
        let count = opts.hessian_dims.min(width);
        let dims = regularizer::sample_dims(width, count, &mut rng::stream(opts.seed, &[tag, k as u64, 1]), k, 0)?.dims;
        let (mut hessian, mut exact) = (0.0, 0.0);
        for &d in &dims {
            let mut s = ProjectionSampler::new(opts.seed, &[tag, k as u64, 2, d as u64], opts.projection_mode);
            hessian += estimators::hessian_frob_sq(&mut g, &trace, k, d, &mut s, opts.projections)?.value;
            if hess_oracle {
                exact += mean(estimators::exact_hessian_frob_sq_of(&mut g, z, trace.input, b, d)?);
            }
        }
        layers.push(LayerDiagnosis {
            layer: k + 1,
            jacobian,
            jacobian_exact,
            hessian_dims: dims,
            hessian,
            hessian_exact: hess_oracle.then_some(exact),
        });
    }

    let profile = SmoothnessProfile {
        norms: layers.iter().map(|l| l.jacobian.value.sqrt()).collect(),
        calibration_id: data.to_string(),
        projections: opts.projections,
    };
    let lambdas = Strategy::ALL
        .iter()
        .map(|&strategy| match regularizer::allocate_lambdas(&profile, opts.xi, strategy) {
            Ok(l) => StrategyLambdas { strategy, lambdas: Some(l), error: None },
            Err(e) => StrategyLambdas { strategy, lambdas: None, error: Some(e.to_string()) },
        })
        .collect();
    Ok(DiagnoseReport {
        schema_version: CONFIG_SCHEMA_VERSION,
        checkpoint: ckpt.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        data: data.to_string(),
        options: opts.clone(),
        layers,
        lambdas,
        oracle: OracleStatus {
            jacobian: jac_oracle,
            hessian: hess_oracle,
            note: (!notes.is_empty()).then(|| notes.join("; ")),
        },
    })
}

#[derive(Debug, Parser)]
#[command(name = "jachess", version, about = "Layer-wise Jacobian and Hessian smoothness regularization experiments")]
pub struct Args {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Directory that output-dir is resolved against; overrides JACHESS_OUTPUT_ROOT.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every task × method × seed of a config.
    Train {
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate trained checkpoints under perturbation and corruption.
    Eval {
        ckpt_dir: PathBuf,
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Strategy × Hessian-dimension ablation grid.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump per-layer smoothness estimates of one checkpoint as JSON.
    Diagnose {
        ckpt: PathBuf,
        /// A tab-separated file or a built-in task name.
        data: String,
        #[arg(long, default_value_t = 8)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        projections: usize,
        #[arg(long, default_value_t = 10)]
        hessian_dims: usize,
        #[arg(long, default_value_t = 3e-4)]
        xi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(args: Args) -> Result<()> {
    let root = output_root(args.output_root.as_deref());
    match args.command {
        Command::Train { config, seed } => {
            let cfg = RunConfig::load(&config)?.with_seed(seed);
            let out = cfg.output_path(&root);
            let done = cmd_train(&cfg, &out)?;
            println!("trained {} run(s) into {}", done.records.len(), out.display());
            println!("config hash {}", done.manifest.config_hash);
        }
        Command::Eval { ckpt_dir, config, seed } => {
            let cfg = RunConfig::load(&config)?.with_seed(seed);
            let out = cfg.output_path(&root);
            let done = cmd_eval(&cfg, &ckpt_dir, &out)?;
            println!("wrote {} report row(s) to {}", done.report.rows.len(), out.join("eval").display());
        }
        Command::Sweep { config, seed } => {
            let cfg = RunConfig::load(&config)?.with_seed(seed);
            let out = cfg.output_path(&root);
            let report = cmd_sweep(&cfg, &out)?;
            println!("wrote {} sweep cell(s) to {}", report.cells.len(), out.join("sweep").display());
        }
        Command::Diagnose { ckpt, data, instances, projections, hessian_dims, xi, seed, out } => {
            let opts = DiagnoseOptions { instances, projections, hessian_dims, xi, seed, ..Default::default() };
            let text = json(&cmd_diagnose(&ckpt, &data, &opts)?)?;
            match out {
                Some(p) => write(&p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match args.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
