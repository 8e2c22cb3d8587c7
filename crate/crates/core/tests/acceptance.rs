//! End-to-end acceptance checks. Every test writes one `PASS`/`FAIL` line to
//! stdout (uncaptured) before asserting.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jachess::autodiff::gradcheck::{check_probe, numeric_gradient, primitive_probes, relative_error};
use jachess::autodiff::{Graph, Tensor};
use jachess::cli::{self, DiagnoseOptions, RunConfig};
use jachess::data::SplitSet;
use jachess::estimators::{self, ProjectionSampler};
use jachess::evaluation::{self, calibration_report, SummaryRow};
use jachess::model::{Checkpoint, ModelConfig, TaskHead};
use jachess::regularizer::{self, allocate_lambdas, SmoothnessProfile, Strategy};
use jachess::trainer::Method;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {id:>2} {status} {name}: {detail}");
    let _ = out.flush();
    assert!(pass, "acceptance {id} ({name}) failed: {detail}");
}

fn find<'a>(rows: &'a [SummaryRow], task: &str, method: Method, sweep: &str, level: f64) -> &'a SummaryRow {
    rows.iter()
        .find(|r| r.task == task && r.method == method.name() && r.sweep == sweep && (r.level - level).abs() < 1e-12)
        .unwrap_or_else(|| panic!("no summary row for {task} {} {sweep} {level}", method.name()))
}

fn config(name: &str) -> RunConfig {
    RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)).unwrap()
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

#[test]
fn c01_gradient_correctness() {
    let start = Instant::now();
    let probes = primitive_probes();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst_name = "";
    for case in 0..100 {
        let probe = &probes[case % probes.len()];
        let c = check_probe(probe, &mut rng, 1e-5).unwrap();
        let e = c.first_order.max(c.second_order);
        if e > worst {
            worst = e;
            worst_name = probe.name;
        }
    }

    let model = ModelConfig {
        vocab_size: 16,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 8,
        max_seq_len: 6,
        head: TaskHead::Classification { classes: 3 },
        seed: 5,
    };
    let ck = Checkpoint::init(&model).unwrap();
    let batch = vec![vec![2, 9, 4, 13], vec![5, 7], vec![3, 3, 11]];
    let targets = [0, 2, 1];
    let loss = |ck: &Checkpoint| {
        let mut g = Graph::new();
        let m = ck.bind(&mut g, true);
        let tr = m.forward(&mut g, &batch, None).unwrap();
        let l = g.cross_entropy(tr.logits, &targets).unwrap();
        (g, m, l)
    };
    let (mut g, m, l) = loss(&ck);
    let grads = g.backward(l, m.param_vars(), false).unwrap().into_tensors();
    let mut model_worst = 0.0f64;
    for (i, (name, value)) in ck.params.iter().enumerate() {
        let numeric = numeric_gradient(
            |t| {
                let mut c = ck.clone();
                *c.param_mut(name).unwrap() = t.clone();
                let (g, _, l) = loss(&c);
                Ok(g.value(l).item())
            },
            value,
            1e-5,
        )
        .unwrap();
        model_worst = model_worst.max(relative_error(&grads[i], &numeric, 1e-7));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && model_worst < 1e-4 && secs < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "100 primitive cases worst rel err {worst:.2e} ({worst_name}), full model {model_worst:.2e} over {} tensors, {secs:.1}s",
            ck.params.len()
        ),
    );
}

#[test]
fn c02_second_order_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 5;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.random_range(-1.0..1.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let a = Tensor::matrix(n, n, a).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let ac = g.constant(a.clone());
    let xa = g.matmul(x, ac).unwrap();
    let q = g.dot(xa, x).unwrap();
    let q = g.reshape(q, &[1, 1]).unwrap();
    let h = estimators::exact_hessian_of(&mut g, q, x, 1, 0, 0).unwrap();
    let quad_err = h.data().iter().zip(a.data()).map(|(h, a)| (h - 2.0 * a).abs()).fold(0.0, f64::max);

    let model = ModelConfig { vocab_size: 16, embed_dim: 8, num_layers: 2, num_heads: 2, ff_dim: 8, max_seq_len: 6, ..Default::default() };
    let mut sym_err = 0.0f64;
    for seed in 0..3 {
        let ck = Checkpoint::init(&ModelConfig { seed, ..model.clone() }).unwrap();
        let mut g = Graph::new();
        let tr = ck.forward_batch(&mut g, &[vec![2, 7, 4], vec![9, 3]], None).unwrap();
        for k in 0..2 {
            for d in [0, 5] {
                for inst in 0..2 {
                    let h = estimators::exact_hessian(&mut g, &tr, k, d, inst).unwrap();
                    let m = h.shape()[0];
                    for i in 0..m {
                        for j in 0..i {
                            sym_err = sym_err.max((h.data()[i * m + j] - h.data()[j * m + i]).abs());
                        }
                    }
                }
            }
        }
    }
    report(
        2,
        "second-order correctness",
        quad_err < 1e-8 && sym_err < 1e-8,
        &format!("quadratic form max |H - 2A| {quad_err:.1e}, transformer Hessian asymmetry {sym_err:.1e}"),
    );
}

#[test]
fn c03_estimator_unbiasedness() {
    let n = 8;
    let a: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                (i + 1) as f64
            } else {
                0.1 * (((i * n + j) % 5) as f64 - 2.0)
            }
        })
        .collect();
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let apply = |v: &[f64]| (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
    let mut s = ProjectionSampler::gaussian(3);
    let est = estimators::trace_estimate(apply, n, &mut s, 100_000).unwrap();
    let trace_err = (est - trace).abs() / trace;

    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
    let at = g.constant(Tensor::matrix(2, 2, vec![1.0, 3.0, 2.0, 4.0]).unwrap());
    let z = g.matmul(x, at).unwrap();
    let mut s = ProjectionSampler::gaussian(4);
    let jac = estimators::jacobian_frob_sq_of(&mut g, z, x, 1, &mut s, 2000).unwrap().value;
    let jac_err = (jac - 30.0).abs() / 30.0;
    report(
        3,
        "estimator unbiasedness",
        trace_err < 0.01 && jac_err < 0.1,
        &format!("trace {est:.4} vs {trace} ({:.3}%), ||A||_F^2 {jac:.3} vs 30 ({:.2}%)", 100.0 * trace_err, 100.0 * jac_err),
    );
}

#[test]
fn c04_oracle_agreement() {
    let start = Instant::now();
    let ck = Checkpoint::init(&ModelConfig::default()).unwrap();
    let path = scratch().join("default-tiny.ckpt");
    ck.save(&path).unwrap();
    let opts = DiagnoseOptions { instances: 4, projections: 1000, hessian_dims: 4, seed: 11, ..Default::default() };
    let rep = cli::cmd_diagnose(&path, "token-majority", &opts).unwrap();
    let mut worst_j = 0.0f64;
    let mut worst_h = 0.0f64;
    for l in &rep.layers {
        let ej = l.jacobian_exact.unwrap();
        let eh = l.hessian_exact.unwrap();
        worst_j = worst_j.max((l.jacobian.value - ej).abs() / ej);
        worst_h = worst_h.max((l.hessian - eh).abs() / eh);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "oracle agreement",
        worst_j < 0.1 && worst_h < 0.1 && secs < 300.0,
        &format!(
            "{} layers at p=1000: worst Jacobian rel err {:.2}%, worst Hessian rel err {:.2}%, {secs:.1}s",
            rep.layers.len(),
            100.0 * worst_j,
            100.0 * worst_h
        ),
    );
}

#[test]
fn c05_lambda_allocation() {
    let profile = |norms: Vec<f64>| SmoothnessProfile { norms, calibration_id: "acceptance".into(), projections: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sum_err = 0.0f64;
    let mut monotone = true;
    for _ in 0..200 {
        let k = rng.random_range(1..8);
        let j: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..50.0)).collect();
        let xi = rng.random_range(1e-5..1.0);
        let l = allocate_lambdas(&profile(j.clone()), xi, Strategy::SoftmaxBaseSmoothness).unwrap();
        sum_err = sum_err.max((l.iter().sum::<f64>() - xi).abs());
        for a in 0..k {
            for b in 0..k {
                if j[a] < j[b] && l[a] < l[b] {
                    monotone = false;
                }
            }
        }
    }
    let uniform = allocate_lambdas(&profile(vec![1.0; 3]), 0.1, Strategy::SoftmaxBaseSmoothness).unwrap();
    let uniform_err = uniform.iter().map(|l| (l - 0.1 / 3.0).abs()).fold(0.0, f64::max);
    report(
        5,
        "lambda allocation",
        sum_err < 1e-10 && uniform_err < 1e-12 && monotone,
        &format!("max |sum - xi| {sum_err:.1e}, j=[1,1,1] error {uniform_err:.1e}, monotone {monotone}"),
    );
}

struct Trained {
    cfg: RunConfig,
    out: PathBuf,
    data: BTreeMap<String, SplitSet>,
    secs: f64,
}

fn train_config(name: &str) -> Trained {
    let start = Instant::now();
    let cfg = config(name);
    let out = cfg.output_path(scratch());
    cli::cmd_train(&cfg, &out).unwrap();
    let data = cfg.tasks.iter().map(|t| (t.name.clone(), t.materialize(&cfg.base_dir).unwrap().1)).collect();
    Trained { cfg, out, data, secs: start.elapsed().as_secs_f64() }
}

fn checkpoint(t: &Trained, task: &str, method: Method, seed: u64) -> Checkpoint {
    Checkpoint::load(t.out.join("checkpoints").join(format!("{}.ckpt", cli::run_stem(task, method, seed)))).unwrap()
}

#[test]
fn c06_smoothing_effect() {
    let t = train_config("smoothing.toml");
    let task = "token-majority";
    let (spec, _) = t.cfg.tasks[0].materialize(&t.cfg.base_dir).unwrap();
    let test = &t.data[task].test;
    let probe: Vec<Vec<usize>> = test.iter().take(64).map(|e| e.tokens()).collect();
    let mut stats = Vec::new();
    for method in [Method::Base, Method::JachessTrain] {
        let (mut jac, mut acc) = (0.0, 0.0);
        for &seed in &t.cfg.seeds {
            let ck = checkpoint(&t, task, method, seed);
            jac += regularizer::exact_profile(&ck, &probe).unwrap().iter().sum::<f64>();
            acc += evaluation::evaluate(&ck, test, &spec).unwrap().accuracy.unwrap();
        }
        let n = t.cfg.seeds.len() as f64;
        stats.push((jac / n, acc / n));
    }
    let (base_j, base_a) = stats[0];
    let (reg_j, reg_a) = stats[1];
    let pass = reg_j < base_j && reg_a >= base_a - 0.02 && t.secs < 1800.0;
    report(
        6,
        "smoothing effect",
        pass,
        &format!(
            "mean sum_k ||J_k||_F base {base_j:.3} vs jachess-train {reg_j:.3}; accuracy {base_a:.3} vs {reg_a:.3} over {} seeds, {:.0}s",
            t.cfg.seeds.len(),
            t.secs
        ),
    );
}

fn robustness() -> &'static (Trained, cli::EvalOutcome) {
    static RUN: OnceLock<(Trained, cli::EvalOutcome)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = train_config("robustness.toml");
        let eval = cli::cmd_eval(&t.cfg, &t.out, &t.out).unwrap();
        (t, eval)
    })
}

#[test]
fn c07_robustness_trend() {
    let (t, eval) = robustness();
    let mut wins = 0;
    let mut parts = Vec::new();
    for task in &t.cfg.tasks {
        let at = |m: Method| find(&eval.summary, &task.name, m, "corruption", 0.20).accuracy.unwrap();
        let (b, r) = (at(Method::Base), at(Method::JachessVal));
        wins += (r >= b) as usize;
        parts.push(format!("{} {b:.3} vs {r:.3}", task.name));
    }
    report(
        7,
        "robustness trend",
        wins >= 2,
        &format!("accuracy at 20% corruption, base vs jachess-val: {} ({wins}/3 tasks)", parts.join(", ")),
    );
}

#[test]
fn c08_calibration_trend() {
    let (t, eval) = robustness();
    let mut ok = true;
    let mut parts = Vec::new();
    for task in &t.cfg.tasks {
        let (spec, _) = task.materialize(&t.cfg.base_dir).unwrap();
        if !spec.kind.is_binary() {
            continue;
        }
        let brier = |m: Method| find(&eval.summary, &task.name, m, "perturbation", 0.0).brier.unwrap();
        let (b, r) = (brier(Method::Base), brier(Method::JachessVal));
        ok &= r <= b;
        parts.push(format!("{} {b:.4} vs {r:.4}", task.name));
    }

    let probs = [0.0, 0.05, 0.124, 0.125, 0.2, 0.3, 0.37, 0.4, 0.5, 0.51, 0.62, 0.7, 0.75, 0.874, 0.875, 1.0];
    let labels = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    let counts: Vec<usize> = calibration_report(&probs, &labels).unwrap().bins.iter().map(|b| b.count).collect();
    let bins_ok = counts == [3, 2, 2, 1, 3, 1, 2, 2];
    report(
        8,
        "calibration trend",
        ok && bins_ok && !parts.is_empty(),
        &format!("clean Brier base vs jachess-val: {}; 16-instance bin counts {counts:?}", parts.join(", ")),
    );
}

#[test]
fn c09_ablation_machinery() {
    let start = Instant::now();
    let cfg = config("ablation.toml");
    let out = cfg.output_path(scratch());
    let rep = cli::cmd_sweep(&cfg, &out).unwrap();
    let grid: Vec<_> = rep.cells.iter().filter(|c| c.hessian_dims.is_some()).collect();
    let populated = grid.iter().filter(|c| c.mean_score.is_finite() && c.mean_final_omega.is_finite()).count();
    let table = std::fs::read_to_string(out.join("sweep/table.csv")).unwrap();
    let table_cells = table
        .lines()
        .skip(1)
        .filter(|l| !l.contains("cross-holder"))
        .map(|l| l.split(',').skip(2).take(5).filter(|v| !v.is_empty()).count())
        .sum::<usize>();

    let pen = grid.iter().find(|c| c.variant == "penultimate-only" && c.hessian_dims == Some(10)).unwrap();
    let ch = rep.cells.iter().find(|c| c.variant == "cross-holder-train").unwrap();
    let d_score = (pen.mean_score - ch.mean_score).abs();
    let d_omega = (pen.mean_final_omega - ch.mean_final_omega).abs() / ch.mean_final_omega;
    let pass = grid.len() == 25 && populated == 25 && table_cells == 25 && d_score <= 0.03 && d_omega <= 0.25;
    report(
        9,
        "ablation machinery",
        pass,
        &format!(
            "{populated}/25 cells populated ({table_cells} in table); penultimate-only vs cross-holder: score diff {d_score:.4}, final penalty rel diff {:.1}%, {:.0}s",
            100.0 * d_omega,
            start.elapsed().as_secs_f64()
        ),
    );
}

const TINY: &str = r#"
schema-version = 1
output-dir = "determinism"
seeds = [3]
methods = ["base", "jachess-val", "cross-holder-train"]

[model]
vocab-size = 16
embed-dim = 8
num-layers = 2
num-heads = 2
ff-dim = 8
max-seq-len = 6

[train]
epochs = 2
batch-size = 8
learning-rate = 0.003
xi = 0.01

[[tasks]]
name = "token-majority"
vocab-size = 16
min-len = 2
max-len = 6
sizes = { train = 24, unlabeled = 16, test = 32 }

[sweep]
strategies = ["uniform", "softmax-base-smoothness"]
hessian-dims = [0, 2]
"#;

/// Every file under `dir` except manifests, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn c10_determinism() {
    let cfg = RunConfig::parse(TINY, Path::new("determinism.toml")).unwrap();
    let mut snaps = Vec::new();
    let mut hashes = Vec::new();
    for run in 0..2 {
        let root = scratch().join(format!("determinism-{run}"));
        let out = cfg.output_path(&root);
        let trained = cli::cmd_train(&cfg, &out).unwrap();
        cli::cmd_eval(&cfg, &out, &out).unwrap();
        cli::cmd_sweep(&cfg, &out).unwrap();
        let ckpt = out.join(&trained.manifest.runs[0].checkpoint);
        let opts = DiagnoseOptions { instances: 3, projections: 20, hessian_dims: 2, ..Default::default() };
        let diag = serde_json::to_string_pretty(&cli::cmd_diagnose(&ckpt, "token-majority", &opts).unwrap()).unwrap();
        std::fs::write(out.join("diagnose.json"), diag).unwrap();
        hashes.push(trained.manifest.config_hash);
        snaps.push(snapshot(&out));
    }
    let files = snaps[0].len();
    let identical = snaps[0] == snaps[1] && hashes[0] == hashes[1];

    let (t, first) = robustness();
    let again = scratch().join("robustness-eval-rerun");
    let second = cli::cmd_eval(&t.cfg, &t.out, &again).unwrap();
    let eval_same = std::fs::read(t.out.join("eval/report.json")).unwrap() == std::fs::read(again.join("eval/report.json")).unwrap()
        && first.report == second.report;
    report(
        10,
        "determinism",
        identical && eval_same && files > 10,
        &format!("{files} report and checkpoint files byte-identical across reruns: {identical}; robustness eval rerun identical: {eval_same}"),
    );
}
