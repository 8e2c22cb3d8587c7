use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
schema-version = 1
output-dir = "out"
seeds = [1]
methods = ["base", "jachess-train"]

[model]
vocab-size = 16
embed-dim = 8
num-layers = 1
num-heads = 2
ff-dim = 8
max-seq-len = 6

[train]
epochs = 1
batch-size = 8

[[tasks]]
name = "token-majority"
vocab-size = 16
min-len = 2
max-len = 6
sizes = { train = 16, unlabeled = 8, test = 16 }
"#;

fn jachess(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jachess"))
        .args(args)
        .env("JACHESS_OUTPUT_ROOT", root)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn train_eval_diagnose_under_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let root = dir.path().join("root");
    let cfg = cfg.to_str().unwrap();

    let o = jachess(&root, &["train", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = root.join("out");
    assert!(out.join("manifest.json").is_file());
    assert!(out.join("checkpoints/token-majority__base__seed1.ckpt").is_file());

    let o = jachess(&root, &["eval", out.to_str().unwrap(), cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("eval/summary.csv").is_file());

    let ckpt = out.join("checkpoints/token-majority__jachess-train__seed1.ckpt");
    let report = dir.path().join("diag.json");
    let o = jachess(
        &root,
        &["diagnose", ckpt.to_str().unwrap(), "token-majority", "--instances", "2", "--projections", "4", "--out", report.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 1);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, CONFIG.replace("epochs = 1", "epochs = 1\nmystery = 3")).unwrap();
    let o = jachess(dir.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));

    let o = jachess(dir.path(), &["train"]);
    assert_eq!(code(&o), 2);
    let o = jachess(dir.path(), &["train", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = jachess(dir.path(), &["diagnose", ckpt.to_str().unwrap(), "token-majority"]);
    assert_eq!(code(&o), 3);

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let o = jachess(dir.path(), &["eval", dir.path().join("nowhere").to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn runtime_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"").unwrap();
    let o = jachess(&blocker, &["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}
