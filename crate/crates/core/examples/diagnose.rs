//! Per-layer smoothness diagnosis of a freshly initialized model, with the
//! exact oracle alongside the estimates.

use jachess::cli::{cmd_diagnose, DiagnoseOptions};
use jachess::model::{Checkpoint, ModelConfig};

fn show(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn main() -> jachess::Result<()> {
    let dir = std::env::temp_dir().join("jachess-diagnose-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("init.ckpt");
    let config = ModelConfig { vocab_size: 24, embed_dim: 16, num_layers: 3, num_heads: 2, ff_dim: 32, max_seq_len: 8, ..Default::default() };
    Checkpoint::init(&config)?.save(&path)?;
    let opts = DiagnoseOptions { instances: 6, projections: 200, hessian_dims: 4, ..Default::default() };
    let report = cmd_diagnose(&path, "three-way-count", &opts)?;
    for l in &report.layers {
        println!(
            "layer {}: ||J||^2 {:.4} (exact {})  sum ||H_d||^2 {:.4} (exact {}) over dims {:?}",
            l.layer,
            l.jacobian.value,
            show(l.jacobian_exact),
            l.hessian,
            show(l.hessian_exact),
            l.hessian_dims
        );
    }
    for s in &report.lambdas {
        match &s.lambdas {
            Some(l) => println!("{:<28} {}", s.strategy.name(), l.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join("  ")),
            None => println!("{:<28} {}", s.strategy.name(), s.error.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}
