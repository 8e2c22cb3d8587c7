//! Hutchinson estimates of per-layer Jacobian and Hessian norms against exact
//! values, for a growing number of projections.

use jachess::autodiff::Graph;
use jachess::estimators::{self, ProjectionSampler};
use jachess::model::{Checkpoint, ModelConfig};

fn main() -> jachess::Result<()> {
    let config = ModelConfig { vocab_size: 16, embed_dim: 8, num_layers: 2, num_heads: 2, ff_dim: 16, max_seq_len: 8, ..Default::default() };
    let ck = Checkpoint::init(&config)?;
    let batch = vec![vec![3, 7, 9, 12], vec![5, 5, 14]];
    let mut g = Graph::new();
    let trace = ck.forward_batch(&mut g, &batch, None)?;
    for k in 0..trace.num_layers() {
        let z = trace.layer(k)?;
        let exact_j: f64 = estimators::exact_jacobian_frob_sq_of(&mut g, z, trace.input, trace.batch)?.iter().sum::<f64>() / batch.len() as f64;
        let exact_h: f64 = estimators::exact_hessian_frob_sq_of(&mut g, z, trace.input, trace.batch, 0)?.iter().sum::<f64>() / batch.len() as f64;
        println!("layer {}: exact ||J||^2 {exact_j:.4}, exact ||H_0||^2 {exact_h:.4}", k + 1);
        for p in [10, 100, 1000] {
            let mut s = ProjectionSampler::gaussian(k as u64);
            let j = estimators::jacobian_frob_sq_of(&mut g, z, trace.input, trace.batch, &mut s, p)?.value;
            let h = estimators::hessian_frob_sq_of(&mut g, z, trace.input, trace.batch, 0, &mut s, p)?.value;
            println!("  p={p:<5} J {j:.4} ({:+.1}%)  H {h:.4} ({:+.1}%)", 100.0 * (j / exact_j - 1.0), 100.0 * (h / exact_h - 1.0));
        }
    }
    Ok(())
}
