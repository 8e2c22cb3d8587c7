//! Train base and jachess-train classifiers on a synthetic task and compare them.

use std::time::Instant;

use jachess::data::{generate_task, Sizes, TaskSpec};
use jachess::evaluation::evaluate;
use jachess::model::{ModelConfig, TaskHead};
use jachess::regularizer::{exact_profile, RegularizerConfig};
use jachess::trainer::{train, Method, TrainConfig};

fn main() -> jachess::Result<()> {
    let task = std::env::args().nth(1).unwrap_or_else(|| "token-majority".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = TaskSpec::builtin(&task, 24, 4, 8)?;
    let data = generate_task(&spec, Sizes { train: 256, unlabeled: 128, test: 200 }, 0)?;
    let model = ModelConfig {
        vocab_size: 24,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ff_dim: 32,
        max_seq_len: spec.max_input_len(),
        head: TaskHead::Classification { classes: 2 },
        seed: 0,
    };
    let reg = RegularizerConfig::default();
    for method in [Method::Base, Method::JachessTrain, Method::JachessVal] {
        let cfg = TrainConfig { method, epochs, learning_rate: 3e-3, xi: Some(1e-2), ..Default::default() };
        let start = Instant::now();
        let rec = train(&cfg, &reg, &spec, &data.train, Some(&data.unlabeled), &model)?;
        let ck = rec.checkpoint.as_ref().unwrap();
        let eval = evaluate(ck, &data.test, &spec)?;
        let jac: f64 = exact_profile(ck, &data.test.iter().take(32).map(|e| e.tokens()).collect::<Vec<_>>())?.iter().sum();
        println!(
            "{:<16} score {:.3}  brier {:.4}  sum|J| {:.4}  final loss {:.4}  {:.1}s",
            method.name(),
            eval.score.value,
            eval.brier.unwrap_or(f64::NAN),
            jac,
            rec.task_loss.last().unwrap(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
