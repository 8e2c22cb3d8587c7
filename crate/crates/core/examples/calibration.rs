//! Trains a small classifier and prints its reliability table, clean and
//! under token corruption.

use jachess::data::{generate_task, Sizes, TaskSpec};
use jachess::evaluation::{corrupt_examples, evaluate};
use jachess::model::ModelConfig;
use jachess::regularizer::RegularizerConfig;
use jachess::trainer::{model_config_for, train, Method, TrainConfig};

fn main() -> jachess::Result<()> {
    let spec = TaskSpec::builtin("token-majority", 24, 4, 8)?;
    let data = generate_task(&spec, Sizes { train: 256, unlabeled: 64, test: 400 }, 0)?;
    let base = ModelConfig { vocab_size: 24, embed_dim: 16, num_layers: 2, num_heads: 2, ff_dim: 32, max_seq_len: 8, ..Default::default() };
    let model = model_config_for(&base, &spec, 0)?;
    let cfg = TrainConfig { method: Method::Base, epochs: 6, learning_rate: 3e-3, ..Default::default() };
    let rec = train(&cfg, &RegularizerConfig::default(), &spec, &data.train, None, &model)?;
    let ck = rec.checkpoint.as_ref().unwrap();
    for rate in [0.0, 0.2] {
        let test = corrupt_examples(&data.test, rate, 1, spec.vocab_size)?;
        let eval = evaluate(ck, &test, &spec)?;
        let cal = eval.calibration.unwrap();
        println!("corruption {rate}: accuracy {:.3}, brier {:.4}, ece {:.4}", eval.accuracy.unwrap(), eval.brier.unwrap(), cal.ece);
        println!("  bin            count  mean prob  frequency");
        for b in &cal.bins {
            println!("  [{:.3}, {:.3})  {:>5}  {:>9.3}  {:>9.3}", b.lower, b.upper, b.count, b.mean_prob.unwrap_or(f64::NAN), b.frequency.unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
