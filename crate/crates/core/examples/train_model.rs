//! Trains the toy decoder on the low-diversity ICL mixture, reports the
//! loss curve and per-task accuracy, and saves a checkpoint.
//!
//! cargo run --example train_model -- [--full] [CHECKPOINT]

use cplab::eval::mean_over_seeds;
use cplab::model::{Checkpoint, TrainingMeta};
use cplab::pipeline::{evaluate_tasks, gen_data, train_model, RunConfig};

fn main() -> cplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = if args.iter().any(|a| a == "--full") { RunConfig::default() } else { RunConfig::smoke() };
    let data = gen_data(&cfg)?;
    let (model, report) = train_model(&cfg, &data)?;
    let trace = &report.loss_trace;
    let every = (trace.len() / 8).max(1);
    for (i, chunk) in trace.chunks(every).enumerate() {
        println!("steps {:>5}..: mean loss {:.3}", i * every, chunk.iter().sum::<f64>() / chunk.len() as f64);
    }
    for c in mean_over_seeds(&evaluate_tasks(&cfg, &model, &data)?) {
        println!("{} {}-shot: accuracy {:.3}, copying {:.3}", c.task, c.shots, c.accuracy, c.copying_error);
    }
    if let Some(path) = args.iter().find(|a| !a.starts_with("--")) {
        let meta = TrainingMeta { steps: report.steps(), final_loss: report.final_loss(), seed: cfg.train.hyper.seed };
        Checkpoint { model, vocab: data.tokenizer.tokens().to_vec(), meta }.save(std::path::Path::new(path))?;
        println!("saved {path}");
    }
    Ok(())
}
