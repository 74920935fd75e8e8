//! Sweeps blocks and pruning rates on proxy validation prompts, prunes the
//! selected neurons and compares held-out accuracy and copying errors.

use cplab::detection::IGConfig;
use cplab::eval::{mean_over_seeds, overall};
use cplab::pipeline::{detect, evaluate_tasks, gen_data, prune, train_model, RunConfig};

fn main() -> cplab::Result<()> {
    let cfg = RunConfig::smoke();
    let data = gen_data(&cfg)?;
    let (model, _) = train_model(&cfg, &data)?;
    let det = detect(&cfg, &model, &data, &IGConfig::default())?;
    let (pc, mask, pruned) = prune(&cfg, &model, &data, &det.relevance)?;
    for p in &pc.points {
        println!("block {} rate {:.2}: {} neurons, val accuracy {:.3}", p.block, p.rate, p.neurons, p.accuracy);
    }
    println!(
        "selected {} at {:.0}% (sigma {:.4}): val {:.3} vs unpruned {:.3}",
        pc.layer,
        100.0 * pc.rate,
        pc.sigma,
        pc.val_accuracy,
        pc.unpruned_accuracy
    );
    println!("pruned neurons {:?}", mask.indices());

    let before = evaluate_tasks(&cfg, &model, &data)?;
    let after = evaluate_tasks(&cfg, &pruned, &data)?;
    for (b, a) in mean_over_seeds(&before).iter().zip(mean_over_seeds(&after)) {
        println!(
            "{} {}-shot: accuracy {:.3} -> {:.3}, copying {:.3} -> {:.3}",
            b.task, b.shots, b.accuracy, a.accuracy, b.copying_error, a.copying_error
        );
    }
    println!(
        "overall copying rate {:.4} -> {:.4}",
        overall(&before, |r| r.copying_error),
        overall(&after, |r| r.copying_error)
    );
    Ok(())
}
