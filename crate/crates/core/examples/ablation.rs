//! The five-column ablation: unpruned ICL, IG relevance on the prediction
//! shift, IG on the max probability, relevance without normalization, and
//! a random mask of the same size.

use cplab::detection::IGConfig;
use cplab::pipeline::{ablate, detect, evaluate_tasks, gen_data, prune, train_model, RunConfig};

fn main() -> cplab::Result<()> {
    let cfg = RunConfig::smoke();
    let data = gen_data(&cfg)?;
    let (model, _) = train_model(&cfg, &data)?;
    let det = detect(&cfg, &model, &data, &IGConfig::default())?;
    let (pc, _, pruned) = prune(&cfg, &model, &data, &det.relevance)?;
    let unpruned = evaluate_tasks(&cfg, &model, &data)?;
    let ours = evaluate_tasks(&cfg, &pruned, &data)?;
    let table = ablate(&cfg, &model, &data, &det.copying, &pc, &unpruned, &ours)?;
    print!("{}", table.to_csv());
    println!(
        "Max IG pruned {} at {:.0}%, w/o Norm pruned {} at {:.0}%",
        table.max_ig_prune.layer,
        100.0 * table.max_ig_prune.rate,
        table.no_norm_prune.layer,
        100.0 * table.no_norm_prune.rate
    );
    Ok(())
}
