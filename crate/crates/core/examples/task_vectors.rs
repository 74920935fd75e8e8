//! Extracts a task vector from a few-shot prompt, patches it into a
//! zero-shot query, and compares ICL, task-vector and pruned-task-vector
//! accuracy per shot.

use cplab::detection::IGConfig;
use cplab::pipeline::{detect, gen_data, prune, taskvec, train_model, RunConfig};
use cplab::tasks::TaskId;
use cplab::taskvec::{extract, patched_predict};

fn main() -> cplab::Result<()> {
    let cfg = RunConfig::smoke();
    let data = gen_data(&cfg)?;
    let (model, _) = train_model(&cfg, &data)?;

    let t5 = data.task(TaskId::T5)?;
    let tv = extract(&model, &data.tokenizer, &t5.train[..3], &t5.val[0].input, 0)?;
    for e in &t5.test[..3] {
        let pred = patched_predict(&model, &data.tokenizer, &e.input, &tv)?;
        println!("{} -> {} (gold {})", e.input, pred, e.label);
    }

    let det = detect(&cfg, &model, &data, &IGConfig::default())?;
    let (_, _, pruned) = prune(&cfg, &model, &data, &det.relevance)?;
    let table = taskvec(&cfg, &model, &pruned, &data)?;
    for s in &table.per_shot {
        println!("{}-shot: ICL {:.3}, TV {:.3}, TV-pruned {:.3}", s.shot, s.icl, s.tv, s.tv_pruned);
    }
    for s in &table.per_seed {
        println!("seed {}: TV-pruned minus TV {:+.4}", s.seed, s.delta);
    }
    println!(
        "TV-pruned >= TV on {} of {} seeds (variance {:.2e}), target {}",
        table.seeds_holding,
        table.per_seed.len(),
        table.delta_variance,
        if table.holds { "met" } else { "not met" }
    );
    Ok(())
}
