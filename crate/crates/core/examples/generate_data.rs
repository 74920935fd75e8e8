//! Generates the task splits and the vowel proxy, prints a sample of each
//! and a few-shot prompt, and writes them to a directory.
//!
//! cargo run --example generate_data -- [OUT_DIR]

use cplab::pipeline::{gen_data, RunConfig};
use cplab::tasks::{build_prompt, TaskId};

fn main() -> cplab::Result<()> {
    let cfg = RunConfig::default();
    let data = gen_data(&cfg)?;
    println!("vocabulary: {} tokens", data.tokenizer.len());
    for (id, splits) in &data.tasks {
        let e = &splits.train[0];
        println!(
            "{id} ({}): {} train / {} val / {} test, e.g. {} -> {}",
            id.description(),
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            e.input,
            e.label
        );
    }
    println!("vowel proxy: {} train / {} val words", data.proxy_train.len(), data.proxy_val.len());

    let t5 = data.task(TaskId::T5)?;
    let query = &t5.test[0];
    let (tokens, answer_pos) = build_prompt(&data.tokenizer, &t5.train[..3], &query.input, cfg.model.max_context)?;
    println!("3-shot prompt: {}", data.tokenizer.decode(&tokens)?);
    println!("answer at position {answer_pos}, gold label {}", query.label);

    if let Some(dir) = std::env::args().nth(1) {
        data.save(std::path::Path::new(&dir))?;
        println!("written to {dir}");
    }
    Ok(())
}
