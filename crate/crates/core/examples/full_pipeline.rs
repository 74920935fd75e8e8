//! Runs every stage in memory and writes the report, relevance scores and
//! stage timings. The default configuration takes a few minutes on one
//! core; `--smoke` takes about a second.
//!
//! cargo run --release --example full_pipeline -- [--smoke] [OUT_DIR]

use std::path::PathBuf;

use cplab::fsutil::{write_atomic, write_json_atomic};
use cplab::pipeline::{run_all, RunConfig};

fn main() -> cplab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = if args.iter().any(|a| a == "--smoke") { RunConfig::smoke() } else { RunConfig::default() };
    let out = PathBuf::from(args.iter().find(|a| !a.starts_with("--")).cloned().unwrap_or_else(|| "runs/full".into()));
    let run = run_all(&cfg)?;
    let r = &run.report;
    write_atomic(&out.join("report.json"), &r.to_bytes()?)?;
    write_atomic(&out.join(&r.relevance_file), &run.relevance.to_bytes()?)?;
    write_json_atomic(&out.join("timing.json"), &run.timing)?;

    println!("run {} ({} copying prompts)", r.run_id, r.copying_prompts);
    println!("pruned {} at {:.0}%", r.prune.layer, 100.0 * r.prune.rate);
    let d = &r.directional;
    println!(
        "copying rate {:.4} -> {:.4}, largest task accuracy drop {:.4}, direction holds: {}",
        d.copy_unpruned, d.copy_pruned, d.max_acc_drop, d.holds
    );
    print!("{}", r.ablation.to_csv());
    println!("task vectors: TV-pruned >= TV on {} seeds", r.taskvec.seeds_holding);
    for (stage, secs) in &run.timing {
        println!("{stage}: {secs:.1}s");
    }
    println!("written to {}", out.display());
    Ok(())
}
