//! Writes the error bars, accuracy scatter and task-vector figures as CSV
//! and SVG for a smoke-sized run.
//!
//! cargo run --example figures -- [OUT_DIR]

use std::path::PathBuf;

use cplab::pipeline::figures::{bars_csv, bars_svg, modes_csv, modes_svg, scatter_csv, scatter_svg};
use cplab::pipeline::{run_all, RunConfig};

fn main() -> cplab::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/figures".into()));
    std::fs::create_dir_all(&out)?;
    let r = run_all(&RunConfig::smoke())?.report;
    let figures = [
        ("error_bars", bars_csv("toy", &r.eval_unpruned, &r.eval_pruned), bars_svg as fn(&str) -> cplab::Result<String>),
        ("accuracy_scatter", scatter_csv(&r.eval_unpruned, &r.eval_pruned), scatter_svg),
        ("taskvec_modes", modes_csv(&r.taskvec), modes_svg),
    ];
    for (name, csv, render) in figures {
        std::fs::write(out.join(format!("{name}.csv")), &csv)?;
        std::fs::write(out.join(format!("{name}.svg")), render(&csv)?)?;
        print!("{name}.csv\n{csv}");
    }
    println!("written to {}", out.display());
    Ok(())
}
