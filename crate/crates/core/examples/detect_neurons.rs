//! Collects copying errors on the vowel proxy and ranks the MLP neurons of
//! every block by Integrated-Gradients relevance.

use cplab::detection::{attribute, IGConfig};
use cplab::pipeline::{detect, gen_data, train_model, RunConfig};

fn main() -> cplab::Result<()> {
    let cfg = RunConfig::smoke();
    let data = gen_data(&cfg)?;
    let (model, _) = train_model(&cfg, &data)?;
    let ig = IGConfig::default();
    let det = detect(&cfg, &model, &data, &ig)?;
    println!("{} copying prompts, e.g. {}", det.copying.len(), data.tokenizer.decode(&det.copying[0].tokens)?);

    for r in &det.relevance {
        let mut order: Vec<usize> = (0..r.scores.len()).collect();
        order.sort_by(|&a, &b| r.scores[b].total_cmp(&r.scores[a]));
        let top: Vec<String> = order[..5].iter().map(|&j| format!("{j}:{:.3}", r.scores[j])).collect();
        println!("{}: top neurons {}", r.layer, top.join(" "));
    }

    let map = attribute(&model, &det.copying[0], det.relevance[0].layer, &ig)?;
    println!(
        "first prompt: F(1) = {:.4}, F(0) = {:.4}, sum of attributions {:.4}, completeness error {:.2e}",
        map.f_full,
        map.f_zero,
        map.values.iter().sum::<f64>(),
        map.completeness_error()
    );
    Ok(())
}
