//! Builds the hand-made model whose copying errors come from known MLP
//! neurons and checks that relevance ranks them first.

use cplab::detection::{relevance, select_copying, IGConfig};
use cplab::eval::{outcomes, OutcomeKind};
use cplab::model::{LayerHandle, Model};
use cplab::planted::{planted_model, planted_prompts, PlantedSpec};
use cplab::pruning::{apply, PruneMask};
use cplab::tasks::EncodedPrompt;

fn copy_rate(model: &Model, prompts: &[EncodedPrompt]) -> cplab::Result<f64> {
    let o = outcomes(model, prompts)?;
    Ok(o.iter().filter(|&&k| k == OutcomeKind::CopyingError).count() as f64 / o.len() as f64)
}

fn main() -> cplab::Result<()> {
    let p = planted_model(&PlantedSpec::default())?;
    let prompts = planted_prompts(500, 1);
    let layer = LayerHandle::mlp_up(0);
    let width = p.model.config().d_ff;
    println!("copy rate {:.3}; planted neurons {:?}", copy_rate(&p.model, &prompts)?, p.planted);

    let copying = select_copying(&p.model, &prompts, 512, 0)?;
    let rel = relevance(&p.model, &copying, layer, &IGConfig::default())?;
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| rel.scores[b].total_cmp(&rel.scores[a]));
    for &j in &order[..8] {
        let mut mask = PruneMask::empty(layer, width);
        mask.mask[j] = true;
        let tag = if p.planted.contains(&j) { "planted" } else { "" };
        println!(
            "neuron {j:>3}: relevance {:.3}, copy rate without it {:.3} {tag}",
            rel.scores[j],
            copy_rate(&apply(&p.model, &mask)?, &prompts)?
        );
    }
    Ok(())
}
