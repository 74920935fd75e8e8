//! Checks reverse-mode gradients of a small random transformer against
//! central finite differences.

use cplab::autodiff::{finite_diff_check, CoordSampling, Tape};
use cplab::model::{build_forward, Hooks, Model, ModelConfig, Readout};

fn main() -> cplab::Result<()> {
    let cfg = ModelConfig { n_blocks: 2, d_model: 16, n_heads: 4, d_ff: 32, vocab_size: 12, max_context: 16, seed: 7 };
    let model = Model::init(cfg)?;
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];

    let mut tape = Tape::new();
    let trace = build_forward(&model, &mut tape, &tokens, &Hooks::default(), &Readout::Last, true)?;
    let lp = tape.log_softmax(trace.logits)?;
    let pick = tape.gather(lp, &[(0, 5)])?;
    let loss = tape.scale(pick, -1.0)?;
    println!("loss {:.6}", tape.value(loss).item());

    for h in [1e-3, 1e-5] {
        let worst = finite_diff_check(&mut tape, &trace.params, loss, h, CoordSampling::default())?;
        println!("h = {h:e}: max relative error {worst:.2e}");
    }
    Ok(())
}
