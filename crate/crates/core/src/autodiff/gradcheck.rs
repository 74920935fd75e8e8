use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Which coordinates of each checked leaf get perturbed.
#[derive(Debug, Clone, Copy)]
pub struct CoordSampling {
    /// Upper bound on perturbed coordinates per leaf; smaller leaves are
    /// checked exhaustively.
    pub max_per_input: usize,
    pub seed: u64,
}

impl Default for CoordSampling {
    fn default() -> Self {
        Self { max_per_input: 64, seed: 0 }
    }
}

/// Compares reverse-mode gradients against central differences.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)` over
/// the sampled coordinates of `inputs` (every tracked leaf when empty).
/// The tape is left holding its original values and fresh gradients.
pub fn finite_diff_check(
    tape: &mut Tape<'_>,
    inputs: &[Var],
    output: Var,
    h: f64,
    sampling: CoordSampling,
) -> Result<f64> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Precondition(format!("finite-difference step {h} not in (0, 1e-2]")));
    }
    let targets: Vec<Var> = if inputs.is_empty() { tape.leaves().collect() } else { inputs.to_vec() };
    tape.backward(output)?;
    let analytic: Vec<_> = targets.iter().map(|&v| tape.grad_or_zeros(v)).collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut worst = 0.0f64;
    for (&v, grad) in targets.iter().zip(&analytic) {
        let n = tape.value(v).numel();
        let coords: Vec<usize> = if n <= sampling.max_per_input {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, sampling.max_per_input).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = tape.value(v).data()[c];
            let plus = eval_at(tape, v, c, orig + h, output)?;
            let minus = eval_at(tape, v, c, orig - h, output)?;
            tape.perturb_leaf(v, c, orig)?;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite-difference perturbation".into()));
            }
            let a = grad.data()[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    tape.replay()?;
    tape.backward(output)?;
    Ok(worst)
}

fn eval_at(tape: &mut Tape<'_>, v: Var, coord: usize, value: f64, output: Var) -> Result<f64> {
    tape.perturb_leaf(v, coord, value)?;
    tape.replay()?;
    Ok(tape.value(output).item())
}
