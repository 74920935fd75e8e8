use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{build_forward, Hooks, Readout};
use super::Model;
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::parallel::map_ordered;

/// One tokenized training sequence with its supervised positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<usize>,
    /// `(position, target token)`: the token expected right after `position`.
    pub targets: Vec<(usize, usize)>,
}

/// Adam with linear warmup; loss is cross-entropy on target positions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Stop once the mean loss of the last 20 steps is below this.
    pub loss_target: Option<f64>,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            loss_target: None,
            seed: 0,
        }
    }
}

/// Per-step training losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub reached_target: bool,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.loss_trace.len()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

const TARGET_WINDOW: usize = 20;
/// Smoothed loss this far above the first step's loss counts as divergence.
const DIVERGENCE_MARGIN: f64 = 1.05;

/// Trains `model` in place.
///
/// Errors with [`Error::Diverged`] when, after warmup, the smoothed loss
/// rises more than 5% above the first step's loss.
pub fn train(model: &mut Model, corpus: &[TrainSequence], hyper: &HyperParams) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for seq in corpus {
        model.check_context(&seq.tokens)?;
        if seq.targets.is_empty() {
            return Err(Error::Precondition("training sequence without answer positions".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let mut m: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut v = m.clone();
    let mut trace = Vec::with_capacity(hyper.steps);
    let mut ema = None::<f64>;
    let mut reached_target = false;

    for step in 0..hyper.steps {
        let batch: Vec<usize> = if hyper.batch_size >= corpus.len() {
            order.clone()
        } else {
            let mut b = Vec::with_capacity(hyper.batch_size);
            while b.len() < hyper.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                b.push(order[cursor]);
                cursor += 1;
            }
            b
        };
        let n_targets: usize = batch.iter().map(|&i| corpus[i].targets.len()).sum();
        let norm = 1.0 / n_targets as f64;
        let frozen: &Model = model;
        let results = map_ordered(&batch, |&i| sequence_grads(frozen, &corpus[i], norm));
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        trace.push(loss);

        let initial = trace[0];
        let smoothed = ema.map_or(loss, |e| 0.9 * e + 0.1 * loss);
        ema = Some(smoothed);
        if step >= hyper.warmup + TARGET_WINDOW && smoothed > DIVERGENCE_MARGIN * initial {
            return Err(Error::Diverged { step, loss: smoothed, initial });
        }

        if let Some(max_norm) = hyper.clip_norm {
            let norm: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }

        let lr = if hyper.warmup > 0 && step < hyper.warmup {
            hyper.lr * (step + 1) as f64 / hyper.warmup as f64
        } else {
            hyper.lr
        };
        let t = (step + 1) as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for ((p, g), (mi, vi)) in model.params_mut().iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut())) {
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                mi[k] = hyper.beta1 * mi[k] + (1.0 - hyper.beta1) * gk;
                vi[k] = hyper.beta2 * vi[k] + (1.0 - hyper.beta2) * gk * gk;
                let mhat = mi[k] / bc1;
                let vhat = vi[k] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + hyper.eps);
            }
        }

        if let Some(target) = hyper.loss_target {
            if trace.len() >= TARGET_WINDOW {
                let recent = &trace[trace.len() - TARGET_WINDOW..];
                if recent.iter().sum::<f64>() / TARGET_WINDOW as f64 <= target {
                    reached_target = true;
                    break;
                }
            }
        }
    }
    Ok(TrainReport { loss_trace: trace, reached_target })
}

/// Mean answer-token cross-entropy of `model` over `corpus`.
pub fn corpus_loss(model: &Model, corpus: &[TrainSequence]) -> Result<f64> {
    let n: usize = corpus.iter().map(|s| s.targets.len()).sum();
    let parts = map_ordered(corpus, |seq| -> Result<f64> {
        let mut tape = Tape::new();
        let (positions, _) = split_targets(seq);
        let trace = build_forward(model, &mut tape, &seq.tokens, &Hooks::default(), &Readout::Rows(positions), false)?;
        let lp = tape.log_softmax(trace.logits)?;
        let index: Vec<(usize, usize)> = seq.targets.iter().enumerate().map(|(k, &(_, t))| (k, t)).collect();
        let picks = tape.gather(lp, &index)?;
        let s = tape.sum(picks)?;
        Ok(-tape.value(s).item())
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / n as f64)
}

fn split_targets(seq: &TrainSequence) -> (Vec<usize>, Vec<usize>) {
    seq.targets.iter().copied().unzip()
}

fn sequence_grads(model: &Model, seq: &TrainSequence, norm: f64) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let (positions, _) = split_targets(seq);
    let trace = build_forward(model, &mut tape, &seq.tokens, &Hooks::default(), &Readout::Rows(positions), true)?;
    let lp = tape.log_softmax(trace.logits)?;
    let index: Vec<(usize, usize)> = seq.targets.iter().enumerate().map(|(k, &(_, t))| (k, t)).collect();
    for &(_, t) in &seq.targets {
        if t >= model.config().vocab_size {
            return Err(Error::Shape(format!("target token {t} outside vocabulary")));
        }
    }
    let picks = tape.gather(lp, &index)?;
    let s = tape.sum(picks)?;
    let loss = tape.scale(s, -norm)?;
    tape.backward(loss)?;
    let grads = trace.params.iter().map(|&p| tape.grad_or_zeros(p)).collect::<Result<Vec<_>>>()?;
    Ok((tape.value(loss).item(), grads))
}
