//! A hand-built one-block model whose copying errors are caused by known
//! MLP neurons, for checking that attribution recovers them.
//!
//! Vocabulary: `:` (0), `,` (1), inputs `x0..x7` and labels `y0..y7`. The
//! task maps input `xi` to label `y((3i) mod 8)`. At the final `:`:
//!
//! - attention head 0 attends uniformly and adds a bag of the in-context
//!   labels, which pulls the prediction towards copying;
//! - attention head 1 attends to the previous token and writes the query's
//!   identity;
//! - one "recall" neuron per input reads the query and writes its gold
//!   label, which beats the bag;
//! - planted neuron `j` reads query `xj` and cancels part of its recall, so
//!   the bag wins on some prompts and the model copies;
//! - distractor neurons fire on every prompt and write to an unused
//!   direction, which only rescales the logits through the final layer
//!   norm.
//!
//! Every other neuron is zero.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BlockParam, Model, ModelConfig};
use crate::tasks::EncodedPrompt;

pub const N_INPUTS: usize = 8;
pub const N_LABELS: usize = 8;
pub const MAX_SHOTS: usize = 4;

const COLON: usize = 0;
const COMMA: usize = 1;

pub fn input_token(i: usize) -> usize {
    2 + i
}

pub fn label_token(y: usize) -> usize {
    2 + N_INPUTS + y
}

pub fn gold_of(input: usize) -> usize {
    (3 * input) % N_LABELS
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    /// How much of its query's recall each planted neuron cancels,
    /// strongest first. Planted neuron `j` acts on query `xj`.
    pub strengths: Vec<f64>,
    pub distractors: usize,
    pub d_ff: usize,
    /// Seeds the placement of the neurons in the layer.
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self { strengths: vec![0.9, 0.7, 0.5, 0.3], distractors: 4, d_ff: 128, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Planted {
    pub model: Model,
    /// Layer index of planted neuron `j`, in strength order.
    pub planted: Vec<usize>,
    /// Layer index of the recall neuron of input `i`.
    pub recall: Vec<usize>,
    pub distractors: Vec<usize>,
}

/// Logical residual directions, each stored as a zero-mean pair of
/// physical coordinates so every layer norm reduces to a rescaling.
struct Basis {
    d: usize,
}

impl Basis {
    const VOCAB: usize = 2 + N_INPUTS + N_LABELS;
    const POS: usize = 4 * MAX_SHOTS + 2;

    fn logical() -> usize {
        Self::VOCAB + Self::POS + N_INPUTS + N_LABELS + 1
    }

    fn tok(t: usize) -> usize {
        t
    }

    fn pos(i: usize) -> usize {
        Self::VOCAB + i
    }

    fn query(x: usize) -> usize {
        Self::VOCAB + Self::POS + x
    }

    fn gold(y: usize) -> usize {
        Self::VOCAB + Self::POS + N_INPUTS + y
    }

    fn spare() -> usize {
        Self::logical() - 1
    }

    /// Physical vector of logical direction `l`, scaled by `v`.
    fn vec(&self, l: usize, v: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        x[2 * l] = v / std::f64::consts::SQRT_2;
        x[2 * l + 1] = -v / std::f64::consts::SQRT_2;
        x
    }

    fn add(&self, row: &mut [f64], l: usize, v: f64) {
        for (r, x) in row.iter_mut().zip(self.vec(l, v)) {
            *r += x;
        }
    }
}

const BAG_GAIN: f64 = 3.0;
const PREV_SHARPNESS: f64 = 60.0;
const READ_GAIN: f64 = 1.0;
const THRESHOLD: f64 = 1.0;
const RECALL_GAIN: f64 = 0.15;

fn set_col(m: &mut Model, p: BlockParam, col: usize, v: &[f64]) {
    let w = m.block_param_mut(0, p);
    for (r, &x) in v.iter().enumerate() {
        w.row_mut(r)[col] = x;
    }
}

pub fn planted_model(spec: &PlantedSpec) -> Result<Planted> {
    let l = Basis::logical();
    let d = 2 * l;
    let k = spec.strengths.len();
    if k > N_INPUTS || N_INPUTS + k + spec.distractors > spec.d_ff {
        return Err(Error::Config("planted neurons do not fit the layer".into()));
    }
    let cfg = ModelConfig {
        n_blocks: 1,
        d_model: d,
        n_heads: 2,
        d_ff: spec.d_ff,
        vocab_size: Basis::VOCAB,
        max_context: Basis::POS,
        seed: spec.seed,
    };
    let b = Basis { d };
    let mut m = Model::zeros(cfg)?;
    let hd = l;
    // Every embedding row is one token direction plus one position
    // direction, so the first layer norm scales by sqrt(d / 2).
    let c1 = (d as f64 / 2.0).sqrt();

    for name in ["blocks.0.ln1.gain", "blocks.0.ln2.gain", "ln_f.gain"] {
        m.param_mut(name).expect("known parameter").data_mut().fill(1.0);
    }
    let tok = m.param_mut("tok_emb").expect("known parameter");
    for t in 0..Basis::VOCAB {
        b.add(tok.row_mut(t), Basis::tok(t), 1.0);
    }
    let pos = m.param_mut("pos_emb").expect("known parameter");
    for i in 0..Basis::POS {
        b.add(pos.row_mut(i), Basis::pos(i), 1.0);
    }

    // Head 0 has zero queries and keys, so it attends uniformly. Head-space
    // coordinates are plain: slot y of head 0 is label y, slot x of head 1
    // is input x, slot i of head 1's keys is position i.
    for y in 0..N_LABELS {
        let v = b.vec(Basis::tok(label_token(y)), BAG_GAIN / c1);
        m.block_param_mut(0, BlockParam::Wv).row_mut(y).copy_from_slice(&v);
        set_col(&mut m, BlockParam::Wo, y, &b.vec(Basis::tok(label_token(y)), 1.0));
    }
    for i in 0..Basis::POS {
        if i + 1 < Basis::POS {
            let q = b.vec(Basis::pos(i + 1), PREV_SHARPNESS / c1);
            m.block_param_mut(0, BlockParam::Wq).row_mut(hd + i).copy_from_slice(&q);
        }
        m.block_param_mut(0, BlockParam::Wk).row_mut(hd + i).copy_from_slice(&b.vec(Basis::pos(i), 1.0 / c1));
    }
    for x in 0..N_INPUTS {
        let v = b.vec(Basis::tok(input_token(x)), 1.0 / c1);
        m.block_param_mut(0, BlockParam::Wv).row_mut(hd + x).copy_from_slice(&v);
        set_col(&mut m, BlockParam::Wo, hd + x, &b.vec(Basis::query(x), 1.0));
    }

    let mut slots: Vec<usize> = (0..spec.d_ff).collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let recall = slots[..N_INPUTS].to_vec();
    let planted = slots[N_INPUTS..N_INPUTS + k].to_vec();
    let distractors = slots[N_INPUTS + k..N_INPUTS + k + spec.distractors].to_vec();

    let neuron = |m: &mut Model, j: usize, read: &[f64], bias: f64, write: &[f64]| {
        m.block_param_mut(0, BlockParam::UpWeight).row_mut(j).copy_from_slice(read);
        m.block_param_mut(0, BlockParam::UpBias).data_mut()[j] = bias;
        set_col(m, BlockParam::DownWeight, j, write);
    };
    for (x, &j) in recall.iter().enumerate() {
        let read = b.vec(Basis::query(x), READ_GAIN);
        neuron(&mut m, j, &read, -THRESHOLD, &b.vec(Basis::gold(gold_of(x)), RECALL_GAIN));
    }
    for (x, (&j, &s)) in planted.iter().zip(&spec.strengths).enumerate() {
        let read = b.vec(Basis::query(x), READ_GAIN);
        neuron(&mut m, j, &read, -THRESHOLD, &b.vec(Basis::gold(gold_of(x)), -s * RECALL_GAIN));
    }
    for (i, &j) in distractors.iter().enumerate() {
        neuron(&mut m, j, &vec![0.0; d], 1.0 + 0.25 * i as f64, &b.vec(Basis::spare(), 0.2));
    }

    // The unembedding reads the bag and the gold direction of each label.
    let un = m.param_mut("unembed").expect("known parameter");
    for y in 0..N_LABELS {
        let row = un.row_mut(label_token(y));
        b.add(row, Basis::tok(label_token(y)), 1.0);
        b.add(row, Basis::gold(y), 1.0);
    }
    Ok(Planted { model: m, planted, recall, distractors })
}

/// `n` prompts with 1 to 4 demonstrations of distinct inputs; the query is
/// never a demonstration input, so the gold label is never in context.
pub fn planted_prompts(n: usize, seed: u64) -> Vec<EncodedPrompt> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let shots = rng.random_range(1..=MAX_SHOTS);
            let mut inputs: Vec<usize> = (0..N_INPUTS).collect();
            inputs.shuffle(&mut rng);
            let (demos, query) = (&inputs[..shots], inputs[shots]);
            let mut tokens = Vec::new();
            let mut context_labels = Vec::new();
            for &x in demos {
                let y = label_token(gold_of(x));
                tokens.extend([input_token(x), COLON, y, COMMA]);
                context_labels.push(y);
            }
            tokens.extend([input_token(query), COLON]);
            EncodedPrompt { answer_pos: tokens.len(), tokens, gold: label_token(gold_of(query)), context_labels }
        })
        .collect()
}
