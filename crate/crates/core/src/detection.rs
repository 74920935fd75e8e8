//! Copying-neuron detection: prediction shift, Integrated Gradients along
//! the layer-scaling path, relevance aggregation and the pruning sweep.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{argmax, classify_ids, OutcomeKind, Predictor};
use crate::model::{build_forward, Hooks, LayerHandle, Model, Readout, ScaleHook};
use crate::parallel::map_ordered;
use crate::pruning::{apply, mask_from_relevance, PruneMask};
use crate::seed::derive_seed;
use crate::tasks::{sample_prompts, DemoSampling, EncodedPrompt, ICLExample, Tokenizer};

/// Default number of Riemann steps.
pub const DEFAULT_STEPS: usize = 20;
/// At most this many copying prompts feed the relevance scores.
pub const MAX_COPYING_PROMPTS: usize = 512;

/// The scalar whose attribution is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IgTarget {
    /// `Σ_i |P(y_i) − P(ŷ)|` over the in-context labels.
    Shift,
    /// Probability of the token the unmodified model ranks first.
    MaxProb,
}

impl fmt::Display for IgTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IgTarget::Shift => "shift",
            IgTarget::MaxProb => "maxprob",
        })
    }
}

impl FromStr for IgTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shift" => Ok(IgTarget::Shift),
            "maxprob" => Ok(IgTarget::MaxProb),
            other => Err(Error::Config(format!("unknown IG target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IGConfig {
    pub m: usize,
    pub target: IgTarget,
    pub normalize: bool,
}

impl Default for IGConfig {
    fn default() -> Self {
        Self { m: DEFAULT_STEPS, target: IgTarget::Shift, normalize: true }
    }
}

/// `l_u` = summed probability of the in-context labels (per occurrence),
/// `l_v` = probability of the gold label, `delta = l_v − l_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionShift {
    pub l_u: f64,
    pub l_v: f64,
    pub delta: f64,
}

impl PredictionShift {
    pub fn from_dist(dist: &[f64], context_labels: &[usize], gold: usize) -> Self {
        let l_u = context_labels.iter().map(|&y| dist[y]).sum::<f64>();
        let l_v = dist[gold];
        Self { l_u, l_v, delta: l_v - l_u }
    }
}

pub fn prediction_shift(
    model: &Model,
    prompt: &EncodedPrompt,
    layer: LayerHandle,
    neurons: &[usize],
    alpha: f64,
) -> Result<PredictionShift> {
    check_alpha(alpha)?;
    let dist = model.forward_with_scale(&prompt.tokens, layer, neurons, alpha)?;
    Ok(PredictionShift::from_dist(&dist, &prompt.context_labels, prompt.gold))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Precondition(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Per-neuron attributions of one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub layer: LayerHandle,
    pub m: usize,
    pub target: IgTarget,
    pub values: Vec<f64>,
    /// Objective with the layer intact (α = 1).
    pub f_full: f64,
    /// Objective with the layer's outputs zeroed (α = 0).
    pub f_zero: f64,
}

impl AttributionMap {
    /// `|Σ_j Attr_j − (F(1) − F(0))| / max(|F(1) − F(0)|, 1e-6)`.
    pub fn completeness_error(&self) -> f64 {
        let gap = self.f_full - self.f_zero;
        (self.values.iter().sum::<f64>() - gap).abs() / gap.abs().max(1e-6)
    }
}

/// Objective with every neuron of `layer` scaled by `alpha`, plus its
/// gradient with respect to the per-neuron scale factors.
fn objective(
    model: &Model,
    prompt: &EncodedPrompt,
    layer: LayerHandle,
    alpha: f64,
    target: IgTarget,
    target_token: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = Tape::new();
    let hooks = Hooks { scale: Some(ScaleHook::uniform(model, layer, alpha, want_grad)?), patch: None };
    let trace = build_forward(model, &mut tape, &prompt.tokens, &hooks, &Readout::Last, false)?;
    let probs = tape.softmax(trace.logits)?;
    let out = match target {
        IgTarget::MaxProb => {
            let p = tape.gather(probs, &[(0, target_token)])?;
            tape.sum(p)?
        }
        IgTarget::Shift => {
            let ctx: Vec<(usize, usize)> = prompt.context_labels.iter().map(|&y| (0, y)).collect();
            let gold = vec![(0, prompt.gold); ctx.len()];
            let a = tape.gather(probs, &ctx)?;
            let g = tape.gather(probs, &gold)?;
            let d = tape.sub(a, g)?;
            let d = tape.abs(d)?;
            tape.sum(d)?
        }
    };
    let value = tape.value(out).item();
    if !want_grad {
        return Ok((value, None));
    }
    tape.backward(out)?;
    let scale = trace.scale.ok_or_else(|| Error::Graph("scale hook was not recorded".into()))?;
    Ok((value, Some(tape.grad(scale)?.data().to_vec())))
}

/// Integrated Gradients of the configured objective with respect to every
/// neuron of `layer`, along the straight path that scales the whole layer
/// from 0 to its actual output, with a right Riemann sum of `m` steps.
///
/// Does not check that the prompt is a copying error; see [`attribute`].
pub fn integrated_gradients(
    model: &Model,
    prompt: &EncodedPrompt,
    layer: LayerHandle,
    m: usize,
    target: IgTarget,
) -> Result<AttributionMap> {
    if m == 0 {
        return Err(Error::Config("IG needs at least one step".into()));
    }
    if target == IgTarget::Shift && prompt.context_labels.is_empty() {
        return Err(Error::Precondition("shift target needs in-context labels".into()));
    }
    model.check_layer(layer)?;
    let target_token = argmax(&model.next_token_dist(&prompt.tokens)?);
    let mut acc = vec![0.0; model.config().d_ff];
    for r in 1..=m {
        let alpha = r as f64 / m as f64;
        let (_, g) = objective(model, prompt, layer, alpha, target, target_token, true)?;
        for (a, gi) in acc.iter_mut().zip(g.expect("gradient requested")) {
            *a += gi;
        }
    }
    let values = acc.into_iter().map(|a| a / m as f64).collect();
    let (f_full, _) = objective(model, prompt, layer, 1.0, target, target_token, false)?;
    let (f_zero, _) = objective(model, prompt, layer, 0.0, target, target_token, false)?;
    Ok(AttributionMap { layer, m, target, values, f_full, f_zero })
}

/// [`integrated_gradients`] on a prompt the model gets wrong by copying.
pub fn attribute(model: &Model, prompt: &EncodedPrompt, layer: LayerHandle, cfg: &IGConfig) -> Result<AttributionMap> {
    let pred = model.predict_id(prompt)?;
    if classify_ids(pred, prompt.gold, &prompt.context_labels) != OutcomeKind::CopyingError {
        return Err(Error::Precondition("prompt is not a copying error".into()));
    }
    integrated_gradients(model, prompt, layer, cfg.m, cfg.target)
}

/// Attributions for many prompts, in parallel and in input order.
pub fn attribute_all(
    model: &Model,
    prompts: &[EncodedPrompt],
    layer: LayerHandle,
    cfg: &IGConfig,
) -> Result<Vec<AttributionMap>> {
    map_ordered(prompts, |p| attribute(model, p, layer, cfg)).into_iter().collect()
}

/// Per-neuron relevance `R(w_j)` for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScores {
    pub layer: LayerHandle,
    pub m: usize,
    pub target: IgTarget,
    pub normalize: bool,
    /// Number of prompts averaged.
    pub samples: usize,
    pub scores: Vec<f64>,
}

/// Min-max normalization to `[0, 1]`; a constant vector maps to zeros.
pub fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
}

/// Averages the (optionally min-max normalized) attribution vectors.
pub fn aggregate(maps: &[AttributionMap], normalize: bool) -> Result<RelevanceScores> {
    let first = maps.first().ok_or_else(|| Error::Empty("attribution maps".into()))?;
    let width = first.values.len();
    let mut sum = vec![0.0; width];
    for map in maps {
        if map.layer != first.layer || map.values.len() != width {
            return Err(Error::LayerMismatch("attribution maps come from different layers".into()));
        }
        let v = if normalize { min_max(&map.values) } else { map.values.clone() };
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = maps.len() as f64;
    Ok(RelevanceScores {
        layer: first.layer,
        m: first.m,
        target: first.target,
        normalize,
        samples: maps.len(),
        scores: sum.into_iter().map(|s| s / n).collect(),
    })
}

/// How proxy prompts are drawn for detection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub shots: Vec<usize>,
    pub per_shot: usize,
    pub cap: usize,
    pub seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { shots: vec![1, 2, 3, 4], per_shot: 256, cap: MAX_COPYING_PROMPTS, seed: 0 }
    }
}

/// Proxy prompts whose demonstrations and query both come from `proxy`.
pub fn proxy_prompts(
    tok: &Tokenizer,
    proxy: &[ICLExample],
    shots: &[usize],
    per_shot: usize,
    seed: u64,
    max_context: usize,
) -> Result<Vec<EncodedPrompt>> {
    let mut out = Vec::with_capacity(shots.len() * per_shot);
    for &k in shots {
        let s = derive_seed(seed, &[k as u64]);
        for p in sample_prompts(proxy, proxy, k, per_shot, s, DemoSampling::Uniform)? {
            out.push(p.encode(tok, max_context)?);
        }
    }
    Ok(out)
}

/// The prompts among `prompts` on which `model` makes a copying error,
/// subsampled to at most `cap` by `seed` (input order is kept).
pub fn select_copying(
    model: &impl Predictor,
    prompts: &[EncodedPrompt],
    cap: usize,
    seed: u64,
) -> Result<Vec<EncodedPrompt>> {
    let kinds = map_ordered(prompts, |p| -> Result<OutcomeKind> {
        Ok(classify_ids(model.predict_id(p)?, p.gold, &p.context_labels))
    });
    let mut keep = Vec::new();
    for (i, k) in kinds.into_iter().enumerate() {
        if k? == OutcomeKind::CopyingError {
            keep.push(i);
        }
    }
    if keep.len() > cap {
        keep.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        keep.truncate(cap);
        keep.sort_unstable();
    }
    Ok(keep.into_iter().map(|i| prompts[i].clone()).collect())
}

/// Copying prompts on the proxy training set. May be empty; callers decide
/// whether that is an error.
pub fn collect_copying_prompts(
    model: &impl Predictor,
    tok: &Tokenizer,
    proxy_train: &[ICLExample],
    cfg: &CollectConfig,
) -> Result<Vec<EncodedPrompt>> {
    let prompts = proxy_prompts(tok, proxy_train, &cfg.shots, cfg.per_shot, cfg.seed, model.max_context())?;
    select_copying(model, &prompts, cfg.cap, derive_seed(cfg.seed, &[u64::MAX]))
}

/// Full detection for one layer: attribute every copying prompt and
/// aggregate.
pub fn relevance(
    model: &Model,
    copying: &[EncodedPrompt],
    layer: LayerHandle,
    cfg: &IGConfig,
) -> Result<RelevanceScores> {
    if copying.is_empty() {
        return Err(Error::NoCopyingPrompts);
    }
    aggregate(&attribute_all(model, copying, layer, cfg)?, cfg.normalize)
}

/// The pruning rates swept by default: 1% to 10% in 1% steps.
pub fn default_rates() -> Vec<f64> {
    (1..=10).map(|p| p as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub block: usize,
    pub rate: f64,
    pub sigma: f64,
    pub neurons: usize,
    pub accuracy: f64,
}

/// The selected pruning configuration and the sweep behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub layer: LayerHandle,
    pub rate: f64,
    pub sigma: f64,
    pub val_accuracy: f64,
    pub unpruned_accuracy: f64,
    /// False when no swept configuration beats the unpruned model.
    pub improves_on_unpruned: bool,
    pub points: Vec<SweepPoint>,
}

/// Fraction of prompts answered correctly.
pub fn accuracy(model: &impl Predictor, prompts: &[EncodedPrompt]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Empty("validation prompts".into()));
    }
    let correct = map_ordered(prompts, |p| model.predict_id(p).map(|y| y == p.gold));
    let mut n = 0usize;
    for c in correct {
        n += c? as usize;
    }
    Ok(n as f64 / prompts.len() as f64)
}

/// Evaluates every (block, rate) mask on the validation prompts and keeps
/// the most accurate; ties go to the smaller rate, then the lower block.
pub fn sweep_select(
    model: &Model,
    val_prompts: &[EncodedPrompt],
    relevance: &[RelevanceScores],
    rates: &[f64],
) -> Result<PruneConfig> {
    if relevance.is_empty() {
        return Err(Error::NoCopyingPrompts);
    }
    if rates.is_empty() {
        return Err(Error::Config("empty rate list".into()));
    }
    let unpruned_accuracy = accuracy(model, val_prompts)?;
    let mut sorted_rates = rates.to_vec();
    sorted_rates.sort_by(f64::total_cmp);
    let mut by_block: Vec<&RelevanceScores> = relevance.iter().collect();
    by_block.sort_by_key(|r| r.layer.block);

    let mut points = Vec::new();
    let mut best: Option<(PruneMask, f64)> = None;
    for &rate in &sorted_rates {
        for r in &by_block {
            let mask = mask_from_relevance(r, rate)?;
            let acc = accuracy(&apply(model, &mask)?, val_prompts)?;
            points.push(SweepPoint {
                block: r.layer.block,
                rate,
                sigma: mask.sigma.unwrap_or(0.0),
                neurons: mask.count(),
                accuracy: acc,
            });
            if best.as_ref().map_or(true, |(_, a)| acc > *a) {
                best = Some((mask, acc));
            }
        }
    }
    let (mask, val_accuracy) = best.expect("non-empty sweep");
    Ok(PruneConfig {
        layer: mask.layer,
        rate: mask.rate,
        sigma: mask.sigma.unwrap_or(0.0),
        val_accuracy,
        unpruned_accuracy,
        improves_on_unpruned: val_accuracy > unpruned_accuracy,
        points,
    })
}

impl PruneConfig {
    /// Rebuilds the selected mask from the matching relevance scores.
    pub fn mask(&self, relevance: &[RelevanceScores]) -> Result<PruneMask> {
        let r = relevance
            .iter()
            .find(|r| r.layer == self.layer)
            .ok_or_else(|| Error::LayerMismatch(format!("no relevance scores for {}", self.layer)))?;
        mask_from_relevance(r, self.rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::init(ModelConfig { n_blocks: 2, d_model: 16, n_heads: 2, d_ff: 24, vocab_size: 10, max_context: 12, seed: 5 })
            .unwrap()
    }

    fn prompt() -> EncodedPrompt {
        EncodedPrompt { tokens: vec![4, 0, 2, 1, 5, 0, 3, 1, 6, 0], answer_pos: 10, gold: 7, context_labels: vec![2, 3] }
    }

    fn map(values: Vec<f64>) -> AttributionMap {
        AttributionMap { layer: LayerHandle::mlp_up(0), m: 20, target: IgTarget::Shift, values, f_full: 0.0, f_zero: 0.0 }
    }

    #[test]
    fn shift_arithmetic() {
        let mut d = vec![0.0; 10];
        d[2] = 0.3;
        d[1] = 0.2;
        d[3] = 0.4;
        let s = PredictionShift::from_dist(&d, &[2, 1], 3);
        assert!((s.l_u - 0.5).abs() < 1e-15 && (s.l_v - 0.4).abs() < 1e-15);
        assert!((s.delta + 0.1).abs() < 1e-15);
        let s = PredictionShift::from_dist(&d, &[2, 2], 3);
        assert!((s.l_u - 0.6).abs() < 1e-15);
    }

    #[test]
    fn shift_at_alpha_one_is_the_plain_model() {
        let m = model();
        let p = prompt();
        let s = prediction_shift(&m, &p, LayerHandle::mlp_up(1), &[0, 3], 1.0).unwrap();
        let plain = PredictionShift::from_dist(&m.next_token_dist(&p.tokens).unwrap(), &p.context_labels, p.gold);
        assert_eq!(s, plain);
        assert!(prediction_shift(&m, &p, LayerHandle::mlp_up(1), &[0], 1.5).is_err());
    }

    #[test]
    fn min_max_cases() {
        assert_eq!(min_max(&[2.0, 4.0, 6.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max(&[5.0, 5.0, 5.0]), vec![0.0; 3]);
        let r = aggregate(&[map(vec![2.0, 4.0, 6.0]), map(vec![1.0, 0.0, 0.0])], true).unwrap();
        assert_eq!(r.scores, vec![0.5, 0.25, 0.5]);
        let r = aggregate(&[map(vec![2.0, 4.0, 6.0])], false).unwrap();
        assert_eq!(r.scores, vec![2.0, 4.0, 6.0]);
        assert!(matches!(aggregate(&[], true), Err(Error::Empty(_))));
    }

    #[test]
    fn dead_neuron_gets_zero_attribution() {
        let mut m = model();
        let l = LayerHandle::mlp_up(0);
        m.block_param_mut(0, crate::model::BlockParam::UpWeight).row_mut(5).fill(0.0);
        m.block_param_mut(0, crate::model::BlockParam::UpBias).data_mut()[5] = 0.0;
        for target in [IgTarget::Shift, IgTarget::MaxProb] {
            let a = integrated_gradients(&m, &prompt(), l, 8, target).unwrap();
            assert_eq!(a.values[5], 0.0);
            assert!(a.values.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn maxprob_completeness_on_random_model() {
        let m = model();
        let coarse = integrated_gradients(&m, &prompt(), LayerHandle::mlp_up(1), 5, IgTarget::MaxProb).unwrap();
        let fine = integrated_gradients(&m, &prompt(), LayerHandle::mlp_up(1), 100, IgTarget::MaxProb).unwrap();
        assert!(fine.completeness_error() < 0.02, "{}", fine.completeness_error());
        assert!(fine.completeness_error() <= coarse.completeness_error());
    }

    #[test]
    fn ig_rejects_zero_steps() {
        assert!(matches!(
            integrated_gradients(&model(), &prompt(), LayerHandle::mlp_up(0), 0, IgTarget::Shift),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sweep_tie_prefers_smaller_rate_then_block() {
        // An all-zero model predicts token 0 everywhere, so every mask ties.
        let m = Model::zeros(ModelConfig {
            n_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 100,
            vocab_size: 10,
            max_context: 12,
            seed: 0,
        })
        .unwrap();
        let rel: Vec<RelevanceScores> = (0..2)
            .map(|b| RelevanceScores {
                layer: LayerHandle::mlp_up(b),
                m: 20,
                target: IgTarget::Shift,
                normalize: true,
                samples: 1,
                scores: (0..100).map(|j| j as f64 / 100.0).collect(),
            })
            .collect();
        let val = vec![prompt()];
        let c = sweep_select(&m, &val, &rel, &[0.05, 0.02]).unwrap();
        assert_eq!((c.rate, c.layer.block), (0.02, 0));
        assert_eq!(c.points.len(), 4);
        assert!(!c.improves_on_unpruned);
        assert_eq!(c.sigma, 0.98);
    }
}
