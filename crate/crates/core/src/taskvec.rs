//! Task vectors: the residual state at the last prompt position, captured
//! from a demonstration-bearing pass and patched into a zero-shot pass.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::eval::{argmax, cell_prompts};
use crate::model::{build_forward, Hooks, Model, Readout, ResidualPatch};
use crate::parallel::map_ordered;
use crate::seed::derive_seed;
use crate::tasks::{build_prompt, EncodedPrompt, ICLExample, TaskId, TaskSplits, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVector {
    /// Block whose output residual was captured.
    pub layer: usize,
    pub vector: Vec<f64>,
    pub task: Option<TaskId>,
    /// Hash of the token ids the vector was extracted from.
    pub demos_hash: String,
    pub pruned: bool,
}

/// Residual stream after block `layer` at the last position of `tokens`.
pub fn hidden_state(model: &Model, tokens: &[usize], layer: usize) -> Result<Vec<f64>> {
    check_layer(model, layer)?;
    let mut tape = Tape::new();
    let trace = build_forward(model, &mut tape, tokens, &Hooks::default(), &Readout::Last, false)?;
    Ok(tape.value(trace.residuals[layer]).row(tokens.len() - 1).to_vec())
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    if layer >= model.config().n_blocks {
        return Err(Error::LayerMismatch(format!("layer {layer} of a {}-block model", model.config().n_blocks)));
    }
    Ok(())
}

fn hash_tokens(tokens: &[usize]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update((*t as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Runs the n-shot prompt with `dummy_query` and captures the state after
/// block `layer` at the final `:`.
pub fn extract(
    model: &Model,
    tok: &Tokenizer,
    demos: &[ICLExample],
    dummy_query: &str,
    layer: usize,
) -> Result<TaskVector> {
    if demos.is_empty() {
        return Err(Error::Empty("demonstrations".into()));
    }
    if demos.iter().any(|d| d.input == dummy_query) {
        return Err(Error::Precondition("dummy query repeats a demonstration input".into()));
    }
    let (tokens, _) = build_prompt(tok, demos, dummy_query, model.config().max_context)?;
    extract_tokens(model, &tokens, layer)
}

pub fn extract_tokens(model: &Model, tokens: &[usize], layer: usize) -> Result<TaskVector> {
    Ok(TaskVector {
        layer,
        vector: hidden_state(model, tokens, layer)?,
        task: None,
        demos_hash: hash_tokens(tokens),
        pruned: false,
    })
}

/// Next-token distribution of `tokens` with the state after block `tv.layer`
/// at the last position replaced by `tv.vector`.
pub fn patched_dist(model: &Model, tokens: &[usize], tv: &TaskVector) -> Result<Vec<f64>> {
    check_layer(model, tv.layer)?;
    if tv.vector.len() != model.config().d_model {
        return Err(Error::Config(format!(
            "task vector of width {} for a model of width {}",
            tv.vector.len(),
            model.config().d_model
        )));
    }
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    let patch = ResidualPatch { block: tv.layer, position: tokens.len() - 1, value: tv.vector.clone() };
    model.dist_with_hooks(tokens, &Hooks { scale: None, patch: Some(patch) })
}

/// Zero-shot `query :` with the task vector patched in, argmax-decoded.
pub fn patched_predict(model: &Model, tok: &Tokenizer, query: &str, tv: &TaskVector) -> Result<String> {
    let (tokens, _) = build_prompt(tok, &[], query, model.config().max_context)?;
    Ok(tok.token(argmax(&patched_dist(model, &tokens, tv)?))?.to_string())
}

/// One evaluation item: the n-shot prompt, the same demonstrations with a
/// dummy query, and the zero-shot query.
#[derive(Debug, Clone)]
struct TvItem {
    icl: EncodedPrompt,
    with_dummy: Vec<usize>,
    zero_shot: Vec<usize>,
}

fn tv_items(
    tok: &Tokenizer,
    splits: &TaskSplits,
    queries: &[ICLExample],
    shots: usize,
    seed: u64,
    n: usize,
    max_context: usize,
) -> Result<Vec<TvItem>> {
    let dummies = &splits.val;
    cell_prompts(splits, queries, shots, seed, n)?
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let taken = |d: &ICLExample| d.input == p.query || p.examples.iter().any(|e| e.input == d.input);
            let start = derive_seed(seed, &[shots as u64, i as u64]) as usize % dummies.len().max(1);
            let dummy = (0..dummies.len())
                .map(|k| &dummies[(start + k) % dummies.len()])
                .find(|d| !taken(d))
                .ok_or_else(|| Error::Empty("dummy-query pool".into()))?;
            Ok(TvItem {
                icl: p.encode(tok, max_context)?,
                with_dummy: build_prompt(tok, &p.examples, &dummy.input, max_context)?.0,
                zero_shot: build_prompt(tok, &[], &p.query, max_context)?.0,
            })
        })
        .collect()
}

fn tv_accuracy(model: &Model, items: &[TvItem], layer: usize) -> Result<f64> {
    let hits = map_ordered(items, |it| -> Result<bool> {
        let tv = extract_tokens(model, &it.with_dummy, layer)?;
        Ok(argmax(&patched_dist(model, &it.zero_shot, &tv)?) == it.icl.gold)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / items.len().max(1) as f64)
}

fn icl_accuracy(model: &Model, items: &[TvItem]) -> Result<f64> {
    let hits = map_ordered(items, |it| -> Result<bool> {
        Ok(argmax(&model.next_token_dist(&it.icl.tokens)?) == it.icl.gold)
    });
    let mut n = 0usize;
    for h in hits {
        n += h? as usize;
    }
    Ok(n as f64 / items.len().max(1) as f64)
}

/// Block with the best dev accuracy; ties go to the lower block.
fn select_layer(model: &Model, dev: &[TvItem]) -> Result<(usize, f64)> {
    let mut best = (0, f64::NEG_INFINITY);
    for l in 0..model.config().n_blocks {
        let a = tv_accuracy(model, dev, l)?;
        if a > best.1 {
            best = (l, a);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub task: TaskId,
    pub shot: usize,
    pub seed: u64,
    pub icl: f64,
    pub tv: f64,
    pub tv_pruned: f64,
    pub chosen_layer: usize,
    pub chosen_layer_pruned: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeSettings {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub n_dev: usize,
}

/// ICL, task-vector and pruned-task-vector accuracy per (shot, seed). The
/// patch layer is chosen per model on prompts whose queries come from the
/// validation split.
pub fn eval_modes(
    model: &Model,
    pruned: &Model,
    tok: &Tokenizer,
    splits: &TaskSplits,
    settings: &ModeSettings,
) -> Result<Vec<ModeReport>> {
    if model.config() != pruned.config() {
        return Err(Error::Config("the pruned model has a different configuration".into()));
    }
    if settings.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let max = model.config().max_context;
    let mut out = Vec::new();
    for &shot in &settings.shots {
        if shot == 0 {
            return Err(Error::Config("task vectors need at least one demonstration".into()));
        }
        for &seed in &settings.seeds {
            let dev_seed = derive_seed(seed, &[u64::MAX - 1]);
            let dev = tv_items(tok, splits, &splits.val, shot, dev_seed, settings.n_dev, max)?;
            let test = tv_items(tok, splits, &splits.test, shot, seed, settings.n_test, max)?;
            let (l, _) = select_layer(model, &dev)?;
            let (lp, _) = select_layer(pruned, &dev)?;
            out.push(ModeReport {
                task: splits.task,
                shot,
                seed,
                icl: icl_accuracy(model, &test)?,
                tv: tv_accuracy(model, &test, l)?,
                tv_pruned: tv_accuracy(pruned, &test, lp)?,
                chosen_layer: l,
                chosen_layer_pruned: lp,
            });
        }
    }
    Ok(out)
}
