use super::{BlockParam, GlobalParam, LayerHandle, Model};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Elementwise multiplier applied to a target layer's neuron outputs
/// (after bias, before the nonlinearity) at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleHook {
    pub layer: LayerHandle,
    pub factors: Vec<f64>,
    /// Record the multiplier as a gradient-tracking leaf.
    pub track_grad: bool,
}

impl ScaleHook {
    /// Factor `alpha` on `neurons`, 1 elsewhere.
    pub fn for_neurons(model: &Model, layer: LayerHandle, neurons: &[usize], alpha: f64) -> Result<Self> {
        model.check_layer(layer)?;
        let width = model.config().d_ff;
        let mut factors = vec![1.0; width];
        for &j in neurons {
            if j >= width {
                return Err(Error::NeuronIndex { index: j, width });
            }
            factors[j] = alpha;
        }
        Ok(Self { layer, factors, track_grad: false })
    }

    /// Factor `alpha` on every neuron of the layer.
    pub fn uniform(model: &Model, layer: LayerHandle, alpha: f64, track_grad: bool) -> Result<Self> {
        model.check_layer(layer)?;
        Ok(Self { layer, factors: vec![alpha; model.config().d_ff], track_grad })
    }
}

/// Overwrites the residual stream after block `block` at `position`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPatch {
    pub block: usize,
    pub position: usize,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Hooks {
    pub scale: Option<ScaleHook>,
    pub patch: Option<ResidualPatch>,
}

/// Which positions get projected to logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Readout {
    All,
    Last,
    Rows(Vec<usize>),
}

/// Handles to the interesting nodes of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `[rows, vocab]` for the requested readout rows.
    pub logits: Var,
    /// Residual stream after each block (after any patch).
    pub residuals: Vec<Var>,
    /// One leaf per parameter, in storage order.
    pub params: Vec<Var>,
    /// The scale-hook leaf, when a hook was installed.
    pub scale: Option<Var>,
}

/// Records the forward pass of `model` on `tape`.
pub fn build_forward<'m>(
    model: &'m Model,
    tape: &mut Tape<'m>,
    tokens: &[usize],
    hooks: &Hooks,
    readout: &Readout,
    track_params: bool,
) -> Result<Trace> {
    model.check_context(tokens)?;
    let cfg = model.config();
    if let Some(h) = &hooks.scale {
        model.check_layer(h.layer)?;
        if h.factors.len() != cfg.d_ff {
            return Err(Error::Shape(format!("scale hook of {} factors for width {}", h.factors.len(), cfg.d_ff)));
        }
    }
    if let Some(p) = &hooks.patch {
        if p.block >= cfg.n_blocks || p.position >= tokens.len() || p.value.len() != cfg.d_model {
            return Err(Error::LayerMismatch(format!(
                "patch at block {} position {} (len {}) does not fit the model/sequence",
                p.block,
                p.position,
                p.value.len()
            )));
        }
    }
    let params: Vec<Var> = model.params().iter().map(|p| tape.leaf_ref(p, track_params)).collect();
    let g = |p: GlobalParam| params[model.global_index(p)];
    let bp = |b: usize, p: BlockParam| params[model.block_index(b, p)];

    let positions: Vec<usize> = (0..tokens.len()).collect();
    let tok = tape.embedding(g(GlobalParam::TokEmb), tokens)?;
    let pos = tape.embedding(g(GlobalParam::PosEmb), &positions)?;
    let mut x = tape.add(tok, pos)?;

    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut residuals = Vec::with_capacity(cfg.n_blocks);
    let mut scale_var = None;
    for b in 0..cfg.n_blocks {
        let h = tape.layer_norm(x, bp(b, BlockParam::Ln1Gain), bp(b, BlockParam::Ln1Bias))?;
        let q = linear(tape, h, bp(b, BlockParam::Wq), bp(b, BlockParam::Bq))?;
        let k = linear(tape, h, bp(b, BlockParam::Wk), bp(b, BlockParam::Bk))?;
        let v = linear(tape, h, bp(b, BlockParam::Wv), bp(b, BlockParam::Bv))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, hd * dh, dh)?,
                    tape.slice_cols(k, hd * dh, dh)?,
                    tape.slice_cols(v, hd * dh, dh)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let mixed = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let o = linear(tape, mixed, bp(b, BlockParam::Wo), bp(b, BlockParam::Bo))?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, bp(b, BlockParam::Ln2Gain), bp(b, BlockParam::Ln2Bias))?;
        let mut up = linear(tape, h2, bp(b, BlockParam::UpWeight), bp(b, BlockParam::UpBias))?;
        if let Some(hook) = hooks.scale.as_ref().filter(|h| h.layer.block == b) {
            let s = tape.leaf(Tensor::vector(hook.factors.clone()), hook.track_grad);
            up = tape.mul_row(up, s)?;
            scale_var = Some(s);
        }
        let act = tape.gelu(up)?;
        let down = linear(tape, act, bp(b, BlockParam::DownWeight), bp(b, BlockParam::DownBias))?;
        x = tape.add(x, down)?;
        if let Some(p) = hooks.patch.as_ref().filter(|p| p.block == b) {
            x = tape.overwrite_row(x, p.position, &p.value)?;
        }
        residuals.push(x);
    }

    let rows = match readout {
        Readout::All => None,
        Readout::Last => Some(vec![tokens.len() - 1]),
        Readout::Rows(r) => Some(r.clone()),
    };
    let sel = match rows {
        Some(r) => tape.select_rows(x, &r)?,
        None => x,
    };
    let y = tape.layer_norm(sel, g(GlobalParam::LnfGain), g(GlobalParam::LnfBias))?;
    let logits = tape.matmul_nt(y, g(GlobalParam::Unembed))?;
    Ok(Trace { logits, residuals, params, scale: scale_var })
}

fn linear(tape: &mut Tape<'_>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, w)?;
    tape.add_row(y, b)
}
