//! Toy pre-LN decoder-only transformer.
//!
//! Each block is `x + attn(ln1(x))` followed by `x + down(gelu(up(ln2(x))))`.
//! The MLP up-projection is stored as a `[d_ff, d_model]` matrix, so neuron
//! `j` of a block is row `j` of that matrix plus bias entry `j`.

mod checkpoint;
mod forward;
mod registry;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{build_forward, Hooks, Readout, ResidualPatch, ScaleHook, Trace};
pub use registry::{registry, target_layer, Family, LayerHandle, LayerKind, LayerRole, TargetLayer};
pub use train::{corpus_loss, train, HyperParams, TrainReport, TrainSequence};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of the MLP up-projection: the number of attributable neurons per block.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_context == 0 {
            return bad(format!("zero-sized dimension in {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.d_ff < self.d_model {
            return bad(format!("d_ff {} smaller than d_model {}", self.d_ff, self.d_model));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameters of one block, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockParam {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2Gain,
    Ln2Bias,
    UpWeight,
    UpBias,
    DownWeight,
    DownBias,
}

const BLOCK_PARAMS: [(BlockParam, &str); 16] = [
    (BlockParam::Ln1Gain, "ln1.gain"),
    (BlockParam::Ln1Bias, "ln1.bias"),
    (BlockParam::Wq, "attn.q.weight"),
    (BlockParam::Bq, "attn.q.bias"),
    (BlockParam::Wk, "attn.k.weight"),
    (BlockParam::Bk, "attn.k.bias"),
    (BlockParam::Wv, "attn.v.weight"),
    (BlockParam::Bv, "attn.v.bias"),
    (BlockParam::Wo, "attn.o.weight"),
    (BlockParam::Bo, "attn.o.bias"),
    (BlockParam::Ln2Gain, "ln2.gain"),
    (BlockParam::Ln2Bias, "ln2.bias"),
    (BlockParam::UpWeight, "mlp.up.weight"),
    (BlockParam::UpBias, "mlp.up.bias"),
    (BlockParam::DownWeight, "mlp.down.weight"),
    (BlockParam::DownBias, "mlp.down.bias"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GlobalParam {
    TokEmb,
    PosEmb,
    LnfGain,
    LnfBias,
    Unembed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Model {
    /// Deterministic initialization: weights ~ N(0, 0.02²), linear biases 0,
    /// layer-norm gain 1 and bias 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let params = Self::param_shapes(&config)
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; numel]
                } else if name.ends_with(".bias") {
                    vec![0.0; numel]
                } else {
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    /// Every parameter, layer-norm gains included, set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Self::param_shapes(&config).into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::param_shapes(&config);
        if shapes.len() != params.len() {
            return Err(Error::Format(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for ((name, shape), t) in shapes.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { config, params })
    }

    /// Names and shapes of all parameters in storage order.
    pub fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (c.d_model, c.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![c.vocab_size, d]),
            ("pos_emb".to_string(), vec![c.max_context, d]),
        ];
        for b in 0..c.n_blocks {
            for (p, name) in BLOCK_PARAMS {
                let shape = match p {
                    BlockParam::Wq | BlockParam::Wk | BlockParam::Wv | BlockParam::Wo => vec![d, d],
                    BlockParam::UpWeight => vec![f, d],
                    BlockParam::UpBias => vec![f],
                    BlockParam::DownWeight => vec![d, f],
                    _ => vec![d],
                };
                out.push((format!("blocks.{b}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![c.vocab_size, d]));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        Self::param_shapes(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_names().iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.param_names().iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn block_index(&self, block: usize, p: BlockParam) -> usize {
        2 + block * BLOCK_PARAMS.len() + p as usize
    }

    pub(crate) fn global_index(&self, p: GlobalParam) -> usize {
        let tail = 2 + self.config.n_blocks * BLOCK_PARAMS.len();
        match p {
            GlobalParam::TokEmb => 0,
            GlobalParam::PosEmb => 1,
            GlobalParam::LnfGain => tail,
            GlobalParam::LnfBias => tail + 1,
            GlobalParam::Unembed => tail + 2,
        }
    }

    pub fn block_param(&self, block: usize, p: BlockParam) -> &Tensor {
        &self.params[self.block_index(block, p)]
    }

    pub fn block_param_mut(&mut self, block: usize, p: BlockParam) -> &mut Tensor {
        let i = self.block_index(block, p);
        &mut self.params[i]
    }

    /// Checks that `layer` exists in this model.
    pub fn check_layer(&self, layer: LayerHandle) -> Result<()> {
        if layer.block >= self.config.n_blocks {
            return Err(Error::LayerMismatch(format!(
                "{layer} does not exist in a {}-block model",
                self.config.n_blocks
            )));
        }
        Ok(())
    }

    pub fn check_context(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow { len: tokens.len(), max: self.config.max_context });
        }
        Ok(())
    }

    /// Logits for every position, `[len, vocab]`.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = build_forward(self, &mut tape, tokens, &Hooks::default(), &Readout::All, false)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Next-token distribution after the last token.
    pub fn next_token_dist(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        self.dist_with_hooks(tokens, &Hooks::default())
    }

    /// Next-token distribution with the outputs of `neurons` in `layer`
    /// multiplied by `alpha` at every position.
    pub fn forward_with_scale(
        &self,
        tokens: &[usize],
        layer: LayerHandle,
        neurons: &[usize],
        alpha: f64,
    ) -> Result<Vec<f64>> {
        let hook = ScaleHook::for_neurons(self, layer, neurons, alpha)?;
        self.dist_with_hooks(tokens, &Hooks { scale: Some(hook), ..Hooks::default() })
    }

    pub fn dist_with_hooks(&self, tokens: &[usize], hooks: &Hooks) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let trace = build_forward(self, &mut tape, tokens, hooks, &Readout::Last, false)?;
        let p = tape.softmax(trace.logits)?;
        Ok(tape.value(p).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig { n_blocks: 2, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: 12, max_context: 10, seed: 7 }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(cfg()).unwrap();
        let b = Model::init(cfg()).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.to_le_bytes(), y.to_le_bytes());
        }
        let c = Model::init(ModelConfig { seed: 8, ..cfg() }).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let c = ModelConfig { n_heads: 3, d_model: 8, d_ff: 8, ..cfg() };
        assert!(matches!(Model::init(c), Err(Error::Config(_))));
        let c = ModelConfig { d_ff: 8, ..cfg() };
        assert!(matches!(Model::init(c), Err(Error::Config(_))));
        let c = ModelConfig { n_blocks: 0, ..cfg() };
        assert!(matches!(Model::init(c), Err(Error::Config(_))));
    }

    #[test]
    fn zero_token_forward_is_finite() {
        let m = Model::init(cfg()).unwrap();
        let logits = m.logits(&[0, 0, 0]).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let m = Model::zeros(cfg()).unwrap();
        let p = m.next_token_dist(&[1, 2, 3]).unwrap();
        assert!(p.iter().all(|&v| v == 1.0 / 12.0));
    }

    #[test]
    fn distribution_sums_to_one() {
        let m = Model::init(cfg()).unwrap();
        let p = m.next_token_dist(&[1, 5, 3, 2]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn context_overflow_is_an_error() {
        let m = Model::init(cfg()).unwrap();
        assert!(matches!(m.next_token_dist(&[1; 11]), Err(Error::ContextOverflow { len: 11, max: 10 })));
    }

    #[test]
    fn param_layout_matches_names() {
        let m = Model::init(cfg()).unwrap();
        assert_eq!(m.param("blocks.1.mlp.up.weight").unwrap().shape(), &[32, 16]);
        assert_eq!(m.block_param(1, BlockParam::UpWeight), m.param("blocks.1.mlp.up.weight").unwrap());
        assert_eq!(&m.params()[m.global_index(GlobalParam::Unembed)], m.param("unembed").unwrap());
        assert_eq!(m.param("ln_f.gain").unwrap().data(), &[1.0; 16]);
    }
}
