//! Relevance-threshold masks, their application, and random masks.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::RelevanceScores;
use crate::error::{Error, Result};
use crate::fsutil::write_json_atomic;
use crate::model::{BlockParam, LayerHandle, LayerRole, Model};

/// Neurons to prune in one target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub layer: LayerHandle,
    /// `true` = prune.
    pub mask: Vec<bool>,
    /// Relevance of the last included neuron; absent for random masks.
    pub sigma: Option<f64>,
    pub rate: f64,
    pub seed: Option<u64>,
}

/// On-disk form of a [`PruneMask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskFile {
    pub block: usize,
    pub role: LayerRole,
    pub rate: f64,
    pub sigma: Option<f64>,
    pub indices: Vec<usize>,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 0.5) {
        return Err(Error::Config(format!("pruning rate {rate} outside (0, 0.5]")));
    }
    Ok(())
}

/// Number of neurons a rate selects: `ceil(rate · width)`.
pub fn mask_size(rate: f64, width: usize) -> usize {
    // Rates such as 0.07 are not exact in binary; round away the noise
    // before taking the ceiling.
    let x = rate * width as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Marks the top `ceil(rate · d_ff)` neurons by relevance; equal scores
/// are taken in index order.
pub fn mask_from_relevance(r: &RelevanceScores, rate: f64) -> Result<PruneMask> {
    check_rate(rate)?;
    let width = r.scores.len();
    if width == 0 {
        return Err(Error::Empty("relevance scores".into()));
    }
    let k = mask_size(rate, width).clamp(1, width);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| r.scores[b].total_cmp(&r.scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; width];
    for &j in &order[..k] {
        mask[j] = true;
    }
    Ok(PruneMask { layer: r.layer, mask, sigma: Some(r.scores[order[k - 1]]), rate, seed: None })
}

/// Uniformly random mask of the same cardinality rule.
pub fn random_mask(layer: LayerHandle, width: usize, rate: f64, seed: u64) -> Result<PruneMask> {
    check_rate(rate)?;
    if width == 0 {
        return Err(Error::Empty("layer width".into()));
    }
    let k = mask_size(rate, width).clamp(1, width);
    let mut mask = vec![false; width];
    for j in sample(&mut ChaCha8Rng::seed_from_u64(seed), width, k) {
        mask[j] = true;
    }
    Ok(PruneMask { layer, mask, sigma: None, rate, seed: Some(seed) })
}

impl PruneMask {
    pub fn empty(layer: LayerHandle, width: usize) -> Self {
        Self { layer, mask: vec![false; width], sigma: None, rate: 0.0, seed: None }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(j, _)| j).collect()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_file(&self) -> MaskFile {
        MaskFile {
            block: self.layer.block,
            role: self.layer.role,
            rate: self.rate,
            sigma: self.sigma,
            indices: self.indices(),
            width: self.mask.len(),
            seed: self.seed,
        }
    }

    pub fn from_file(f: &MaskFile) -> Result<Self> {
        let mut mask = vec![false; f.width];
        for &j in &f.indices {
            *mask.get_mut(j).ok_or(Error::NeuronIndex { index: j, width: f.width })? = true;
        }
        Ok(Self { layer: LayerHandle { block: f.block, role: f.role }, mask, sigma: f.sigma, rate: f.rate, seed: f.seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, &self.to_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Copy of `model` with the masked neurons' incoming weight rows and
/// biases set to zero. The source model is untouched.
pub fn apply(model: &Model, mask: &PruneMask) -> Result<Model> {
    model.check_layer(mask.layer)?;
    let width = model.config().d_ff;
    if mask.mask.len() != width {
        return Err(Error::LayerMismatch(format!("mask of width {} for a layer of {width} neurons", mask.mask.len())));
    }
    let mut out = model.clone();
    let b = mask.layer.block;
    for j in mask.indices() {
        out.block_param_mut(b, BlockParam::UpWeight).row_mut(j).fill(0.0);
        out.block_param_mut(b, BlockParam::UpBias).data_mut()[j] = 0.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::IgTarget;
    use crate::model::ModelConfig;

    fn scores(v: &[f64]) -> RelevanceScores {
        RelevanceScores {
            layer: LayerHandle::mlp_up(0),
            m: 20,
            target: IgTarget::Shift,
            normalize: true,
            samples: 1,
            scores: v.to_vec(),
        }
    }

    #[test]
    fn threshold_masks() {
        let r = scores(&[0.9, 0.1, 0.5, 0.2]);
        let m = mask_from_relevance(&r, 0.25).unwrap();
        assert_eq!((m.indices(), m.sigma), (vec![0], Some(0.9)));
        let m = mask_from_relevance(&r, 0.5).unwrap();
        assert_eq!((m.indices(), m.sigma), (vec![0, 2], Some(0.5)));
        let m = mask_from_relevance(&scores(&[0.3; 4]), 0.25).unwrap();
        assert_eq!(m.indices(), vec![0]);
    }

    #[test]
    fn rate_bounds() {
        let r = scores(&[0.1; 4]);
        for bad in [0.0, -0.1, 0.51, f64::NAN] {
            assert!(matches!(mask_from_relevance(&r, bad), Err(Error::Config(_))));
        }
        assert_eq!(mask_size(0.07, 100), 7);
        assert_eq!(mask_size(0.03, 64), 2);
        assert_eq!(mask_size(0.01, 64), 1);
    }

    #[test]
    fn random_masks() {
        let l = LayerHandle::mlp_up(0);
        assert_eq!(random_mask(l, 4, 0.25, 3).unwrap(), random_mask(l, 4, 0.25, 3).unwrap());
        assert_eq!(random_mask(l, 4, 0.25, 3).unwrap().count(), 1);
    }

    #[test]
    fn mask_file_round_trip() {
        let m = mask_from_relevance(&scores(&[0.9, 0.1, 0.5, 0.2]), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mask.json");
        m.save(&p).unwrap();
        assert_eq!(PruneMask::load(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap();
        for key in ["\"block\"", "\"role\"", "\"rate\"", "\"sigma\"", "\"indices\""] {
            assert!(text.contains(key));
        }
    }

    fn model() -> Model {
        Model::init(ModelConfig { n_blocks: 2, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 9, max_context: 8, seed: 4 })
            .unwrap()
    }

    #[test]
    fn apply_semantics() {
        let m = model();
        let l = LayerHandle::mlp_up(1);
        assert_eq!(apply(&m, &PruneMask::empty(l, 16)).unwrap(), m);
        let mask = random_mask(l, 16, 0.25, 1).unwrap();
        let once = apply(&m, &mask).unwrap();
        assert_eq!(apply(&once, &mask).unwrap(), once);
        assert_ne!(once, m);
        let toks = [1, 2, 3, 4];
        assert_eq!(once.next_token_dist(&toks).unwrap(), m.forward_with_scale(&toks, l, &mask.indices(), 0.0).unwrap());
        let full = PruneMask { mask: vec![true; 16], ..PruneMask::empty(l, 16) };
        let all: Vec<usize> = (0..16).collect();
        assert_eq!(
            apply(&m, &full).unwrap().next_token_dist(&toks).unwrap(),
            m.forward_with_scale(&toks, l, &all, 0.0).unwrap()
        );
        assert!(matches!(apply(&m, &PruneMask::empty(LayerHandle::mlp_up(2), 16)), Err(Error::LayerMismatch(_))));
    }
}
