//! Which layer holds the attributable neurons, per model family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a layer inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    /// First MLP linear map (`d_model → d_ff`); each output unit is a neuron.
    MlpUpProjection,
}

impl fmt::Display for LayerRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerRole::MlpUpProjection => f.write_str("mlp-up-projection"),
        }
    }
}

impl FromStr for LayerRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-up-projection" => Ok(LayerRole::MlpUpProjection),
            other => Err(Error::Config(format!("unknown layer role `{other}`"))),
        }
    }
}

/// A concrete target layer: one role in one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerHandle {
    pub block: usize,
    pub role: LayerRole,
}

impl LayerHandle {
    pub fn mlp_up(block: usize) -> Self {
        Self { block, role: LayerRole::MlpUpProjection }
    }
}

impl fmt::Display for LayerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Opt,
    Gpt2,
    Bloom,
    Llama,
    Mamba,
    /// The toy decoder built by this crate.
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    Linear,
    /// GPT-2's `Conv1D`, a linear map with transposed weight storage.
    Conv1d,
}

/// Registry entry describing where a family's neurons live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TargetLayer {
    pub family: Family,
    /// Module path of the layer inside one block.
    pub module: &'static str,
    pub kind: LayerKind,
    /// Role in this crate's toy model; only [`Family::Toy`] is executable.
    pub role: Option<LayerRole>,
}

const REGISTRY: &[TargetLayer] = &[
    TargetLayer { family: Family::Opt, module: "fc1", kind: LayerKind::Linear, role: None },
    TargetLayer { family: Family::Gpt2, module: "mlp.c_fc", kind: LayerKind::Conv1d, role: None },
    TargetLayer { family: Family::Bloom, module: "mlp.dense_h_to_4h", kind: LayerKind::Linear, role: None },
    TargetLayer { family: Family::Llama, module: "mlp.gate_proj", kind: LayerKind::Linear, role: None },
    TargetLayer { family: Family::Mamba, module: "mixer.in_proj", kind: LayerKind::Linear, role: None },
    TargetLayer {
        family: Family::Toy,
        module: "mlp.up",
        kind: LayerKind::Linear,
        role: Some(LayerRole::MlpUpProjection),
    },
];

pub fn target_layer(family: Family) -> TargetLayer {
    *REGISTRY.iter().find(|t| t.family == family).expect("every family has a registry entry")
}

pub fn registry() -> &'static [TargetLayer] {
    REGISTRY
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_family_targets_the_up_projection() {
        let t = target_layer(Family::Toy);
        assert_eq!(t.role, Some(LayerRole::MlpUpProjection));
        assert_eq!(target_layer(Family::Opt).module, "fc1");
        assert_eq!(target_layer(Family::Gpt2).kind, LayerKind::Conv1d);
        assert_eq!(registry().len(), 6);
    }

    #[test]
    fn handle_display_and_role_parse() {
        let h = LayerHandle::mlp_up(1);
        assert_eq!(h.to_string(), "blocks.1.mlp-up-projection");
        assert_eq!("mlp-up-projection".parse::<LayerRole>().unwrap(), h.role);
        assert!("attn".parse::<LayerRole>().is_err());
    }
}
