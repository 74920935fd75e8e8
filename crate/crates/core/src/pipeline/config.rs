use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{default_rates, IGConfig};
use crate::error::{Error, Result};
use crate::model::{HyperParams, ModelConfig};
use crate::tasks::{DemoSampling, SplitSizes, TaskId};

pub const SCHEMA_VERSION: u32 = 1;

/// Training mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub hyper: HyperParams,
    /// Tasks whose train splits make up the ICL mixture.
    pub tasks: Vec<TaskId>,
    /// Also train on prompts over the vowel proxy's training words.
    pub include_proxy: bool,
    pub prompts_per_task: usize,
    pub shots: Vec<usize>,
    pub sampling: DemoSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub sizes: SplitSizes,
    /// Train/val sizes of the vowel proxy (`test` is ignored).
    pub proxy_sizes: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSettings {
    pub ig: IGConfig,
    pub shots: Vec<usize>,
    pub prompts_per_shot: usize,
    pub max_prompts: usize,
    /// Blocks whose target layer is scored; empty means all.
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub rates: Vec<f64>,
    pub shots: Vec<usize>,
    pub prompts_per_shot: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub tasks: Vec<TaskId>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVecSettings {
    pub tasks: Vec<TaskId>,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub n_test: usize,
    pub n_dev: usize,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// `vocab_size` is overwritten with the tokenizer's size.
    pub model: ModelConfig,
    pub data: DataSettings,
    pub train: TrainSettings,
    pub detect: DetectSettings,
    pub sweep: SweepSettings,
    pub eval: EvalSettings,
    pub taskvec: TaskVecSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seeds = vec![0, 1, 2, 3, 4];
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig { n_blocks: 2, d_model: 64, n_heads: 4, d_ff: 256, vocab_size: 0, max_context: 64, seed: 0 },
            data: DataSettings {
                sizes: SplitSizes { train: 400, val: 100, test: 200 },
                proxy_sizes: SplitSizes { train: 200, val: 100, test: 0 },
            },
            train: TrainSettings {
                hyper: HyperParams { steps: 3000, batch_size: 16, lr: 1e-3, ..HyperParams::default() },
                tasks: vec![TaskId::T1, TaskId::T2, TaskId::T3, TaskId::T4, TaskId::T5, TaskId::T6, TaskId::T7],
                include_proxy: true,
                prompts_per_task: 400,
                shots: vec![1, 2, 3, 4],
                sampling: DemoSampling::LowDiversity { max_distinct: 2, p_gold_in_context: 0.7 },
            },
            detect: DetectSettings {
                ig: IGConfig::default(),
                shots: vec![1, 2, 3, 4],
                prompts_per_shot: 1000,
                max_prompts: crate::detection::MAX_COPYING_PROMPTS,
                blocks: vec![],
            },
            sweep: SweepSettings { rates: default_rates(), shots: vec![1, 2, 3, 4], prompts_per_shot: 250 },
            eval: EvalSettings {
                tasks: vec![TaskId::T3, TaskId::T4, TaskId::T5, TaskId::T6],
                shots: vec![1, 2, 3, 4],
                seeds: seeds.clone(),
                n_test: 100,
            },
            taskvec: TaskVecSettings {
                tasks: vec![TaskId::T5, TaskId::T6],
                shots: vec![1, 2, 3, 4],
                seeds,
                n_test: 50,
                n_dev: 30,
            },
        }
    }
}

impl RunConfig {
    /// A one-block run that finishes in about a second, for smoke tests
    /// and examples.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.model = ModelConfig { n_blocks: 1, d_model: 16, n_heads: 2, d_ff: 32, ..c.model };
        c.data.sizes = SplitSizes { train: 60, val: 20, test: 30 };
        c.data.proxy_sizes = SplitSizes { train: 60, val: 30, test: 0 };
        c.train.hyper = HyperParams { steps: 120, batch_size: 8, lr: 3e-3, warmup: 10, ..HyperParams::default() };
        c.train.tasks = vec![TaskId::T1, TaskId::T5, TaskId::T6];
        c.train.prompts_per_task = 60;
        c.detect.ig.m = 4;
        c.detect.prompts_per_shot = 40;
        c.detect.max_prompts = 20;
        c.sweep.rates.truncate(3);
        c.sweep.prompts_per_shot = 10;
        c.eval = EvalSettings { tasks: vec![TaskId::T5, TaskId::T6], seeds: vec![0, 1], n_test: 10, ..c.eval };
        c.taskvec = TaskVecSettings { tasks: vec![TaskId::T5], seeds: vec![0, 1], n_test: 8, n_dev: 6, ..c.taskvec };
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema {} is not {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(1);
        m.validate()?;
        if self.detect.ig.m == 0 {
            return Err(Error::Config("IG steps must be at least 1".into()));
        }
        for &r in &self.sweep.rates {
            if !(r > 0.0 && r <= 0.5) {
                return Err(Error::Config(format!("pruning rate {r} outside (0, 0.5]")));
            }
        }
        if self.sweep.rates.is_empty() {
            return Err(Error::Config("empty rate list".into()));
        }
        if self.eval.seeds.is_empty() || self.taskvec.seeds.is_empty() {
            return Err(Error::Config("seed lists must be non-empty".into()));
        }
        if let Some(&b) = self.detect.blocks.iter().find(|&&b| b >= self.model.n_blocks) {
            return Err(Error::Config(format!("block {b} does not exist")));
        }
        if self.train.tasks.contains(&TaskId::Vowel) {
            return Err(Error::Config("the vowel proxy is added through include_proxy".into()));
        }
        Ok(())
    }

    pub fn blocks(&self) -> Vec<usize> {
        if self.detect.blocks.is_empty() {
            (0..self.model.n_blocks).collect()
        } else {
            self.detect.blocks.clone()
        }
    }

    /// Tasks whose data a run needs, sorted and deduplicated.
    pub fn all_tasks(&self) -> Vec<TaskId> {
        let mut t: Vec<TaskId> =
            self.train.tasks.iter().chain(&self.eval.tasks).chain(&self.taskvec.tasks).copied().collect();
        t.sort();
        t.dedup();
        t
    }

    /// Hex SHA-256 of the config's canonical JSON.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&serde_json::to_vec(self)?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses a rate list such as `1..10` (percent, inclusive), `2,4,6`
/// (percent) or `0.01,0.05` (fractions).
pub fn parse_rates(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot parse rates `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| bad())?;
        let b: u32 = b.trim().parse().map_err(|_| bad())?;
        if a == 0 || a > b {
            return Err(bad());
        }
        return Ok((a..=b).map(|p| p as f64 / 100.0).collect());
    }
    let vals = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<f64>>>()?;
    let scale = if vals.iter().all(|&v| v >= 1.0) { 100.0 } else { 1.0 };
    Ok(vals.into_iter().map(|v| v / scale).collect())
}
