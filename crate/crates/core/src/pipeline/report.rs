use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::detection::{IGConfig, PruneConfig, RelevanceScores};
use crate::error::{Error, Result};
use crate::eval::{overall, EvalReport};
use crate::model::Model;
use crate::pruning::{MaskFile, PruneMask};
use crate::tasks::TaskId;

use super::*;

/// Relevance scores as persisted by the detect stage. Reports refer to it
/// by the hash of its JSON encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceArtifact {
    pub ig: IGConfig,
    pub copying_prompts: usize,
    pub scores: Vec<RelevanceScores>,
}

impl RelevanceArtifact {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    /// Content-addressed file name, `relevance-<first 16 hex>.json`.
    pub fn file_name(&self) -> Result<String> {
        Ok(format!("relevance-{}.json", &self.hash()?[..16]))
    }
}

/// Per-task accuracy change and the overall copying rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directional {
    pub copy_unpruned: f64,
    pub copy_pruned: f64,
    pub acc_unpruned: BTreeMap<TaskId, f64>,
    pub acc_pruned: BTreeMap<TaskId, f64>,
    /// Largest per-task accuracy drop (negative when every task improved).
    pub max_acc_drop: f64,
    /// Copying does not increase and no task loses more than 0.01.
    pub holds: bool,
}

pub const MAX_ACC_DROP: f64 = 0.01;

impl Directional {
    pub fn new(unpruned: &[EvalReport], pruned: &[EvalReport]) -> Self {
        let acc = |rs: &[EvalReport]| -> BTreeMap<TaskId, f64> {
            crate::eval::tasks_of(rs)
                .into_iter()
                .map(|t| {
                    let sub: Vec<EvalReport> = rs.iter().filter(|r| r.task == t).cloned().collect();
                    (t, overall(&sub, |r| r.accuracy))
                })
                .collect()
        };
        let (au, ap) = (acc(unpruned), acc(pruned));
        let max_acc_drop =
            au.iter().map(|(t, a)| a - ap.get(t).copied().unwrap_or(0.0)).fold(f64::NEG_INFINITY, f64::max);
        let copy_unpruned = overall(unpruned, |r| r.copying_error);
        let copy_pruned = overall(pruned, |r| r.copying_error);
        Self {
            copy_unpruned,
            copy_pruned,
            acc_unpruned: au,
            acc_pruned: ap,
            max_acc_drop,
            holds: copy_pruned <= copy_unpruned && max_acc_drop <= MAX_ACC_DROP,
        }
    }
}

/// Everything a run produced that is a pure function of its config. Wall
/// clock times are kept out of it and written to a sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub run_id: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub train: TrainSummary,
    pub copying_prompts: usize,
    pub relevance_file: String,
    pub relevance_hash: String,
    pub prune: PruneConfig,
    pub mask: MaskFile,
    pub eval_unpruned: Vec<EvalReport>,
    pub eval_pruned: Vec<EvalReport>,
    pub directional: Directional,
    pub ablation: AblationTable,
    pub taskvec: TaskVecTable,
}

impl Report {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        cfg: &RunConfig,
        train: TrainSummary,
        relevance: &RelevanceArtifact,
        prune: PruneConfig,
        mask: &PruneMask,
        eval_unpruned: Vec<EvalReport>,
        eval_pruned: Vec<EvalReport>,
        ablation: AblationTable,
        taskvec: TaskVecTable,
    ) -> Result<Self> {
        let config_hash = cfg.hash()?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            run_id: format!("run-{}", &config_hash[..12]),
            config_hash,
            config: cfg.clone(),
            train,
            copying_prompts: relevance.copying_prompts,
            relevance_file: relevance.file_name()?,
            relevance_hash: relevance.hash()?,
            prune,
            mask: mask.to_file(),
            directional: Directional::new(&eval_unpruned, &eval_pruned),
            eval_unpruned,
            eval_pruned,
            ablation,
            taskvec,
        })
    }

    pub fn verify(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!("report schema {} is not {SCHEMA_VERSION}", self.schema_version)));
        }
        if self.config.hash()? != self.config_hash {
            return Err(Error::Format("config hash does not match the embedded config".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = serde_json::to_vec_pretty(self)?;
        b.push(b'\n');
        Ok(b)
    }
}

/// In-memory results of a full run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub data: Dataset,
    pub model: Model,
    pub detection: Detection,
    pub relevance: RelevanceArtifact,
    pub mask: PruneMask,
    pub pruned: Model,
    pub report: Report,
    /// Seconds per stage.
    pub timing: BTreeMap<String, f64>,
}

/// Runs every stage in memory: data, training, detection, sweep and
/// pruning, evaluation, ablation and task vectors.
pub fn run_all(cfg: &RunConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut timing = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, timing: &mut BTreeMap<String, f64>| {
        timing.insert(name.to_string(), clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };
    let data = gen_data(cfg)?;
    lap("gen_data", &mut timing);
    let (model, train_report) = train_model(cfg, &data)?;
    lap("train", &mut timing);
    let detection = detect(cfg, &model, &data, &cfg.detect.ig)?;
    let relevance = RelevanceArtifact {
        ig: cfg.detect.ig,
        copying_prompts: detection.copying.len(),
        scores: detection.relevance.clone(),
    };
    lap("detect", &mut timing);
    let (pc, mask, pruned) = prune(cfg, &model, &data, &detection.relevance)?;
    lap("prune", &mut timing);
    let eval_unpruned = evaluate_tasks(cfg, &model, &data)?;
    let eval_pruned = evaluate_tasks(cfg, &pruned, &data)?;
    lap("eval", &mut timing);
    let ablation = ablate(cfg, &model, &data, &detection.copying, &pc, &eval_unpruned, &eval_pruned)?;
    lap("ablate", &mut timing);
    let tv = taskvec(cfg, &model, &pruned, &data)?;
    lap("taskvec", &mut timing);
    let report = Report::assemble(
        cfg,
        TrainSummary::from_report(&train_report),
        &relevance,
        pc,
        &mask,
        eval_unpruned,
        eval_pruned,
        ablation,
        tv,
    )?;
    Ok(RunArtifacts { data, model, detection, relevance, mask, pruned, report, timing })
}
