//! End-to-end pipeline stages. Each stage is a pure function of the run
//! config and the previous stage's artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::{
    proxy_prompts, relevance, select_copying, sweep_select, IGConfig, IgTarget, PruneConfig, RelevanceScores,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, overall, EvalReport};
use crate::fsutil::write_json_atomic;
use crate::model::{train, LayerHandle, Model, TrainReport, TrainSequence};
use crate::pruning::{apply, random_mask, PruneMask};
use crate::seed::derive_seed;
use crate::taskvec::{eval_modes, ModeReport, ModeSettings};
use crate::tasks::{
    builtin_wordlist, gen_task, gen_vowel_proxy, read_jsonl, sample_prompts, write_jsonl, EncodedPrompt, ICLExample,
    TaskId, TaskSpec, TaskSplits, Tokenizer,
};

mod config;
pub mod figures;
pub mod report;

pub use config::{
    parse_rates, sha256_hex, DataSettings, DetectSettings, EvalSettings, RunConfig, SweepSettings, TaskVecSettings,
    TrainSettings, SCHEMA_VERSION,
};
pub use report::{run_all, Report, RunArtifacts};

/// Stream tags for [`derive_seed`].
mod stream {
    pub const DATA: u64 = 1;
    pub const TRAIN_PROMPTS: u64 = 2;
    pub const DETECT: u64 = 3;
    pub const SWEEP: u64 = 4;
    pub const RANDOM_MASK: u64 = 5;
}

/// All generated data of a run plus its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokenizer: Tokenizer,
    pub tasks: BTreeMap<TaskId, TaskSplits>,
    pub proxy_train: Vec<ICLExample>,
    pub proxy_val: Vec<ICLExample>,
}

impl Dataset {
    pub fn task(&self, t: TaskId) -> Result<&TaskSplits> {
        self.tasks.get(&t).ok_or_else(|| Error::UnknownTask(format!("{t} (not generated for this run)")))
    }

    /// Writes `vocab.json`, `proxy/{train,val}.jsonl` and
    /// `tasks/<id>/{train,val,test}.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json_atomic(&dir.join("vocab.json"), &self.tokenizer)?;
        write_jsonl(&dir.join("proxy").join("train.jsonl"), &self.proxy_train)?;
        write_jsonl(&dir.join("proxy").join("val.jsonl"), &self.proxy_val)?;
        for (t, s) in &self.tasks {
            let d = dir.join("tasks").join(t.name());
            write_jsonl(&d.join("train.jsonl"), &s.train)?;
            write_jsonl(&d.join("val.jsonl"), &s.val)?;
            write_jsonl(&d.join("test.jsonl"), &s.test)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, tasks: &[TaskId]) -> Result<Self> {
        let tokenizer: Tokenizer = serde_json::from_slice(&std::fs::read(dir.join("vocab.json"))?)?;
        let mut map = BTreeMap::new();
        for &t in tasks {
            let d = dir.join("tasks").join(t.name());
            let splits = TaskSplits {
                task: t,
                train: read_jsonl(&d.join("train.jsonl"))?,
                val: read_jsonl(&d.join("val.jsonl"))?,
                test: read_jsonl(&d.join("test.jsonl"))?,
            };
            map.insert(t, splits);
        }
        Ok(Self {
            tokenizer,
            tasks: map,
            proxy_train: read_jsonl(&dir.join("proxy").join("train.jsonl"))?,
            proxy_val: read_jsonl(&dir.join("proxy").join("val.jsonl"))?,
        })
    }
}

/// Generates every task split the config needs and the vowel proxy.
pub fn gen_data(cfg: &RunConfig) -> Result<Dataset> {
    let seed = derive_seed(cfg.seed, &[stream::DATA]);
    let mut tasks = BTreeMap::new();
    for t in cfg.all_tasks() {
        let spec = TaskSpec { task: t, sizes: cfg.data.sizes, seed: derive_seed(seed, &[t as u64]) };
        tasks.insert(t, gen_task(&spec)?);
    }
    let (proxy_train, proxy_val) =
        gen_vowel_proxy(&builtin_wordlist(), cfg.data.proxy_sizes, derive_seed(seed, &[TaskId::Vowel as u64]))?;
    Ok(Dataset { tokenizer: Tokenizer::standard(), tasks, proxy_train, proxy_val })
}

/// The model config with the vocabulary size filled in.
pub fn model_config(cfg: &RunConfig, data: &Dataset) -> crate::model::ModelConfig {
    let mut m = cfg.model.clone();
    m.vocab_size = data.tokenizer.len();
    m
}

/// ICL training sequences: for every trained task (and the proxy, if
/// enabled) `prompts_per_task` prompts over its train split, with the shot
/// count cycling through `train.shots`.
pub fn training_corpus(cfg: &RunConfig, data: &Dataset) -> Result<Vec<TrainSequence>> {
    let seed = derive_seed(cfg.seed, &[stream::TRAIN_PROMPTS]);
    let mut pools: Vec<(u64, &[ICLExample])> =
        cfg.train.tasks.iter().map(|&t| Ok((t as u64, data.task(t)?.train.as_slice()))).collect::<Result<_>>()?;
    if cfg.train.include_proxy {
        pools.push((TaskId::Vowel as u64, &data.proxy_train));
    }
    let shots = &cfg.train.shots;
    if shots.is_empty() {
        return Err(Error::Config("training needs at least one shot count".into()));
    }
    let mut out = Vec::new();
    for (tag, pool) in pools {
        for (k, &n_shots) in shots.iter().enumerate() {
            let n = cfg.train.prompts_per_task / shots.len() + usize::from(k < cfg.train.prompts_per_task % shots.len());
            let s = derive_seed(seed, &[tag, n_shots as u64]);
            for p in sample_prompts(pool, pool, n_shots, n, s, cfg.train.sampling)? {
                out.push(p.training_sequence(&data.tokenizer, cfg.model.max_context)?);
            }
        }
    }
    Ok(out)
}

pub fn train_model(cfg: &RunConfig, data: &Dataset) -> Result<(Model, TrainReport)> {
    let mut model = Model::init(model_config(cfg, data))?;
    let corpus = training_corpus(cfg, data)?;
    let mut hyper = cfg.train.hyper.clone();
    hyper.seed = derive_seed(cfg.seed, &[stream::TRAIN_PROMPTS, 1]);
    let report = train(&mut model, &corpus, &hyper)?;
    Ok((model, report))
}

/// Copying prompts on the proxy training words and per-block relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub copying: Vec<EncodedPrompt>,
    pub relevance: Vec<RelevanceScores>,
}

pub fn copying_prompts(cfg: &RunConfig, model: &Model, data: &Dataset) -> Result<Vec<EncodedPrompt>> {
    let seed = derive_seed(cfg.seed, &[stream::DETECT]);
    let d = &cfg.detect;
    let prompts =
        proxy_prompts(&data.tokenizer, &data.proxy_train, &d.shots, d.prompts_per_shot, seed, cfg.model.max_context)?;
    let copying = select_copying(model, &prompts, d.max_prompts, derive_seed(seed, &[0]))?;
    if copying.is_empty() {
        return Err(Error::NoCopyingPrompts);
    }
    Ok(copying)
}

pub fn detect(cfg: &RunConfig, model: &Model, data: &Dataset, ig: &IGConfig) -> Result<Detection> {
    let copying = copying_prompts(cfg, model, data)?;
    let relevance = relevance_all(cfg, model, &copying, ig)?;
    Ok(Detection { copying, relevance })
}

/// Relevance scores of every configured block.
pub fn relevance_all(
    cfg: &RunConfig,
    model: &Model,
    copying: &[EncodedPrompt],
    ig: &IGConfig,
) -> Result<Vec<RelevanceScores>> {
    cfg.blocks().into_iter().map(|b| relevance(model, copying, LayerHandle::mlp_up(b), ig)).collect()
}

/// Validation prompts for the sweep: proxy-val queries with proxy-train
/// demonstrations.
pub fn sweep_prompts(cfg: &RunConfig, data: &Dataset) -> Result<Vec<EncodedPrompt>> {
    let seed = derive_seed(cfg.seed, &[stream::SWEEP]);
    let mut out = Vec::new();
    for &k in &cfg.sweep.shots {
        let s = derive_seed(seed, &[k as u64]);
        let prompts = sample_prompts(
            &data.proxy_train,
            &data.proxy_val,
            k,
            cfg.sweep.prompts_per_shot,
            s,
            crate::tasks::DemoSampling::Uniform,
        )?;
        for p in prompts {
            out.push(p.encode(&data.tokenizer, cfg.model.max_context)?);
        }
    }
    Ok(out)
}

pub fn sweep(cfg: &RunConfig, model: &Model, data: &Dataset, relevance: &[RelevanceScores]) -> Result<PruneConfig> {
    sweep_select(model, &sweep_prompts(cfg, data)?, relevance, &cfg.sweep.rates)
}

pub fn random_mask_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, &[stream::RANDOM_MASK])
}

/// Random mask with the same layer and size as the selected one.
pub fn random_baseline(cfg: &RunConfig, prune: &PruneConfig) -> Result<PruneMask> {
    random_mask(prune.layer, cfg.model.d_ff, prune.rate, random_mask_seed(cfg))
}

/// Sweeps and applies the selected mask in one go.
pub fn prune(
    cfg: &RunConfig,
    model: &Model,
    data: &Dataset,
    relevance: &[RelevanceScores],
) -> Result<(PruneConfig, PruneMask, Model)> {
    let pc = sweep(cfg, model, data, relevance)?;
    let mask = pc.mask(relevance)?;
    let pruned = apply(model, &mask)?;
    Ok((pc, mask, pruned))
}

/// Evaluation reports for every configured task.
pub fn evaluate_tasks(cfg: &RunConfig, model: &Model, data: &Dataset) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for &t in &cfg.eval.tasks {
        out.extend(evaluate(model, &data.tokenizer, data.task(t)?, &cfg.eval.shots, &cfg.eval.seeds, cfg.eval.n_test)?);
    }
    Ok(out)
}

/// Serializable record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub reached_target: bool,
}

impl TrainSummary {
    pub fn from_report(r: &TrainReport) -> Self {
        Self {
            steps: r.steps(),
            first_loss: r.loss_trace.first().copied().unwrap_or(f64::NAN),
            final_loss: r.final_loss().unwrap_or(f64::NAN),
            reached_target: r.reached_target,
        }
    }
}

/// Mean accuracy per task for each ablation column, plus the overall mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    #[serde(rename = "ICL")]
    pub icl: f64,
    #[serde(rename = "Ours")]
    pub ours: f64,
    #[serde(rename = "Max IG")]
    pub max_ig: f64,
    #[serde(rename = "w/o Norm")]
    pub no_norm: f64,
    #[serde(rename = "Random")]
    pub random: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub mean: AblationRow,
    /// Selected configurations of the Max IG and w/o Norm variants.
    pub max_ig_prune: PruneConfig,
    pub no_norm_prune: PruneConfig,
    pub random_mask_seed: u64,
}

pub const ABLATION_COLUMNS: [&str; 5] = ["ICL", "Ours", "Max IG", "w/o Norm", "Random"];

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("task,{}\n", ABLATION_COLUMNS.join(","));
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.task, r.icl, r.ours, r.max_ig, r.no_norm, r.random));
        }
        s
    }
}

fn task_accuracy(reports: &[EvalReport], task: TaskId) -> f64 {
    let rs: Vec<EvalReport> = reports.iter().filter(|r| r.task == task).cloned().collect();
    overall(&rs, |r| r.accuracy)
}

/// The five-column ablation. `unpruned` and `ours` are the evaluation
/// reports of the unpruned and pruned models; the Max IG and w/o Norm
/// variants rerun detection and the sweep with the changed component, and
/// Random prunes a random set of the selected size at the selected layer.
pub fn ablate(
    cfg: &RunConfig,
    model: &Model,
    data: &Dataset,
    copying: &[EncodedPrompt],
    prune: &PruneConfig,
    unpruned: &[EvalReport],
    ours: &[EvalReport],
) -> Result<AblationTable> {
    let variant = |ig: IGConfig| -> Result<(PruneConfig, Vec<EvalReport>)> {
        let rel = relevance_all(cfg, model, copying, &ig)?;
        let pc = sweep(cfg, model, data, &rel)?;
        let pruned = apply(model, &pc.mask(&rel)?)?;
        Ok((pc, evaluate_tasks(cfg, &pruned, data)?))
    };
    let base = cfg.detect.ig;
    let (max_ig_prune, max_ig) = variant(IGConfig { target: IgTarget::MaxProb, ..base })?;
    let (no_norm_prune, no_norm) = variant(IGConfig { normalize: false, ..base })?;
    let random = evaluate_tasks(cfg, &apply(model, &random_baseline(cfg, prune)?)?, data)?;

    let rows = cfg
        .eval
        .tasks
        .iter()
        .map(|&t| AblationRow {
            task: t.to_string(),
            icl: task_accuracy(unpruned, t),
            ours: task_accuracy(ours, t),
            max_ig: task_accuracy(&max_ig, t),
            no_norm: task_accuracy(&no_norm, t),
            random: task_accuracy(&random, t),
        })
        .collect();
    let mean = AblationRow {
        task: "mean".into(),
        icl: overall(unpruned, |r| r.accuracy),
        ours: overall(ours, |r| r.accuracy),
        max_ig: overall(&max_ig, |r| r.accuracy),
        no_norm: overall(&no_norm, |r| r.accuracy),
        random: overall(&random, |r| r.accuracy),
    };
    Ok(AblationTable { rows, mean, max_ig_prune, no_norm_prune, random_mask_seed: random_mask_seed(cfg) })
}

/// Mode accuracies averaged over tasks and seeds for one shot count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotModes {
    pub shot: usize,
    pub icl: f64,
    pub tv: f64,
    pub tv_pruned: f64,
}

/// TV-pruned minus TV accuracy for one seed, averaged over tasks and shots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub tv: f64,
    pub tv_pruned: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVecTable {
    pub reports: Vec<ModeReport>,
    pub per_shot: Vec<ShotModes>,
    pub per_seed: Vec<SeedDelta>,
    pub delta_mean: f64,
    /// Sample variance of the per-seed deltas.
    pub delta_variance: f64,
    pub seeds_holding: usize,
    /// Whether TV-pruned >= TV on at least 3 of every 5 seeds.
    pub holds: bool,
}

impl TaskVecTable {
    pub fn from_reports(reports: Vec<ModeReport>) -> Self {
        let mean = |rs: &[&ModeReport], f: fn(&ModeReport) -> f64| {
            rs.iter().map(|r| f(r)).sum::<f64>() / rs.len().max(1) as f64
        };
        let mut shots: BTreeMap<usize, Vec<&ModeReport>> = BTreeMap::new();
        let mut seeds: BTreeMap<u64, Vec<&ModeReport>> = BTreeMap::new();
        for r in &reports {
            shots.entry(r.shot).or_default().push(r);
            seeds.entry(r.seed).or_default().push(r);
        }
        let per_shot = shots
            .into_iter()
            .map(|(shot, rs)| ShotModes {
                shot,
                icl: mean(&rs, |r| r.icl),
                tv: mean(&rs, |r| r.tv),
                tv_pruned: mean(&rs, |r| r.tv_pruned),
            })
            .collect();
        let per_seed: Vec<SeedDelta> = seeds
            .into_iter()
            .map(|(seed, rs)| {
                let (tv, tv_pruned) = (mean(&rs, |r| r.tv), mean(&rs, |r| r.tv_pruned));
                SeedDelta { seed, tv, tv_pruned, delta: tv_pruned - tv }
            })
            .collect();
        let n = per_seed.len();
        let delta_mean = per_seed.iter().map(|d| d.delta).sum::<f64>() / n.max(1) as f64;
        let delta_variance = if n > 1 {
            per_seed.iter().map(|d| (d.delta - delta_mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let seeds_holding = per_seed.iter().filter(|d| d.tv_pruned >= d.tv).count();
        Self { reports, per_shot, per_seed, delta_mean, delta_variance, seeds_holding, holds: seeds_holding * 5 >= n * 3 }
    }
}

/// ICL / task vector / pruned task vector for every configured task.
pub fn taskvec(cfg: &RunConfig, model: &Model, pruned: &Model, data: &Dataset) -> Result<TaskVecTable> {
    let tv = &cfg.taskvec;
    let settings = ModeSettings { shots: tv.shots.clone(), seeds: tv.seeds.clone(), n_test: tv.n_test, n_dev: tv.n_dev };
    let mut reports = Vec::new();
    for &t in &tv.tasks {
        reports.extend(eval_modes(model, pruned, &data.tokenizer, data.task(t)?, &settings)?);
    }
    Ok(TaskVecTable::from_reports(reports))
}
