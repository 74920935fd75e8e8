//! The `cplab` command line. Each subcommand runs one pipeline stage and
//! reads the previous stages' artifacts from `--out`.
//!
//! Exit codes: 0 on success, 1 on a configuration error, 2 on a pipeline
//! error. Failures print one JSON line `{"error": kind, "message": ...}` to
//! stderr.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::detection::{IgTarget, PruneConfig};
use crate::error::{Error, Result};
use crate::eval::{reports_to_csv, EvalReport};
use crate::fsutil::{write_atomic, write_json_atomic};
use crate::model::{Checkpoint, TrainingMeta};
use crate::pipeline::figures;
use crate::pipeline::report::RelevanceArtifact;
use crate::pipeline::{self, AblationTable, Dataset, Report, RunConfig, TaskVecTable, TrainSummary};
use crate::pruning::{apply, PruneMask};

#[derive(Debug, Parser)]
#[command(name = "cplab", version, about = "Copying-neuron detection and pruning on toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run config JSON. Defaults to `<out>/config.json`, then to the built-in config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Riemann steps for Integrated Gradients.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Pruning rates, e.g. `1..10` (percent) or `0.02,0.05`.
    #[arg(long, global = true)]
    pub rates: Option<String>,
    /// Attribution target: `shift` or `maxprob`.
    #[arg(long, global = true)]
    pub target: Option<IgTarget>,
    /// Skip per-prompt min-max normalization of attributions.
    #[arg(long, global = true)]
    pub no_norm: bool,
    /// Prune a random set of the selected size instead of the top-relevance set.
    #[arg(long, global = true)]
    pub random_baseline: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate task splits, the vowel proxy and the vocabulary.
    GenData,
    /// Train the toy model on the ICL mixture.
    Train,
    /// Collect copying prompts and score neurons.
    Detect,
    /// Sweep blocks and rates on proxy validation prompts and prune.
    Prune,
    /// Evaluate the unpruned and pruned models on the held-out tasks.
    Eval,
    /// Five-column ablation.
    Ablate,
    /// ICL vs task vectors vs pruned task vectors.
    Taskvec,
    /// Assemble report.json and the figures.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen_data",
            Command::Train => "train",
            Command::Detect => "detect",
            Command::Prune => "prune",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Taskvec => "taskvec",
            Command::Report => "report",
        }
    }
}

/// Artifact paths under `--out`.
pub mod paths {
    pub const CONFIG: &str = "config.json";
    pub const DATA: &str = "data";
    pub const MODEL: &str = "model.ckpt";
    pub const TRAIN: &str = "train.json";
    pub const DETECT: &str = "detect.json";
    pub const PRUNE: &str = "prune.json";
    pub const MASK: &str = "mask.json";
    pub const PRUNED: &str = "pruned.ckpt";
    pub const EVAL: &str = "eval.json";
    pub const ABLATION: &str = "ablation.json";
    pub const TASKVEC: &str = "taskvec.json";
    pub const REPORT: &str = "report.json";
    pub const TIMING: &str = "timing.json";
    pub const BARS: &str = "error_bars.csv";
    pub const SCATTER: &str = "accuracy_scatter.csv";
    pub const MODES: &str = "taskvec_modes.csv";
}

/// Pointer from `detect.json` to the content-addressed relevance file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct DetectRecord {
    relevance_file: String,
    relevance_hash: String,
    /// Hash of the config and model the scores were computed from.
    input_key: String,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct EvalRecord {
    unpruned: Vec<EvalReport>,
    pruned: Vec<EvalReport>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Failure class of a command.
#[derive(Debug)]
pub enum Failure {
    Config(Error),
    Pipeline(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 1,
            Failure::Pipeline(_) => 2,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Config(e) | Failure::Pipeline(e) => e,
        }
    }

    pub fn json_line(&self) -> String {
        // I/O and parse failures while loading the config are config errors.
        let kind = match self {
            Failure::Config(e) if !matches!(e, Error::Config(_) | Error::UnknownTask(_)) => "config",
            _ => self.error().kind(),
        };
        serde_json::json!({ "error": kind, "message": self.error().to_string() }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownTask(_) => Failure::Config(e),
            e => Failure::Pipeline(e),
        }
    }
}

/// Loads the config and applies the command-line overrides.
pub fn resolve_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let stored = common.out.join(paths::CONFIG);
    let path = common.config.clone().or_else(|| stored.exists().then_some(stored));
    let mut cfg = match path {
        Some(p) => read_json::<RunConfig>(&p).map_err(Failure::Config)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.m {
        cfg.detect.ig.m = m;
    }
    if let Some(t) = common.target {
        cfg.detect.ig.target = t;
    }
    if common.no_norm {
        cfg.detect.ig.normalize = false;
    }
    if let Some(r) = &common.rates {
        cfg.sweep.rates = pipeline::parse_rates(r).map_err(Failure::Config)?;
    }
    cfg.validate().map_err(Failure::Config)?;
    Ok(cfg)
}

/// Runs one command.
pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(&cli.common)?;
    let out = &cli.common.out;
    let start = Instant::now();
    write_json_atomic(&out.join(paths::CONFIG), &cfg)?;
    let mut ctx = Ctx { cfg, out: out.clone(), random_baseline: cli.common.random_baseline };
    match cli.command {
        Command::GenData => ctx.gen_data()?,
        Command::Train => ctx.train()?,
        Command::Detect => ctx.detect()?,
        Command::Prune => ctx.prune()?,
        Command::Eval => ctx.eval()?,
        Command::Ablate => ctx.ablate()?,
        Command::Taskvec => ctx.taskvec()?,
        Command::Report => ctx.report()?,
    }
    ctx.record_time(cli.command.name(), start.elapsed().as_secs_f64())?;
    Ok(())
}

/// Entry point of the binary.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.json_line());
            f.exit_code()
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    random_baseline: bool,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data(&self) -> Result<Dataset> {
        Dataset::load(&self.path(paths::DATA), &self.cfg.all_tasks())
    }

    fn model(&self, name: &str) -> Result<crate::model::Model> {
        Ok(Checkpoint::load(&self.path(name))?.model)
    }

    fn save_model(&self, name: &str, model: &crate::model::Model, data: &Dataset, meta: TrainingMeta) -> Result<()> {
        Checkpoint { model: model.clone(), vocab: data.tokenizer.tokens().to_vec(), meta }.save(&self.path(name))
    }

    fn relevance(&self) -> Result<RelevanceArtifact> {
        let rec: DetectRecord = read_json(&self.path(paths::DETECT))?;
        let bytes = fs::read(self.path(&rec.relevance_file))?;
        if pipeline::sha256_hex(&bytes) != rec.relevance_hash {
            return Err(Error::Format(format!("{} does not match its recorded hash", rec.relevance_file)));
        }
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn record_time(&self, stage: &str, secs: f64) -> Result<()> {
        let p = self.path(paths::TIMING);
        let mut t: BTreeMap<String, f64> = if p.exists() { read_json(&p)? } else { BTreeMap::new() };
        t.insert(stage.to_string(), secs);
        write_json_atomic(&p, &t)
    }

    fn gen_data(&mut self) -> Result<()> {
        pipeline::gen_data(&self.cfg)?.save(&self.path(paths::DATA))
    }

    fn train(&mut self) -> Result<()> {
        let data = self.data()?;
        let (model, report) = pipeline::train_model(&self.cfg, &data)?;
        let summary = TrainSummary::from_report(&report);
        let meta = TrainingMeta { steps: summary.steps, final_loss: report.final_loss(), seed: self.cfg.seed };
        self.save_model(paths::MODEL, &model, &data, meta)?;
        write_json_atomic(&self.path(paths::TRAIN), &summary)
    }

    fn detect(&mut self) -> Result<()> {
        let model_bytes = fs::read(self.path(paths::MODEL))?;
        let input_key = pipeline::sha256_hex(&[serde_json::to_vec(&self.cfg)?, model_bytes].concat());
        if let Ok(rec) = read_json::<DetectRecord>(&self.path(paths::DETECT)) {
            if rec.input_key == input_key && self.relevance().is_ok() {
                return Ok(());
            }
        }
        let data = self.data()?;
        let model = self.model(paths::MODEL)?;
        let det = pipeline::detect(&self.cfg, &model, &data, &self.cfg.detect.ig)?;
        let art = RelevanceArtifact { ig: self.cfg.detect.ig, copying_prompts: det.copying.len(), scores: det.relevance };
        let name = art.file_name()?;
        write_atomic(&self.path(&name), &art.to_bytes()?)?;
        let rec = DetectRecord { relevance_file: name, relevance_hash: art.hash()?, input_key };
        write_json_atomic(&self.path(paths::DETECT), &rec)
    }

    fn prune(&mut self) -> Result<()> {
        let data = self.data()?;
        let model = self.model(paths::MODEL)?;
        let rel = self.relevance()?;
        let pc = pipeline::sweep(&self.cfg, &model, &data, &rel.scores)?;
        let mask =
            if self.random_baseline { pipeline::random_baseline(&self.cfg, &pc)? } else { pc.mask(&rel.scores)? };
        let pruned = apply(&model, &mask)?;
        let meta = Checkpoint::load(&self.path(paths::MODEL))?.meta;
        self.save_model(paths::PRUNED, &pruned, &data, meta)?;
        mask.save(&self.path(paths::MASK))?;
        write_json_atomic(&self.path(paths::PRUNE), &pc)
    }

    fn eval(&mut self) -> Result<()> {
        let data = self.data()?;
        let unpruned = pipeline::evaluate_tasks(&self.cfg, &self.model(paths::MODEL)?, &data)?;
        let pruned = pipeline::evaluate_tasks(&self.cfg, &self.model(paths::PRUNED)?, &data)?;
        write_atomic(&self.path("eval_unpruned.csv"), reports_to_csv(&unpruned).as_bytes())?;
        write_atomic(&self.path("eval_pruned.csv"), reports_to_csv(&pruned).as_bytes())?;
        write_json_atomic(&self.path(paths::EVAL), &EvalRecord { unpruned, pruned })
    }

    fn ablate(&mut self) -> Result<()> {
        let data = self.data()?;
        let model = self.model(paths::MODEL)?;
        let pc: PruneConfig = read_json(&self.path(paths::PRUNE))?;
        let ev: EvalRecord = read_json(&self.path(paths::EVAL))?;
        let copying = pipeline::copying_prompts(&self.cfg, &model, &data)?;
        let table = pipeline::ablate(&self.cfg, &model, &data, &copying, &pc, &ev.unpruned, &ev.pruned)?;
        write_atomic(&self.path("ablation.csv"), table.to_csv().as_bytes())?;
        write_json_atomic(&self.path(paths::ABLATION), &table)
    }

    fn taskvec(&mut self) -> Result<()> {
        let data = self.data()?;
        let table = pipeline::taskvec(&self.cfg, &self.model(paths::MODEL)?, &self.model(paths::PRUNED)?, &data)?;
        write_json_atomic(&self.path(paths::TASKVEC), &table)
    }

    fn report(&mut self) -> Result<()> {
        let train: TrainSummary = read_json(&self.path(paths::TRAIN))?;
        let ev: EvalRecord = read_json(&self.path(paths::EVAL))?;
        let ablation: AblationTable = read_json(&self.path(paths::ABLATION))?;
        let tv: TaskVecTable = read_json(&self.path(paths::TASKVEC))?;
        let report = Report::assemble(
            &self.cfg,
            train,
            &self.relevance()?,
            read_json(&self.path(paths::PRUNE))?,
            &PruneMask::load(&self.path(paths::MASK))?,
            ev.unpruned,
            ev.pruned,
            ablation,
            tv,
        )?;
        report.verify()?;
        write_figures(&self.out, &report)?;
        write_atomic(&self.path(paths::REPORT), &report.to_bytes()?)
    }
}

/// Writes the figure CSVs and their SVG renders next to the report.
pub fn write_figures(out: &Path, report: &Report) -> Result<()> {
    let c = &report.config.model;
    let name = format!("toy-{}x{}", c.n_blocks, c.d_model);
    let csvs = [
        (paths::BARS, figures::bars_csv(&name, &report.eval_unpruned, &report.eval_pruned), figures::bars_svg as fn(&str) -> Result<String>),
        (paths::SCATTER, figures::scatter_csv(&report.eval_unpruned, &report.eval_pruned), figures::scatter_svg),
        (paths::MODES, figures::modes_csv(&report.taskvec), figures::modes_svg),
    ];
    for (file, csv, render) in csvs {
        write_atomic(&out.join(file), csv.as_bytes())?;
        write_atomic(&out.join(file.replace(".csv", ".svg")), render(&csv)?.as_bytes())?;
    }
    write_atomic(&out.join("ablation.csv"), report.ablation.to_csv().as_bytes())
}
