//! n-shot evaluation with the copying / other error split.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::parallel::map_ordered;
use crate::seed::derive_seed;
use crate::tasks::{sample_prompts, DemoSampling, EncodedPrompt, ICLExample, Prompt, TaskId, TaskSplits, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Correct,
    CopyingError,
    OtherError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub predicted: String,
    pub gold: String,
    pub kind: OutcomeKind,
}

/// A wrong prediction that equals one of the in-context labels is a
/// copying error.
pub fn classify<S: AsRef<str>>(predicted: &str, gold: &str, context_labels: &[S]) -> PredictionOutcome {
    let kind = if predicted == gold {
        OutcomeKind::Correct
    } else if context_labels.iter().any(|l| l.as_ref() == predicted) {
        OutcomeKind::CopyingError
    } else {
        OutcomeKind::OtherError
    };
    PredictionOutcome { predicted: predicted.to_string(), gold: gold.to_string(), kind }
}

/// Same rule on token ids.
pub fn classify_ids(predicted: usize, gold: usize, context_labels: &[usize]) -> OutcomeKind {
    if predicted == gold {
        OutcomeKind::Correct
    } else if context_labels.contains(&predicted) {
        OutcomeKind::CopyingError
    } else {
        OutcomeKind::OtherError
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(dist: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[best] {
            best = i;
        }
    }
    best
}

/// Anything that answers an encoded prompt with one token id.
pub trait Predictor: Sync {
    fn max_context(&self) -> usize;
    fn predict_id(&self, prompt: &EncodedPrompt) -> Result<usize>;
}

impl Predictor for Model {
    fn max_context(&self) -> usize {
        self.config().max_context
    }

    fn predict_id(&self, prompt: &EncodedPrompt) -> Result<usize> {
        Ok(argmax(&self.next_token_dist(&prompt.tokens)?))
    }
}

/// Most probable next label at the answer position, decoded.
pub fn predict(model: &impl Predictor, tok: &Tokenizer, prompt: &Prompt) -> Result<String> {
    let enc = prompt.encode(tok, model.max_context())?;
    Ok(tok.token(model.predict_id(&enc)?)?.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskId,
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub total_error: f64,
    pub copying_error: f64,
    pub other_error: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn from_outcomes(task: TaskId, shots: usize, seed: u64, outcomes: &[OutcomeKind]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Empty("evaluation outcomes".into()));
        }
        let n = outcomes.len();
        let count = |k: OutcomeKind| outcomes.iter().filter(|&&o| o == k).count();
        let (correct, copying) = (count(OutcomeKind::Correct), count(OutcomeKind::CopyingError));
        let other = n - correct - copying;
        let f = |c: usize| c as f64 / n as f64;
        Ok(Self {
            task,
            shots,
            seed,
            accuracy: f(correct),
            total_error: f(n - correct),
            copying_error: f(copying),
            other_error: f(other),
            samples: n,
        })
    }
}

/// Prompts of one (task, shots, seed) cell: demonstrations from the train
/// split, queries from `queries`.
pub fn cell_prompts(
    splits: &TaskSplits,
    queries: &[ICLExample],
    shots: usize,
    seed: u64,
    n: usize,
) -> Result<Vec<Prompt>> {
    let s = derive_seed(seed, &[splits.task as u64, shots as u64]);
    sample_prompts(&splits.train, queries, shots, n, s, DemoSampling::Uniform)
}

/// [`cell_prompts`], encoded.
pub fn eval_prompts(
    tok: &Tokenizer,
    splits: &TaskSplits,
    queries: &[ICLExample],
    shots: usize,
    seed: u64,
    n: usize,
    max_context: usize,
) -> Result<Vec<EncodedPrompt>> {
    cell_prompts(splits, queries, shots, seed, n)?.iter().map(|p| p.encode(tok, max_context)).collect()
}

pub fn outcomes(model: &impl Predictor, prompts: &[EncodedPrompt]) -> Result<Vec<OutcomeKind>> {
    map_ordered(prompts, |p| Ok(classify_ids(model.predict_id(p)?, p.gold, &p.context_labels))).into_iter().collect()
}

/// One report per (shots, seed) on `n_test` prompts whose queries come from
/// the test split.
pub fn evaluate(
    model: &impl Predictor,
    tok: &Tokenizer,
    splits: &TaskSplits,
    shots: &[usize],
    seeds: &[u64],
    n_test: usize,
) -> Result<Vec<EvalReport>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut out = Vec::with_capacity(shots.len() * seeds.len());
    for &k in shots {
        for &seed in seeds {
            let prompts = eval_prompts(tok, splits, &splits.test, k, seed, n_test, model.max_context())?;
            out.push(EvalReport::from_outcomes(splits.task, k, seed, &outcomes(model, &prompts)?)?);
        }
    }
    Ok(out)
}

/// Mean over seeds for every (task, shots) cell, in sorted key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMean {
    pub task: TaskId,
    pub shots: usize,
    pub seeds: usize,
    pub accuracy: f64,
    pub total_error: f64,
    pub copying_error: f64,
    pub other_error: f64,
}

pub fn mean_over_seeds(reports: &[EvalReport]) -> Vec<CellMean> {
    let mut cells: BTreeMap<(TaskId, usize), Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        cells.entry((r.task, r.shots)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((task, shots), rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            CellMean {
                task,
                shots,
                seeds: rs.len(),
                accuracy: mean(|r| r.accuracy),
                total_error: mean(|r| r.total_error),
                copying_error: mean(|r| r.copying_error),
                other_error: mean(|r| r.other_error),
            }
        })
        .collect()
}

/// Mean of a metric over all reports.
pub fn overall(reports: &[EvalReport], metric: fn(&EvalReport) -> f64) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(metric).sum::<f64>() / reports.len() as f64
}

pub const CSV_HEADER: &str = "task,shot,seed,acc,total_err,copy_err,other_err";

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in reports {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.task, r.shots, r.seed, r.accuracy, r.total_error, r.copying_error, r.other_error
        );
    }
    s
}

/// Tasks present in `reports`, sorted.
pub fn tasks_of(reports: &[EvalReport]) -> Vec<TaskId> {
    reports.iter().map(|r| r.task).collect::<BTreeSet<_>>().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_task, SplitSizes, TaskSpec};

    struct Oracle;
    impl Predictor for Oracle {
        fn max_context(&self) -> usize {
            64
        }
        fn predict_id(&self, p: &EncodedPrompt) -> Result<usize> {
            Ok(p.gold)
        }
    }

    struct Constant(usize);
    impl Predictor for Constant {
        fn max_context(&self) -> usize {
            64
        }
        fn predict_id(&self, _: &EncodedPrompt) -> Result<usize> {
            Ok(self.0)
        }
    }

    fn splits() -> TaskSplits {
        gen_task(&TaskSpec { task: TaskId::T5, sizes: SplitSizes { train: 300, val: 50, test: 100 }, seed: 2 }).unwrap()
    }

    #[test]
    fn classify_cases() {
        assert_eq!(classify("2", "3", &["2", "1"]).kind, OutcomeKind::CopyingError);
        assert_eq!(classify("1", "3", &["2", "1"]).kind, OutcomeKind::CopyingError);
        assert_eq!(classify("3", "3", &["2", "1"]).kind, OutcomeKind::Correct);
        assert_eq!(classify("7", "3", &["2", "1"]).kind, OutcomeKind::OtherError);
        assert_eq!(classify("3", "3", &["3"]).kind, OutcomeKind::Correct);
    }

    #[test]
    fn argmax_prefers_lowest_id_on_ties() {
        assert_eq!(argmax(&[0.25; 4]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
        let mut d = vec![0.0; 10];
        d[7] = 1.0;
        assert_eq!(argmax(&d), 7);
    }

    #[test]
    fn uniform_model_predicts_token_zero() {
        let config = crate::model::ModelConfig {
            n_blocks: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 8,
            vocab_size: Tokenizer::standard().len(),
            max_context: 16,
            seed: 0,
        };
        let m = Model::zeros(config).unwrap();
        let tok = Tokenizer::standard();
        let p = Prompt { examples: vec![], query: "apple".into(), gold: "2".into() };
        assert_eq!(predict(&m, &tok, &p).unwrap(), tok.token(0).unwrap());
    }

    #[test]
    fn perfect_model_is_always_right() {
        let tok = Tokenizer::standard();
        for r in evaluate(&Oracle, &tok, &splits(), &[0, 1, 4], &[0, 1], 50).unwrap() {
            assert_eq!((r.accuracy, r.total_error, r.copying_error, r.other_error), (1.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn constant_model_copy_rate_matches_count() {
        let tok = Tokenizer::standard();
        let s = splits();
        let five = tok.id("5").unwrap();
        for shots in [1, 3] {
            let prompts = eval_prompts(&tok, &s, &s.test, shots, 4, 80, 64).unwrap();
            let gold_not_five: Vec<_> = prompts.iter().filter(|p| p.gold != five).cloned().collect();
            let want = gold_not_five.iter().filter(|p| p.context_labels.contains(&five)).count() as f64
                / gold_not_five.len() as f64;
            let r = EvalReport::from_outcomes(TaskId::T5, shots, 4, &outcomes(&Constant(five), &gold_not_five).unwrap())
                .unwrap();
            assert_eq!(r.accuracy, 0.0);
            assert_eq!(r.copying_error, want);
        }
    }

    #[test]
    fn reports_decompose_and_repeat() {
        let tok = Tokenizer::standard();
        let s = splits();
        let c = Constant(tok.id("5").unwrap());
        let a = evaluate(&c, &tok, &s, &[1, 2, 3, 4], &[0, 1, 2], 40).unwrap();
        assert_eq!(a.len(), 12);
        for r in &a {
            assert!((r.accuracy + r.total_error - 1.0).abs() <= 1e-12);
            assert!((r.copying_error + r.other_error - r.total_error).abs() <= 1e-12);
        }
        assert_eq!(a, evaluate(&c, &tok, &s, &[1, 2, 3, 4], &[0, 1, 2], 40).unwrap());
        assert_eq!(mean_over_seeds(&a).len(), 4);
        let csv = reports_to_csv(&a);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 13);
    }

    #[test]
    fn empty_seed_set_is_a_config_error() {
        let tok = Tokenizer::standard();
        assert!(matches!(evaluate(&Oracle, &tok, &splits(), &[1], &[], 10), Err(Error::Config(_))));
    }
}
