//! Synthetic tasks: the vowel-counting proxy, the T1–T18 catalog, prompt
//! construction and the word-level tokenizer.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

mod catalog;
mod prompt;
mod tokenizer;

pub use catalog::builtin_wordlist;
pub use prompt::{build_prompt, sample_prompts, DemoSampling, EncodedPrompt, Prompt};
pub use tokenizer::{Tokenizer, COLON, COMMA, GLUE_COMMA};

pub const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// One demonstration pair `x : y`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ICLExample {
    pub input: String,
    pub label: String,
}

impl ICLExample {
    pub fn new(input: &str, label: &str) -> Self {
        Self { input: input.to_string(), label: label.to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskId {
    /// Word → number of vowels; used only for detection.
    Vowel,
    /// `y = x`; a sanity task for training.
    Echo,
    T1,
    T2,
    T3,
    T4,
    T5,
    T6,
    T7,
    T8,
    T9,
    T10,
    T11,
    T12,
    T13,
    T14,
    T15,
    T16,
    T17,
    T18,
}

impl TaskId {
    pub const ALL: [TaskId; 20] = [
        TaskId::Vowel,
        TaskId::Echo,
        TaskId::T1,
        TaskId::T2,
        TaskId::T3,
        TaskId::T4,
        TaskId::T5,
        TaskId::T6,
        TaskId::T7,
        TaskId::T8,
        TaskId::T9,
        TaskId::T10,
        TaskId::T11,
        TaskId::T12,
        TaskId::T13,
        TaskId::T14,
        TaskId::T15,
        TaskId::T16,
        TaskId::T17,
        TaskId::T18,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Vowel => "vowel",
            TaskId::Echo => "echo",
            TaskId::T1 => "T1",
            TaskId::T2 => "T2",
            TaskId::T3 => "T3",
            TaskId::T4 => "T4",
            TaskId::T5 => "T5",
            TaskId::T6 => "T6",
            TaskId::T7 => "T7",
            TaskId::T8 => "T8",
            TaskId::T9 => "T9",
            TaskId::T10 => "T10",
            TaskId::T11 => "T11",
            TaskId::T12 => "T12",
            TaskId::T13 => "T13",
            TaskId::T14 => "T14",
            TaskId::T15 => "T15",
            TaskId::T16 => "T16",
            TaskId::T17 => "T17",
            TaskId::T18 => "T18",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            TaskId::Vowel => "vowel count",
            TaskId::Echo => "echo",
            TaskId::T1 => "to lowercase",
            TaskId::T2 => "to uppercase",
            TaskId::T3 => "list first",
            TaskId::T4 => "list last",
            TaskId::T5 => "list max",
            TaskId::T6 => "list min",
            TaskId::T7 => "next letter",
            TaskId::T8 => "present to past",
            TaskId::T9 => "present to gerund",
            TaskId::T10 => "singular to plural",
            TaskId::T11 => "antonyms",
            TaskId::T12 => "present to past participle",
            TaskId::T13 => "landmark to country",
            TaskId::T14 => "country to currency",
            TaskId::T15 => "country to capital",
            TaskId::T16 => "person to language",
            TaskId::T17 => "religion",
            TaskId::T18 => "place to continent",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Shrinks the sizes proportionally so they fit in `available` items;
    /// rounding leftovers go to train.
    pub fn fit(&self, available: usize) -> SplitSizes {
        let total = self.total();
        if total <= available {
            return *self;
        }
        let f = |n: usize| n * available / total;
        let (val, test) = (f(self.val), f(self.test));
        SplitSizes { train: available - val - test, val, test }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub sizes: SplitSizes,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSplits {
    pub task: TaskId,
    pub train: Vec<ICLExample>,
    pub val: Vec<ICLExample>,
    pub test: Vec<ICLExample>,
}

impl TaskSplits {
    /// Distinct labels over all splits, sorted.
    pub fn label_space(&self) -> Vec<String> {
        let set: BTreeSet<&str> =
            self.train.iter().chain(&self.val).chain(&self.test).map(|e| e.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }
}

pub fn vowel_count(word: &str) -> usize {
    word.chars().filter(|c| VOWELS.contains(c)).count()
}

fn split(mut pool: Vec<ICLExample>, sizes: SplitSizes, seed: u64) -> (Vec<ICLExample>, Vec<ICLExample>, Vec<ICLExample>) {
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let s = sizes.fit(pool.len());
    let test = pool.split_off(s.train + s.val).into_iter().take(s.test).collect();
    let val = pool.split_off(s.train);
    (pool, val, test)
}

/// Generates the train/val/test splits of one task. Splits are sampled
/// without replacement from the task's pool, so they never share an input;
/// sizes larger than the pool are shrunk proportionally.
pub fn gen_task(spec: &TaskSpec) -> Result<TaskSplits> {
    let pool = catalog::pool(spec.task, spec.seed);
    let (train, val, test) = split(pool, spec.sizes, spec.seed);
    Ok(TaskSplits { task: spec.task, train, val, test })
}

/// Builds the vowel-counting proxy from `wordlist`: each word (lowercased)
/// is labelled with its number of `a e i o u`. Words with more than nine
/// vowels are dropped so every label is one digit. Returns `(train, val)`.
pub fn gen_vowel_proxy(wordlist: &[String], sizes: SplitSizes, seed: u64) -> Result<(Vec<ICLExample>, Vec<ICLExample>)> {
    let mut seen = BTreeSet::new();
    let mut pool = Vec::new();
    for w in wordlist {
        let w = w.trim().to_ascii_lowercase();
        if w.is_empty() {
            continue;
        }
        if !w.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(Error::Precondition(format!("`{w}` is not an ASCII word")));
        }
        let n = vowel_count(&w);
        if n <= 9 && seen.insert(w.clone()) {
            pool.push(ICLExample { input: w, label: n.to_string() });
        }
    }
    if pool.is_empty() {
        return Err(Error::Empty("wordlist".into()));
    }
    let (train, val, _) = split(pool, SplitSizes { test: 0, ..sizes }, seed);
    Ok((train, val))
}

/// Reads a wordlist: one word per line, blank lines ignored.
pub fn read_wordlist(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn write_jsonl(path: &Path, examples: &[ICLExample]) -> Result<()> {
    let mut buf = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut buf, e)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ICLExample>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ICLExample = serde_json::from_str(&line)?;
        if e.label.is_empty() {
            return Err(Error::Format(format!("{}: empty label", path.display())));
        }
        out.push(e);
    }
    Ok(out)
}

impl Tokenizer {
    /// Vocabulary over every string the built-in tasks can produce.
    pub fn standard() -> Self {
        let texts = catalog::all_texts();
        Tokenizer::build(texts.iter().map(String::as_str))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskId) -> TaskSpec {
        TaskSpec { task, sizes: SplitSizes { train: 1000, val: 200, test: 200 }, seed: 9 }
    }

    #[test]
    fn vowel_examples() {
        assert_eq!(vowel_count("apple"), 2);
        assert_eq!(vowel_count(&"Florida".to_ascii_lowercase()), 3);
        assert_eq!(vowel_count("rhythm"), 0);
    }

    #[test]
    fn catalog_examples() {
        let has = |t: TaskId, i: &str, l: &str| {
            let s = gen_task(&spec(t)).unwrap();
            s.train.iter().chain(&s.val).chain(&s.test).any(|e| e.input == i && e.label == l)
        };
        assert!(has(TaskId::T1, "A", "a"));
        assert!(has(TaskId::T2, "a", "A"));
        assert!(has(TaskId::T5, "2,1,5", "5"));
        assert!(has(TaskId::T6, "2,1,5", "1"));
        assert!(has(TaskId::T7, "a,b,c", "d"));
        assert!(has(TaskId::T8, "go", "went"));
        assert!(has(TaskId::T9, "go", "going"));
        assert!(has(TaskId::T10, "cat", "cats"));
        assert!(has(TaskId::T11, "happy", "sad"));
        assert!(has(TaskId::T12, "catch", "caught"));
        assert!(has(TaskId::T14, "Azerbaijan", "manat"));
        assert!(has(TaskId::T15, "France", "Paris"));
        assert!(has(TaskId::T16, "Macron", "French"));
        assert!(has(TaskId::T17, "Muhammad", "Islam"));
        assert!(has(TaskId::T18, "Swanson Mountains", "Antarctica"));
    }

    #[test]
    fn list_tasks_follow_their_rule() {
        for t in [TaskId::T3, TaskId::T4] {
            for e in gen_task(&spec(t)).unwrap().train {
                let items: Vec<&str> = e.input.split(',').collect();
                assert_eq!(items.len(), 4);
                let want = if t == TaskId::T3 { items[0] } else { items[3] };
                assert_eq!(e.label, want);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        for t in TaskId::ALL {
            let s = gen_task(&spec(t)).unwrap();
            let mut inputs = BTreeSet::new();
            for e in s.train.iter().chain(&s.val).chain(&s.test) {
                assert!(inputs.insert(&e.input), "{t}: duplicate {}", e.input);
            }
            assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty(), "{t}");
            assert_eq!(s, gen_task(&spec(t)).unwrap());
        }
    }

    #[test]
    fn every_label_is_one_token() {
        let tok = Tokenizer::standard();
        for t in TaskId::ALL {
            let s = gen_task(&spec(t)).unwrap();
            for e in s.train.iter().chain(&s.val).chain(&s.test) {
                tok.encode_label(&e.label).unwrap();
                tok.encode(&e.input).unwrap();
            }
        }
    }

    #[test]
    fn task_ids_parse() {
        assert_eq!("t5".parse::<TaskId>().unwrap(), TaskId::T5);
        assert_eq!("vowel".parse::<TaskId>().unwrap(), TaskId::Vowel);
        assert!(matches!("T19".parse::<TaskId>(), Err(Error::UnknownTask(_))));
        let json = serde_json::to_string(&TaskId::T12).unwrap();
        assert_eq!(json, "\"T12\"");
    }

    #[test]
    fn vowel_proxy_rejects_empty_and_keeps_splits_apart() {
        assert!(matches!(gen_vowel_proxy(&[], SplitSizes { train: 1, val: 1, test: 0 }, 0), Err(Error::Empty(_))));
        let words = builtin_wordlist();
        let (train, val) = gen_vowel_proxy(&words, SplitSizes { train: 200, val: 100, test: 0 }, 1).unwrap();
        assert_eq!((train.len(), val.len()), (200, 100));
        let a: BTreeSet<_> = train.iter().map(|e| &e.input).collect();
        assert!(val.iter().all(|e| !a.contains(&e.input)));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let ex = vec![ICLExample::new("apple", "2"), ICLExample::new("Eiffel Tower", "France")];
        write_jsonl(&p, &ex).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next().unwrap(), r#"{"input":"apple","label":"2"}"#);
        assert_eq!(read_jsonl(&p).unwrap(), ex);
    }
}
