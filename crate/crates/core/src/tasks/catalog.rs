//! Example pools for every task. Each pool is a deterministic list of
//! distinct `(input, label)` pairs; splitting happens in the parent module.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{vowel_count, ICLExample, TaskId};

const WORDS: &str = include_str!("data/words.txt");
const VERBS: &str = include_str!("data/verbs.tsv");
const PLURALS: &str = include_str!("data/plurals.tsv");
const ANTONYMS: &str = include_str!("data/antonyms.tsv");
const COUNTRIES: &str = include_str!("data/countries.tsv");
const LANDMARKS: &str = include_str!("data/landmarks.tsv");
const PLACES: &str = include_str!("data/places.tsv");
const PEOPLE: &str = include_str!("data/people.tsv");
const RELIGION: &str = include_str!("data/religion.tsv");

/// Number of distinct lists drawn for the letter-list tasks.
const LETTER_LIST_POOL: usize = 600;
const LETTER_LIST_LEN: usize = 4;
const DIGIT_LIST_LEN: usize = 3;

pub fn builtin_wordlist() -> Vec<String> {
    WORDS.lines().map(str::trim).filter(|w| !w.is_empty()).map(String::from).collect()
}

fn rows(table: &str) -> impl Iterator<Item = Vec<&str>> {
    table.lines().filter(|l| !l.trim().is_empty()).map(|l| l.split('\t').map(str::trim).collect())
}

fn column_pairs(table: &str, input: usize, label: usize) -> Vec<ICLExample> {
    let mut out: Vec<ICLExample> = Vec::new();
    for r in rows(table) {
        if out.iter().any(|e| e.input == r[input]) {
            continue;
        }
        out.push(ICLExample::new(r[input], r[label]));
    }
    out
}

fn letters() -> impl Iterator<Item = char> + Clone {
    'a'..='z'
}

/// Pool of distinct examples for `task`. Only the letter-list tasks use
/// `seed`; every other pool is fixed.
pub(super) fn pool(task: TaskId, seed: u64) -> Vec<ICLExample> {
    match task {
        TaskId::Vowel => builtin_wordlist()
            .into_iter()
            .filter(|w| vowel_count(w) <= 9)
            .map(|w| {
                let label = vowel_count(&w).to_string();
                ICLExample { input: w, label }
            })
            .collect(),
        TaskId::Echo => {
            let mut out: Vec<ICLExample> = letters().map(|c| ICLExample::new(&c.to_string(), &c.to_string())).collect();
            out.extend(builtin_wordlist().into_iter().filter(|w| w.len() > 1).map(|w| ICLExample::new(&w, &w)));
            out
        }
        TaskId::T1 => letters().map(|c| ICLExample::new(&c.to_ascii_uppercase().to_string(), &c.to_string())).collect(),
        TaskId::T2 => letters().map(|c| ICLExample::new(&c.to_string(), &c.to_ascii_uppercase().to_string())).collect(),
        TaskId::T3 | TaskId::T4 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1157);
            let alphabet: Vec<char> = letters().collect();
            let mut seen = std::collections::BTreeSet::new();
            let mut out = Vec::with_capacity(LETTER_LIST_POOL);
            while out.len() < LETTER_LIST_POOL {
                let list: Vec<char> = alphabet.choose_multiple(&mut rng, LETTER_LIST_LEN).copied().collect();
                let input = join(&list);
                if !seen.insert(input.clone()) {
                    continue;
                }
                let pick = if task == TaskId::T3 { list[0] } else { list[LETTER_LIST_LEN - 1] };
                out.push(ICLExample { input, label: pick.to_string() });
            }
            out
        }
        TaskId::T5 | TaskId::T6 => {
            let mut out = Vec::new();
            for a in 0..10u8 {
                for b in 0..10u8 {
                    for c in 0..10u8 {
                        if a == b || b == c || a == c {
                            continue;
                        }
                        let list = [a, b, c];
                        debug_assert_eq!(list.len(), DIGIT_LIST_LEN);
                        let v = if task == TaskId::T5 { list.iter().max() } else { list.iter().min() };
                        out.push(ICLExample { input: join(&list), label: v.expect("non-empty").to_string() });
                    }
                }
            }
            out
        }
        TaskId::T7 => {
            let alphabet: Vec<char> = letters().collect();
            alphabet.windows(4).map(|w| ICLExample { input: join(&w[..3]), label: w[3].to_string() }).collect()
        }
        TaskId::T8 => column_pairs(VERBS, 0, 1),
        TaskId::T9 => column_pairs(VERBS, 0, 2),
        TaskId::T10 => column_pairs(PLURALS, 0, 1),
        TaskId::T11 => column_pairs(ANTONYMS, 0, 1),
        TaskId::T12 => column_pairs(VERBS, 0, 3),
        TaskId::T13 => column_pairs(LANDMARKS, 0, 1),
        TaskId::T14 => column_pairs(COUNTRIES, 0, 2),
        TaskId::T15 => column_pairs(COUNTRIES, 0, 1),
        TaskId::T16 => column_pairs(PEOPLE, 0, 1),
        TaskId::T17 => column_pairs(RELIGION, 0, 1),
        TaskId::T18 => column_pairs(PLACES, 0, 1),
    }
}

/// Every string any task can emit, for building the vocabulary. Letter
/// lists only contain letters and glue commas, so one sample suffices.
pub(super) fn all_texts() -> Vec<String> {
    let mut out = Vec::new();
    for task in TaskId::ALL {
        for e in pool(task, 0) {
            out.push(e.input);
            out.push(e.label);
        }
    }
    out
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
