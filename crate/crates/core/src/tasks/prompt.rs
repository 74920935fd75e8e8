use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ICLExample, Tokenizer, COLON, COMMA};
use crate::error::{Error, Result};
use crate::model::TrainSequence;

/// An n-shot prompt `x1 : y1 , … , xn : yn , q :` with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub examples: Vec<ICLExample>,
    pub query: String,
    pub gold: String,
}

/// A prompt in token ids. The answer is predicted from the last position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPrompt {
    pub tokens: Vec<usize>,
    /// Index of the answer token, one past the final `:`.
    pub answer_pos: usize,
    pub gold: usize,
    /// The in-context labels S_p, in order, duplicates kept.
    pub context_labels: Vec<usize>,
}

impl Prompt {
    pub fn shots(&self) -> usize {
        self.examples.len()
    }

    /// S_p: the demonstration labels in order.
    pub fn context_labels(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn text(&self) -> String {
        prompt_text(&self.examples, &self.query)
    }

    pub fn encode(&self, tok: &Tokenizer, max_context: usize) -> Result<EncodedPrompt> {
        let (tokens, answer_pos) = build_prompt(tok, &self.examples, &self.query, max_context)?;
        let context_labels = self.examples.iter().map(|e| tok.encode_label(&e.label)).collect::<Result<_>>()?;
        Ok(EncodedPrompt { tokens, answer_pos, gold: tok.encode_label(&self.gold)?, context_labels })
    }

    /// The prompt followed by its gold answer, supervised at every label.
    pub fn training_sequence(&self, tok: &Tokenizer, max_context: usize) -> Result<TrainSequence> {
        let enc = self.encode(tok, max_context)?;
        let mut tokens = enc.tokens;
        tokens.push(enc.gold);
        let colon = tok.colon();
        let targets = tokens
            .iter()
            .enumerate()
            .filter(|&(i, &t)| t == colon && i + 1 < tokens.len())
            .map(|(i, _)| (i, tokens[i + 1]))
            .collect();
        tokens.pop();
        Ok(TrainSequence { tokens, targets })
    }
}

fn prompt_text(examples: &[ICLExample], query: &str) -> String {
    let mut parts: Vec<String> = examples.iter().map(|e| format!("{} {COLON} {}", e.input, e.label)).collect();
    parts.push(format!("{query} {COLON}"));
    parts.join(&format!(" {COMMA} "))
}

/// Tokenizes `x1 : y1 , … , q :`. The answer position is the index just
/// past the final `:`, i.e. the length of the returned sequence.
pub fn build_prompt(
    tok: &Tokenizer,
    examples: &[ICLExample],
    query: &str,
    max_context: usize,
) -> Result<(Vec<usize>, usize)> {
    let tokens = tok.encode(&prompt_text(examples, query))?;
    if tokens.len() > max_context {
        return Err(Error::ContextOverflow { len: tokens.len(), max: max_context });
    }
    let pos = tokens.len();
    Ok((tokens, pos))
}

/// How demonstrations are drawn for a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DemoSampling {
    /// Uniformly without replacement.
    Uniform,
    /// Demos carry at most `max_distinct` labels; the gold label is among
    /// them with probability `p_gold_in_context`.
    LowDiversity { max_distinct: usize, p_gold_in_context: f64 },
}

/// Samples `n` prompts with `shots` demonstrations each. Queries come from
/// `queries` in a seeded order (cycling if `n` exceeds it); demonstrations
/// come from `demos` and never repeat the query input.
pub fn sample_prompts(
    demos: &[ICLExample],
    queries: &[ICLExample],
    shots: usize,
    n: usize,
    seed: u64,
    sampling: DemoSampling,
) -> Result<Vec<Prompt>> {
    if queries.is_empty() {
        return Err(Error::Empty("query pool".into()));
    }
    if shots > 0 && demos.len() <= shots {
        return Err(Error::Precondition(format!("{} demonstrations cannot supply {shots} shots", demos.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng);
    let mut by_label: BTreeMap<&str, Vec<&ICLExample>> = BTreeMap::new();
    for d in demos {
        by_label.entry(d.label.as_str()).or_default().push(d);
    }
    let labels: Vec<&str> = by_label.keys().copied().collect();

    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 && k % order.len() == 0 {
            order.shuffle(&mut rng);
        }
        let q = &queries[order[k % order.len()]];
        let examples = match sampling {
            DemoSampling::Uniform => {
                let candidates: Vec<&ICLExample> = demos.iter().filter(|d| d.input != q.input).collect();
                candidates.choose_multiple(&mut rng, shots).map(|&d| d.clone()).collect()
            }
            DemoSampling::LowDiversity { max_distinct, p_gold_in_context } => {
                if max_distinct == 0 {
                    return Err(Error::Config("max_distinct must be positive".into()));
                }
                low_diversity(&mut rng, &by_label, &labels, q, shots, max_distinct, p_gold_in_context)
            }
        };
        out.push(Prompt { examples, query: q.input.clone(), gold: q.label.clone() });
    }
    Ok(out)
}

fn low_diversity(
    rng: &mut ChaCha8Rng,
    by_label: &BTreeMap<&str, Vec<&ICLExample>>,
    labels: &[&str],
    q: &ICLExample,
    shots: usize,
    max_distinct: usize,
    p_gold: f64,
) -> Vec<ICLExample> {
    let usable = |l: &str| by_label.get(l).is_some_and(|g| g.iter().any(|d| d.input != q.input));
    let want_gold = rng.random::<f64>() < p_gold && usable(&q.label);
    let others: Vec<&str> = labels.iter().copied().filter(|&l| l != q.label && usable(l)).collect();
    let mut chosen: Vec<&str> = Vec::with_capacity(max_distinct);
    if want_gold {
        chosen.push(q.label.as_str());
    }
    let room = max_distinct.saturating_sub(chosen.len());
    chosen.extend(others.choose_multiple(rng, room).copied());
    if chosen.is_empty() {
        chosen.push(q.label.as_str());
    }

    let pick = |rng: &mut ChaCha8Rng, label: &str| -> ICLExample {
        let group: Vec<&&ICLExample> = by_label[label].iter().filter(|d| d.input != q.input).collect();
        (**group.choose(rng).expect("usable label")).clone()
    };
    let mut out = Vec::with_capacity(shots);
    if want_gold && shots > 0 {
        out.push(pick(rng, chosen[0]));
    }
    while out.len() < shots {
        let l = *chosen.choose(rng).expect("non-empty");
        out.push(pick(rng, l));
    }
    out.shuffle(rng);
    out
}
