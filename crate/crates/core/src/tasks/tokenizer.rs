use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLON: &str = ":";
pub const COMMA: &str = ",";
/// A comma glued to its neighbours inside one word, e.g. the list `2,1,5`.
pub const GLUE_COMMA: &str = "<,>";

/// Closed word-level vocabulary.
///
/// Text is split on whitespace; a word containing commas is split into its
/// comma-separated pieces joined by [`GLUE_COMMA`], so `2,1,5` and the
/// prompt separator `,` map to different tokens and decoding restores the
/// original spacing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

impl Tokenizer {
    /// Builds the vocabulary from every word piece in `texts`, plus the
    /// separators and the digits `0`–`9`. Ids are assigned in a fixed order:
    /// separators, digits, then all other pieces sorted.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut rest = BTreeSet::new();
        for t in texts {
            for w in t.split_whitespace() {
                if w == COLON || w == COMMA {
                    continue;
                }
                for piece in w.split(',').filter(|p| !p.is_empty()) {
                    rest.insert(piece.to_string());
                }
            }
        }
        let mut tokens: Vec<String> = [COLON, COMMA, GLUE_COMMA].map(String::from).to_vec();
        let digits: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        for d in &digits {
            rest.remove(d);
        }
        tokens.extend(digits);
        tokens.extend(rest.into_iter().filter(|t| t != GLUE_COMMA));
        Self::from_tokens(tokens).expect("built vocabulary has unique entries")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        if tokens.first().map(String::as_str) != Some(COLON) || !index.contains_key(COMMA) {
            return Err(Error::Format("vocabulary lacks the separators".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| Error::OutOfVocabulary(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or_else(|| Error::OutOfVocabulary(format!("#{id}")))
    }

    pub fn colon(&self) -> usize {
        0
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            if w == COLON || w == COMMA {
                out.push(self.id(w)?);
                continue;
            }
            let glue = self.id(GLUE_COMMA)?;
            for (k, piece) in w.split(',').enumerate() {
                if piece.is_empty() {
                    return Err(Error::OutOfVocabulary(w.to_string()));
                }
                if k > 0 {
                    out.push(glue);
                }
                out.push(self.id(piece)?);
            }
        }
        Ok(out)
    }

    /// Encodes a label, which must be exactly one token.
    pub fn encode_label(&self, label: &str) -> Result<usize> {
        match self.encode(label)?.as_slice() {
            [id] => Ok(*id),
            _ => Err(Error::Precondition(format!("label `{label}` is not a single token"))),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut prev_glue = true;
        for &id in ids {
            let t = self.token(id)?;
            if t == GLUE_COMMA {
                out.push(',');
                prev_glue = true;
                continue;
            }
            if !prev_glue {
                out.push(' ');
            }
            out.push_str(t);
            prev_glue = false;
        }
        Ok(out)
    }
}
