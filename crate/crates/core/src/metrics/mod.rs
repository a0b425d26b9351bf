//! Caption-style evaluation scores over a shared tokenization.

mod bleu;
mod cider;
mod meteor;
mod rouge;

pub use bleu::{bleu4, bleu4_smoothed};
pub use cider::cider_d;
pub use meteor::{meteor_lite, meteor_sentence};
pub use rouge::{lcs_len, rouge_l};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases and splits on anything that is not alphanumeric; punctuation
/// is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        if let Some(i) = items.iter().position(|it| it.references.is_empty()) {
            return Err(Error::Metrics(format!("item {} has no reference", i)));
        }
        Ok(Self { items })
    }

    /// Tokenizes raw candidate and reference strings.
    pub fn from_texts<S: AsRef<str>>(pairs: &[(S, Vec<S>)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(c, refs)| EvalItem { candidate: tokenize(c.as_ref()), references: refs.iter().map(|r| tokenize(r.as_ref())).collect() })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub cider_d: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
}

pub fn score_all(corpus: &EvalCorpus) -> Result<Scores> {
    if corpus.is_empty() {
        return Err(Error::Metrics("empty corpus".into()));
    }
    Ok(Scores { bleu4: bleu4(corpus), cider_d: cider_d(corpus), meteor_lite: meteor_lite(corpus), rouge_l: rouge_l(corpus) })
}

/// n-gram counts of a token list, keyed by the joined n-gram.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> std::collections::HashMap<&[String], usize> {
    let mut m = std::collections::HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}
