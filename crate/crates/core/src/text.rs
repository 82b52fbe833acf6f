//! Tokenization, n-gram candidate spans and the SQuAD-style answer metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive token span inside one document.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub document_id: String,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(document_id: impl Into<String>, start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        TokenSpan {
            document_id: document_id.into(),
            start,
            end,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The covered tokens of `doc_tokens`.
    pub fn slice<'a>(&self, doc_tokens: &'a [String]) -> &'a [String] {
        &doc_tokens[self.start..=self.end]
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '…' | '«' | '»' | '¿' | '¡')
}

/// Lowercases, splits on whitespace and strips punctuation at both ends of each token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|raw| raw.trim_matches(is_punct).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Number of spans [`extract_ngrams`] produces for a `len`-token document.
pub fn ngram_count(len: usize, max_n: usize) -> usize {
    (1..=max_n.min(len)).map(|k| len - k + 1).sum()
}

/// All contiguous spans of length `1..=min(max_n, T)`, ordered by start then length.
pub fn extract_ngrams(document_id: &str, doc_len: usize, max_n: usize) -> Result<Vec<TokenSpan>> {
    if max_n < 1 {
        return Err(Error::Precondition("n-gram order K must be at least 1".into()));
    }
    let mut spans = Vec::with_capacity(ngram_count(doc_len, max_n));
    for start in 0..doc_len {
        for n in 1..=max_n.min(doc_len - start) {
            spans.push(TokenSpan::new(document_id, start, start + n - 1));
        }
    }
    Ok(spans)
}

/// Multiset token F1. Both empty scores 1, exactly one empty scores 0.
pub fn token_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    // 2PR/(P+R) simplifies to 2c/(|pred|+|gold|)
    2.0 * common as f64 / (pred.len() + gold.len()) as f64
}

/// 1 when both strings tokenize to the same sequence.
pub fn exact_match(pred: &str, gold: &str) -> u8 {
    u8::from(tokenize(pred) == tokenize(gold))
}

/// [`exact_match`] for already tokenized inputs.
pub fn exact_match_tokens<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> u8 {
    let same = pred.len() == gold.len()
        && pred.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref());
    u8::from(same)
}
