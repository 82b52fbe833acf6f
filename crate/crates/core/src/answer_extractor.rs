//! Matches answerer chats to their most similar document n-gram and keeps
//! the matches whose cosine score reaches the relevance threshold.

use serde::{Deserialize, Serialize};

use crate::corpus::{Chat, Corpus, Document, Role};
use crate::error::{Error, Result};
use crate::nn::{embed, EmbeddingConfig};
use crate::text::TokenSpan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub answer_span: TokenSpan,
    pub dialogue_id: String,
    pub chat_index: usize,
    pub score: f64,
}

impl ExtractedAnswer {
    pub fn document_id(&self) -> &str {
        &self.answer_span.document_id
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchScope {
    /// Only the document the dialogue is attached to.
    #[default]
    AssociatedDocument,
    /// Every document in the corpus.
    AllDocuments,
}

/// Hash buckets of every document token, so span vectors can be built
/// incrementally instead of re-hashing each n-gram.
pub struct DocumentIndex<'a> {
    doc: &'a Document,
    buckets: Vec<(usize, f64)>,
}

impl<'a> DocumentIndex<'a> {
    pub fn new(doc: &'a Document, enc: &EmbeddingConfig) -> Self {
        let buckets = doc
            .tokens
            .iter()
            .map(|t| {
                let e = embed(std::slice::from_ref(t), enc);
                let (i, v) = e
                    .values
                    .iter()
                    .enumerate()
                    .find(|(_, v)| **v != 0.0)
                    .map(|(i, v)| (i, *v))
                    .expect("single token embeds to a signed unit vector");
                (i, v)
            })
            .collect();
        DocumentIndex { doc, buckets }
    }
}

/// Best span in one document: (start, end, score). Spans are visited by start, then length,
/// and only a strictly larger score replaces the incumbent.
fn best_in_document(chat_vec: &[f64], index: &DocumentIndex<'_>, max_n: usize) -> Option<(usize, usize, f64)> {
    let t = index.buckets.len();
    let mut best: Option<(usize, usize, f64)> = None;
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(max_n);
    for start in 0..t {
        entries.clear();
        for end in start..(start + max_n).min(t) {
            let (c, v) = index.buckets[end];
            match entries.binary_search_by_key(&c, |e| e.0) {
                Ok(pos) => entries[pos].1 += v,
                Err(pos) => entries.insert(pos, (c, v)),
            }
            let norm = entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
            let score = if norm == 0.0 {
                0.0
            } else {
                entries.iter().map(|&(c, v)| chat_vec[c] * v).sum::<f64>() / norm
            };
            if best.is_none_or(|b| score > b.2) {
                best = Some((start, end, score));
            }
        }
    }
    best
}

/// Finds the candidate span most similar to an answerer chat.
///
/// `candidates` are searched in order; ties keep the earlier document, then
/// the earlier start, then the shorter span. Returns `Ok(None)` when the
/// chat has no tokens.
pub fn match_answer(
    chat: &Chat,
    candidates: &[DocumentIndex<'_>],
    max_n: usize,
    enc: &EmbeddingConfig,
) -> Result<Option<(TokenSpan, f64)>> {
    if chat.role != Role::Answerer {
        return Err(Error::Precondition("match_answer needs an answerer chat".into()));
    }
    if max_n < 1 {
        return Err(Error::Precondition("n-gram order K must be at least 1".into()));
    }
    if candidates.iter().all(|c| c.doc.tokens.is_empty()) {
        return Err(Error::Precondition("no candidate spans to match against".into()));
    }
    if chat.tokens.is_empty() {
        return Ok(None);
    }
    let chat_vec = embed(&chat.tokens, enc).values;
    let mut best: Option<(TokenSpan, f64)> = None;
    for index in candidates {
        if let Some((s, e, score)) = best_in_document(&chat_vec, index, max_n) {
            if best.as_ref().is_none_or(|b| score > b.1) {
                best = Some((TokenSpan::new(index.doc.id.clone(), s, e), score));
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub answers: Vec<ExtractedAnswer>,
    /// Answerer chats that tokenized to nothing.
    pub empty_chats: usize,
    /// Answerer chats whose best match scored below the threshold.
    pub rejected: usize,
}

impl FilterOutcome {
    pub fn answerer_chats(&self) -> usize {
        self.answers.len() + self.empty_chats + self.rejected
    }
}

/// Runs [`match_answer`] for every answerer chat and keeps scores `>= gamma`.
/// Use `f64::NEG_INFINITY` to keep every match.
pub fn filter_answers(
    corpus: &Corpus,
    max_n: usize,
    gamma: f64,
    enc: &EmbeddingConfig,
    scope: MatchScope,
) -> Result<FilterOutcome> {
    if gamma.is_nan() {
        return Err(Error::Precondition("threshold must not be NaN".into()));
    }
    let indexes: Vec<DocumentIndex<'_>> = corpus.documents.iter().map(|d| DocumentIndex::new(d, enc)).collect();
    let mut out = FilterOutcome::default();
    for dlg in &corpus.dialogues {
        let doc_pos = corpus
            .document_position(&dlg.document_id)
            .ok_or_else(|| Error::Integrity(format!("dialogue {} has no document", dlg.id)))?;
        let candidates = match scope {
            MatchScope::AssociatedDocument => &indexes[doc_pos..=doc_pos],
            MatchScope::AllDocuments => &indexes[..],
        };
        for chat in dlg.chats.iter().filter(|c| c.role == Role::Answerer) {
            match match_answer(chat, candidates, max_n, enc)? {
                None => out.empty_chats += 1,
                Some((span, score)) if score >= gamma => out.answers.push(ExtractedAnswer {
                    answer_span: span,
                    dialogue_id: dlg.id.clone(),
                    chat_index: chat.index,
                    score,
                }),
                Some(_) => out.rejected += 1,
            }
        }
    }
    out.answers
        .sort_by(|a, b| (&a.dialogue_id, a.chat_index).cmp(&(&b.dialogue_id, b.chat_index)));
    Ok(out)
}
