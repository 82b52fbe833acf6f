//! Documents, dialogues and their ground-truth QA alignment.
//!
//! Also hosts the synthetic generator, the two noise injectors (question
//! shuffling and irrelevant chit-chat) and the line-delimited JSON file format.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Questioner,
    Answerer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chat {
    pub index: usize,
    pub role: Role,
    pub text: String,
    pub tokens: Vec<String>,
    /// Index of the counterpart chat in the hidden QA alignment.
    pub truth_link: Option<usize>,
}

impl Chat {
    pub fn new(index: usize, role: Role, text: impl Into<String>, truth_link: Option<usize>) -> Self {
        let text = text.into();
        Chat {
            index,
            role,
            tokens: tokenize(&text),
            text,
            truth_link,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub document_id: String,
    pub chats: Vec<Chat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Document {
            id: id.into(),
            tokens: tokenize(&text),
            text,
        }
    }
}

/// One hidden question/answer alignment plus the gold answer span (inclusive token offsets).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthPair {
    pub dialogue_id: String,
    pub q_index: usize,
    pub a_index: usize,
    pub span: [usize; 2],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub dialogues: Vec<Dialogue>,
    pub truth_pairs: Vec<TruthPair>,
}

impl Corpus {
    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn document_position(&self, id: &str) -> Option<usize> {
        self.documents.iter().position(|d| d.id == id)
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    pub fn has_truth(&self) -> bool {
        !self.truth_pairs.is_empty()
    }

    pub fn chat_count(&self) -> usize {
        self.dialogues.iter().map(|d| d.chats.len()).sum()
    }

    /// Checks every cross reference and index invariant.
    pub fn validate(&self) -> Result<()> {
        let mut doc_ids = HashSet::new();
        for d in &self.documents {
            if !doc_ids.insert(d.id.as_str()) {
                return Err(Error::Integrity(format!("duplicate document id {}", d.id)));
            }
        }
        let mut dialogues = HashMap::new();
        for dlg in &self.dialogues {
            if !doc_ids.contains(dlg.document_id.as_str()) {
                return Err(Error::Integrity(format!(
                    "dialogue {} references missing document {}",
                    dlg.id, dlg.document_id
                )));
            }
            if dialogues.insert(dlg.id.as_str(), dlg).is_some() {
                return Err(Error::Integrity(format!("duplicate dialogue id {}", dlg.id)));
            }
            for (i, chat) in dlg.chats.iter().enumerate() {
                if chat.index != i {
                    return Err(Error::Integrity(format!(
                        "dialogue {} chat at position {i} has index {}",
                        dlg.id, chat.index
                    )));
                }
                if let Some(link) = chat.truth_link {
                    if link >= dlg.chats.len() {
                        return Err(Error::Integrity(format!(
                            "dialogue {} chat {i} links to missing chat {link}",
                            dlg.id
                        )));
                    }
                }
            }
        }
        for tp in &self.truth_pairs {
            let dlg = dialogues.get(tp.dialogue_id.as_str()).ok_or_else(|| {
                Error::Integrity(format!("truth pair references missing dialogue {}", tp.dialogue_id))
            })?;
            let (q, a) = match (dlg.chats.get(tp.q_index), dlg.chats.get(tp.a_index)) {
                (Some(q), Some(a)) => (q, a),
                _ => {
                    return Err(Error::Integrity(format!(
                        "truth pair ({}, {}) out of range in dialogue {}",
                        tp.q_index, tp.a_index, dlg.id
                    )))
                }
            };
            if q.role != Role::Questioner || a.role != Role::Answerer || tp.q_index >= tp.a_index {
                return Err(Error::Integrity(format!(
                    "truth pair ({}, {}) in dialogue {} is not a question preceding its answer",
                    tp.q_index, tp.a_index, dlg.id
                )));
            }
            let doc_len = self.document(&dlg.document_id).map_or(0, |d| d.tokens.len());
            if tp.span[0] > tp.span[1] || tp.span[1] >= doc_len {
                return Err(Error::Integrity(format!(
                    "truth span {:?} outside document {}",
                    tp.span, dlg.document_id
                )));
            }
        }
        Ok(())
    }

    /// Splits by document: dialogues (and their truth pairs) follow their document.
    /// The first returned corpus holds the remaining `1 - eval_fraction` share.
    pub fn split_by_document(&self, eval_fraction: f64, seed: u64) -> (Corpus, Corpus) {
        let mut ids: Vec<&str> = self.documents.iter().map(|d| d.id.as_str()).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
        let n_eval = ((ids.len() as f64) * eval_fraction).round() as usize;
        let eval_ids: HashSet<&str> = ids[..n_eval.min(ids.len())].iter().copied().collect();

        let mut train = Corpus::default();
        let mut eval = Corpus::default();
        for d in &self.documents {
            let target = if eval_ids.contains(d.id.as_str()) { &mut eval } else { &mut train };
            target.documents.push(d.clone());
        }
        let mut eval_dialogues = HashSet::new();
        for dlg in &self.dialogues {
            if eval_ids.contains(dlg.document_id.as_str()) {
                eval_dialogues.insert(dlg.id.as_str());
                eval.dialogues.push(dlg.clone());
            } else {
                train.dialogues.push(dlg.clone());
            }
        }
        for tp in &self.truth_pairs {
            if eval_dialogues.contains(tp.dialogue_id.as_str()) {
                eval.truth_pairs.push(tp.clone());
            } else {
                train.truth_pairs.push(tp.clone());
            }
        }
        (train, eval)
    }
}

const SPLIT_SALT: u64 = 0x5eed_5e11;

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// How gold answer spans are annotated. The two styles model two domains
/// whose annotators disagree on whether the leading marker token belongs to
/// the answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanStyle {
    /// Content tokens only.
    Bare,
    /// Marker token plus content tokens.
    Marked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_documents: usize,
    pub sentences_per_document: (usize, usize),
    pub vocabulary_size: usize,
    pub qa_pairs_per_dialogue: (usize, usize),
    pub irrelevant_chat_rate: f64,
    /// Probability that an inserted irrelevant chat comes from the questioner.
    pub irrelevant_questioner_share: f64,
    /// Applies [`inject_shuffle_noise`] after generation when set.
    pub shuffle: bool,
    pub shuffle_max_shift: usize,
    pub span_style: SpanStyle,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_documents: 60,
            sentences_per_document: (4, 6),
            vocabulary_size: 4000,
            qa_pairs_per_dialogue: (3, 3),
            irrelevant_chat_rate: 0.0,
            irrelevant_questioner_share: 0.5,
            shuffle: false,
            shuffle_max_shift: 5,
            span_style: SpanStyle::Marked,
            seed: 0,
        }
    }
}

/// Marker tokens open every phrase; content tokens follow them.
pub const MARKER_TOKENS: usize = 6;
const PHRASES_PER_SENTENCE: (usize, usize) = (2, 4);
const CONTENT_PER_PHRASE: (usize, usize) = (1, 3);

/// Joins the parts of a fused question. Never produced by the generator or the tokenizer
/// from document text.
pub const SEPARATOR_TOKEN: &str = "qsep";

const QUESTION_TEMPLATES: &[&str] = &[
    "what is {}?",
    "which {} was mentioned?",
    "tell me about {}?",
    "where does {} appear?",
    "who wrote {}?",
    "how about {}?",
];

/// Answer wrappers, grouped by how many filler tokens they add.
const ANSWER_TEMPLATES: [&[&str]; 3] = [
    &["{}"],
    &["{} indeed", "probably {}", "{} obviously", "surely {}"],
    &["i believe {}", "{} for certain", "definitely {} yes"],
];

const QUESTIONER_FILLERS: &[&str] = &[
    "hello there",
    "hi!",
    "good morning",
    "are you still there?",
    "hmm okay",
    "thanks a lot",
    "sorry, one second",
    "wait",
    "nice",
    "let me think",
];

const ANSWERER_FILLERS: &[&str] = &[
    "sure",
    "you are welcome",
    "one moment please",
    "no problem",
    "happy to help",
    "hello!",
    "okay",
    "anything else?",
];

/// The fixed pool irrelevant chats are drawn from.
pub fn filler_pool(role: Role) -> &'static [&'static str] {
    match role {
        Role::Questioner => QUESTIONER_FILLERS,
        Role::Answerer => ANSWERER_FILLERS,
    }
}

pub fn vocab_token(id: usize) -> String {
    format!("tok{id:04}")
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        let (smin, smax) = self.sentences_per_document;
        let (qmin, qmax) = self.qa_pairs_per_dialogue;
        if smin == 0 || smin > smax {
            return bad("sentences_per_document must be a non-empty range starting at 1 or more");
        }
        if qmin > qmax {
            return bad("qa_pairs_per_dialogue range is inverted");
        }
        if !(0.0..=1.0).contains(&self.irrelevant_chat_rate) {
            return bad("irrelevant_chat_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.irrelevant_questioner_share) {
            return bad("irrelevant_questioner_share must lie in [0, 1]");
        }
        if self.shuffle_max_shift < 1 {
            return bad("shuffle_max_shift must be at least 1");
        }
        // Every dialogue needs distinct phrases; the smallest document has
        // at least PHRASES_PER_SENTENCE.0 per sentence.
        if qmax > smin * PHRASES_PER_SENTENCE.0 {
            return bad("qa_pairs_per_dialogue exceeds the phrase count of the shortest document");
        }
        let content_needed = smax * PHRASES_PER_SENTENCE.1 * CONTENT_PER_PHRASE.1;
        if self.vocabulary_size < MARKER_TOKENS + content_needed {
            return Err(Error::Config(format!(
                "vocabulary_size must be at least {}",
                MARKER_TOKENS + content_needed
            )));
        }
        if self.vocabulary_size > 10_000 {
            return bad("vocabulary_size is limited to 10000 four-digit tokens");
        }
        Ok(())
    }
}

struct Phrase {
    start: usize,
    marker: String,
    content: Vec<String>,
}

fn generate_document(id: String, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Document, Vec<Phrase>) {
    let n_sent = rng.gen_range(cfg.sentences_per_document.0..=cfg.sentences_per_document.1);
    let mut next_content = rand::seq::index::sample(
        rng,
        cfg.vocabulary_size - MARKER_TOKENS,
        n_sent * PHRASES_PER_SENTENCE.1 * CONTENT_PER_PHRASE.1,
    )
    .into_iter()
    .map(|i| i + MARKER_TOKENS);

    let mut sentences = Vec::with_capacity(n_sent);
    let mut phrases = Vec::new();
    let mut pos = 0;
    for _ in 0..n_sent {
        let mut words: Vec<String> = Vec::new();
        for _ in 0..rng.gen_range(PHRASES_PER_SENTENCE.0..=PHRASES_PER_SENTENCE.1) {
            let marker = vocab_token(rng.gen_range(0..MARKER_TOKENS));
            let n_content = rng.gen_range(CONTENT_PER_PHRASE.0..=CONTENT_PER_PHRASE.1);
            let content: Vec<String> = (0..n_content)
                .map(|_| vocab_token(next_content.next().expect("validated vocabulary size")))
                .collect();
            phrases.push(Phrase {
                start: pos,
                marker: marker.clone(),
                content: content.clone(),
            });
            pos += 1 + n_content;
            words.push(marker);
            words.extend(content);
        }
        let mut sentence = words.join(" ");
        sentence.push('.');
        sentences.push(capitalize(&sentence));
    }
    (Document::new(id, sentences.join(" ")), phrases)
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn render(template: &str, fill: &str) -> String {
    template.replacen("{}", fill, 1)
}

/// Builds a clean corpus: one dialogue per document with strictly
/// alternating question/answer rounds, then applies the configured noise.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = Corpus::default();
    for d in 0..cfg.num_documents {
        let doc_id = format!("doc-{d:04}");
        let dlg_id = format!("dlg-{d:04}");
        let (doc, phrases) = generate_document(doc_id.clone(), cfg, &mut rng);
        let n_pairs = rng.gen_range(cfg.qa_pairs_per_dialogue.0..=cfg.qa_pairs_per_dialogue.1);
        let chosen: Vec<&Phrase> = phrases.choose_multiple(&mut rng, n_pairs).collect();

        let mut chats = Vec::with_capacity(2 * n_pairs);
        for phrase in chosen {
            let q_index = chats.len();
            let a_index = q_index + 1;
            let content = phrase.content.join(" ");
            let question = render(QUESTION_TEMPLATES.choose(&mut rng).unwrap(), &content);
            let (span_text, span) = match cfg.span_style {
                SpanStyle::Bare => (content.clone(), [phrase.start + 1, phrase.start + phrase.content.len()]),
                SpanStyle::Marked => (
                    format!("{} {}", phrase.marker, content),
                    [phrase.start, phrase.start + phrase.content.len()],
                ),
            };
            // keep answer-to-span cosine comfortably above typical thresholds
            let n_span = span[1] - span[0] + 1;
            let max_filler = (n_span / 2).min(2);
            let group = ANSWER_TEMPLATES[rng.gen_range(0..=max_filler)];
            let answer = render(group.choose(&mut rng).unwrap(), &span_text);

            chats.push(Chat::new(q_index, Role::Questioner, question, Some(a_index)));
            chats.push(Chat::new(a_index, Role::Answerer, answer, Some(q_index)));
            corpus.truth_pairs.push(TruthPair {
                dialogue_id: dlg_id.clone(),
                q_index,
                a_index,
                span,
            });
        }
        corpus.documents.push(doc);
        corpus.dialogues.push(Dialogue {
            id: dlg_id,
            document_id: doc_id,
            chats,
        });
    }
    if cfg.shuffle {
        corpus = inject_shuffle_noise(&corpus, cfg.shuffle_max_shift, cfg.seed ^ 0x5bff1e)?;
    }
    if cfg.irrelevant_chat_rate > 0.0 {
        corpus = inject_irrelevant_chats_with_share(
            &corpus,
            cfg.irrelevant_chat_rate,
            cfg.irrelevant_questioner_share,
            cfg.seed ^ 0xf111e4,
        )?;
    }
    Ok(corpus)
}

/// Reassembles a dialogue from chats listed in their new order, rewriting
/// indices, truth links and truth pairs by identity (old index -> new index).
fn reorder_dialogue(dlg: &Dialogue, order: Vec<Chat>, old_to_new: &HashMap<usize, usize>) -> Dialogue {
    let chats = order
        .into_iter()
        .enumerate()
        .map(|(new_index, mut chat)| {
            chat.index = new_index;
            chat.truth_link = chat.truth_link.map(|l| old_to_new[&l]);
            chat
        })
        .collect();
    Dialogue {
        id: dlg.id.clone(),
        document_id: dlg.document_id.clone(),
        chats,
    }
}

fn remap_truth(corpus: &Corpus, maps: &HashMap<&str, HashMap<usize, usize>>) -> Vec<TruthPair> {
    corpus
        .truth_pairs
        .iter()
        .map(|tp| {
            let m = &maps[tp.dialogue_id.as_str()];
            TruthPair {
                q_index: m[&tp.q_index],
                a_index: m[&tp.a_index],
                ..tp.clone()
            }
        })
        .collect()
}

/// Relocates one question chat according to a fixed shift.
/// `shifts[k]` is the shift drawn for the k-th questioner chat (in original order).
pub fn shuffle_dialogue(dlg: &Dialogue, shifts: &[usize]) -> (Dialogue, HashMap<usize, usize>) {
    // Work on original indices; the k-th question is moved in original order.
    let mut order: Vec<usize> = (0..dlg.chats.len()).collect();
    let questions: Vec<usize> = dlg
        .chats
        .iter()
        .filter(|c| c.role == Role::Questioner)
        .map(|c| c.index)
        .collect();
    for (k, &q) in questions.iter().enumerate() {
        let shift = shifts.get(k).copied().unwrap_or(0);
        let pos = order.iter().position(|&i| i == q).expect("question present");
        let new_pos = pos.saturating_sub(shift);
        let moved = order.remove(pos);
        order.insert(new_pos, moved);
    }
    let old_to_new: HashMap<usize, usize> = order.iter().enumerate().map(|(n, &o)| (o, n)).collect();
    let chats = order.iter().map(|&o| dlg.chats[o].clone()).collect();
    (reorder_dialogue(dlg, chats, &old_to_new), old_to_new)
}

/// Moves every question chat `s ~ U{1..max_shift}` positions earlier,
/// clamped at the start of its dialogue.
pub fn inject_shuffle_noise(corpus: &Corpus, max_shift: usize, seed: u64) -> Result<Corpus> {
    if max_shift < 1 {
        return Err(Error::Precondition("max_shift must be at least 1".into()));
    }
    if !corpus.has_truth() && !corpus.dialogues.is_empty() {
        return Err(Error::Precondition(
            "shuffle noise needs ground-truth pairs to keep the alignment".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = HashMap::new();
    let mut dialogues = Vec::with_capacity(corpus.dialogues.len());
    for dlg in &corpus.dialogues {
        let n_q = dlg.chats.iter().filter(|c| c.role == Role::Questioner).count();
        let shifts: Vec<usize> = (0..n_q).map(|_| rng.gen_range(1..=max_shift)).collect();
        let (shuffled, map) = shuffle_dialogue(dlg, &shifts);
        maps.insert(dlg.id.as_str(), map);
        dialogues.push(shuffled);
    }
    Ok(Corpus {
        documents: corpus.documents.clone(),
        truth_pairs: remap_truth(corpus, &maps),
        dialogues,
    })
}

/// Inserts greeting and filler chats. Before each existing chat a
/// geometric number of fillers (continuation probability `rate`) is
/// inserted, so fillers make up `rate` of the final chat count in expectation.
pub fn inject_irrelevant_chats(corpus: &Corpus, rate: f64, seed: u64) -> Result<Corpus> {
    inject_irrelevant_chats_with_share(corpus, rate, 0.5, seed)
}

const MAX_FILLERS_PER_GAP: usize = 64;

pub fn inject_irrelevant_chats_with_share(
    corpus: &Corpus,
    rate: f64,
    questioner_share: f64,
    seed: u64,
) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&rate) || !(0.0..=1.0).contains(&questioner_share) {
        return Err(Error::Precondition("rates must lie in [0, 1]".into()));
    }
    if rate == 0.0 {
        return Ok(corpus.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = HashMap::new();
    let mut dialogues = Vec::with_capacity(corpus.dialogues.len());
    for dlg in &corpus.dialogues {
        let mut order = Vec::new();
        let mut old_to_new = HashMap::new();
        for chat in &dlg.chats {
            let mut inserted = 0;
            while inserted < MAX_FILLERS_PER_GAP && rng.gen_bool(rate) {
                let role = if rng.gen_bool(questioner_share) {
                    Role::Questioner
                } else {
                    Role::Answerer
                };
                let text = *filler_pool(role).choose(&mut rng).unwrap();
                order.push(Chat::new(usize::MAX, role, text, None));
                inserted += 1;
            }
            old_to_new.insert(chat.index, order.len());
            order.push(chat.clone());
        }
        let dialogue = reorder_dialogue(dlg, order, &old_to_new);
        maps.insert(dlg.id.as_str(), old_to_new);
        dialogues.push(dialogue);
    }
    Ok(Corpus {
        documents: corpus.documents.clone(),
        truth_pairs: remap_truth(corpus, &maps),
        dialogues,
    })
}

// ---------------------------------------------------------------------------
// Line format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ChatRecord {
    index: usize,
    role: Role,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth_link: Option<usize>,
}

/// One line of a corpus file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Document {
        id: String,
        text: String,
    },
    Dialogue {
        id: String,
        document_id: String,
        chats: Vec<ChatRecord>,
    },
    Truth(TruthPair),
    /// Artifacts from pair construction may share the file; they are not part of the corpus.
    Answer(serde_json::Value),
    PseudoPair(serde_json::Value),
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(corpus, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus_to<W: Write>(corpus: &Corpus, w: &mut W) -> std::io::Result<()> {
    let mut emit = |r: &Record| -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")
    };
    for d in &corpus.documents {
        emit(&Record::Document {
            id: d.id.clone(),
            text: d.text.clone(),
        })?;
    }
    for dlg in &corpus.dialogues {
        emit(&Record::Dialogue {
            id: dlg.id.clone(),
            document_id: dlg.document_id.clone(),
            chats: dlg
                .chats
                .iter()
                .map(|c| ChatRecord {
                    index: c.index,
                    role: c.role,
                    text: c.text.clone(),
                    truth_link: c.truth_link,
                })
                .collect(),
        })?;
    }
    for tp in &corpus.truth_pairs {
        emit(&Record::Truth(tp.clone()))?;
    }
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_corpus_from<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match record {
            Record::Document { id, text } => corpus.documents.push(Document::new(id, text)),
            Record::Dialogue {
                id,
                document_id,
                chats,
            } => {
                let mut chats: Vec<Chat> = chats
                    .into_iter()
                    .map(|c| Chat::new(c.index, c.role, c.text, c.truth_link))
                    .collect();
                chats.sort_by_key(|c| c.index);
                corpus.dialogues.push(Dialogue {
                    id,
                    document_id,
                    chats,
                });
            }
            Record::Truth(tp) => corpus.truth_pairs.push(tp),
            Record::Answer(_) | Record::PseudoPair(_) => {}
        }
    }
    corpus.validate()?;
    Ok(corpus)
}

/// Appends arbitrary serializable records tagged with `kind` to a line file.
pub fn write_tagged_records<T: Serialize, W: Write>(kind: &str, items: &[T], w: &mut W) -> Result<()> {
    for item in items {
        let mut value = serde_json::to_value(item).map_err(|e| Error::Integrity(e.to_string()))?;
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("kind".into(), serde_json::Value::String(kind.into()));
            }
            None => return Err(Error::Integrity(format!("{kind} record is not an object"))),
        }
        serde_json::to_writer(&mut *w, &value).map_err(|e| Error::Integrity(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}
