//! C ABI over the rmrc corpus tools, answer metrics and reader inference.
//!
//! Every fallible function returns an [`RmrcStatus`]. On failure the message is kept in a
//! thread-local slot readable through [`rmrc_last_error`]. Handles are opaque and must be
//! released with their matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rmrc::corpus::{
    generate_corpus, inject_shuffle_noise, read_corpus, write_corpus, Corpus, Document, GeneratorConfig, SpanStyle,
};
use rmrc::mrc::{predict, Decoding, DocumentFeatures, MrcParams};
use rmrc::nn::Checkpoint;
use rmrc::text::{exact_match, token_f1, tokenize};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RmrcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Precondition = 4,
    Parse = 5,
    Integrity = 6,
    Io = 7,
    Numerical = 8,
    Panic = 9,
}

/// `span_style` value: gold spans cover content tokens only.
pub const RMRC_SPAN_BARE: u32 = 0;
/// `span_style` value: gold spans include the leading marker token.
pub const RMRC_SPAN_MARKED: u32 = 1;

/// Generator settings; fill with [`rmrc_generator_config_default`] before editing.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct RmrcGeneratorConfig {
    pub num_documents: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    pub vocabulary_size: usize,
    pub qa_min: usize,
    pub qa_max: usize,
    pub irrelevant_chat_rate: f64,
    pub irrelevant_questioner_share: f64,
    pub shuffle: bool,
    pub shuffle_max_shift: usize,
    /// [`RMRC_SPAN_BARE`] or [`RMRC_SPAN_MARKED`].
    pub span_style: u32,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RmrcCorpusCounts {
    pub documents: usize,
    pub dialogues: usize,
    pub chats: usize,
    pub truth_pairs: usize,
}

/// Inclusive token offsets of a predicted answer and its confidence `P^s[s] * P^e[e]`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RmrcPrediction {
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// Opaque corpus handle.
pub struct RmrcCorpus {
    inner: Corpus,
}

/// Opaque reader handle.
pub struct RmrcReader {
    params: MrcParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(rmrc::Error),
}

impl From<rmrc::Error> for Failure {
    fn from(e: rmrc::Error) -> Self {
        Failure::Core(e)
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RmrcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RmrcStatus::Ok,
        Ok(Err(Failure::Null(arg))) => {
            set_error(format!("argument {arg} is null"));
            RmrcStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(arg))) => {
            set_error(format!("argument {arg} is not valid UTF-8"));
            RmrcStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            let status = match &e {
                rmrc::Error::Config(_) => RmrcStatus::Config,
                rmrc::Error::Precondition(_) => RmrcStatus::Precondition,
                rmrc::Error::Parse { .. } => RmrcStatus::Parse,
                rmrc::Error::Integrity(_) => RmrcStatus::Integrity,
                rmrc::Error::Io { .. } => RmrcStatus::Io,
                rmrc::Error::Numerical(_) => RmrcStatus::Numerical,
            };
            set_error(e.to_string());
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RmrcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

/// Message of the last failed call on this thread, or null when none. The pointer stays
/// valid until the next failing call or [`rmrc_clear_error`] on the same thread.
#[no_mangle]
pub extern "C" fn rmrc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn rmrc_clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rmrc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn to_c_config(cfg: &GeneratorConfig) -> RmrcGeneratorConfig {
    RmrcGeneratorConfig {
        num_documents: cfg.num_documents,
        sentences_min: cfg.sentences_per_document.0,
        sentences_max: cfg.sentences_per_document.1,
        vocabulary_size: cfg.vocabulary_size,
        qa_min: cfg.qa_pairs_per_dialogue.0,
        qa_max: cfg.qa_pairs_per_dialogue.1,
        irrelevant_chat_rate: cfg.irrelevant_chat_rate,
        irrelevant_questioner_share: cfg.irrelevant_questioner_share,
        shuffle: cfg.shuffle,
        shuffle_max_shift: cfg.shuffle_max_shift,
        span_style: match cfg.span_style {
            SpanStyle::Bare => RMRC_SPAN_BARE,
            SpanStyle::Marked => RMRC_SPAN_MARKED,
        },
        seed: cfg.seed,
    }
}

fn from_c_config(c: &RmrcGeneratorConfig) -> rmrc::Result<GeneratorConfig> {
    let span_style = match c.span_style {
        RMRC_SPAN_BARE => SpanStyle::Bare,
        RMRC_SPAN_MARKED => SpanStyle::Marked,
        other => return Err(rmrc::Error::Config(format!("unknown span style {other}"))),
    };
    Ok(GeneratorConfig {
        num_documents: c.num_documents,
        sentences_per_document: (c.sentences_min, c.sentences_max),
        vocabulary_size: c.vocabulary_size,
        qa_pairs_per_dialogue: (c.qa_min, c.qa_max),
        irrelevant_chat_rate: c.irrelevant_chat_rate,
        irrelevant_questioner_share: c.irrelevant_questioner_share,
        shuffle: c.shuffle,
        shuffle_max_shift: c.shuffle_max_shift,
        span_style,
        seed: c.seed,
    })
}

/// Writes the default generator settings to `out`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `RmrcGeneratorConfig`.
#[no_mangle]
pub unsafe extern "C" fn rmrc_generator_config_default(out: *mut RmrcGeneratorConfig) -> RmrcStatus {
    guard(|| {
        *out_arg(out, "out")? = to_c_config(&GeneratorConfig::default());
        Ok(())
    })
}

fn boxed_corpus(out: &mut *mut RmrcCorpus, inner: Corpus) {
    *out = Box::into_raw(Box::new(RmrcCorpus { inner }));
}

/// Generates a synthetic corpus. On success `*out` owns a new handle.
///
/// # Safety
/// `config` must be null or valid; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_corpus_generate(
    config: *const RmrcGeneratorConfig,
    out: *mut *mut RmrcCorpus,
) -> RmrcStatus {
    guard(|| {
        let cfg = from_c_config(ref_arg(config, "config")?)?;
        let out = out_arg(out, "out")?;
        boxed_corpus(out, generate_corpus(&cfg)?);
        Ok(())
    })
}

/// Reads a corpus JSON Lines file.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_corpus_read(path: *const c_char, out: *mut *mut RmrcCorpus) -> RmrcStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        boxed_corpus(out, read_corpus(path)?);
        Ok(())
    })
}

/// Writes a corpus as JSON Lines.
///
/// # Safety
/// `corpus` must be null or a live handle; `path` must be null or a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rmrc_corpus_write(corpus: *const RmrcCorpus, path: *const c_char) -> RmrcStatus {
    guard(|| {
        let corpus = ref_arg(corpus, "corpus")?;
        write_corpus(&corpus.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_corpus_counts(corpus: *const RmrcCorpus, out: *mut RmrcCorpusCounts) -> RmrcStatus {
    guard(|| {
        let c = &ref_arg(corpus, "corpus")?.inner;
        *out_arg(out, "out")? = RmrcCorpusCounts {
            documents: c.documents.len(),
            dialogues: c.dialogues.len(),
            chats: c.chat_count(),
            truth_pairs: c.truth_pairs.len(),
        };
        Ok(())
    })
}

/// Returns a new corpus with each chat moved down by up to `max_shift` positions.
///
/// # Safety
/// `corpus` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_corpus_shuffle(
    corpus: *const RmrcCorpus,
    max_shift: usize,
    seed: u64,
    out: *mut *mut RmrcCorpus,
) -> RmrcStatus {
    guard(|| {
        let c = &ref_arg(corpus, "corpus")?.inner;
        let out = out_arg(out, "out")?;
        boxed_corpus(out, inject_shuffle_noise(c, max_shift, seed)?);
        Ok(())
    })
}

/// Releases a corpus handle. Null is ignored.
///
/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmrc_corpus_free(corpus: *mut RmrcCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads a reader checkpoint.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_reader_load(path: *const c_char, out: *mut *mut RmrcReader) -> RmrcStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let params = MrcParams::from_checkpoint(&Checkpoint::read(path)?)?;
        *out = Box::into_raw(Box::new(RmrcReader { params }));
        Ok(())
    })
}

/// Predicts the answer span of `question` in `document` over spans of at most `max_len`
/// tokens. Offsets index the tokenized document.
///
/// # Safety
/// `reader` must be null or a live handle; strings must be null or NUL-terminated;
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_reader_predict(
    reader: *const RmrcReader,
    document: *const c_char,
    question: *const c_char,
    max_len: usize,
    out: *mut RmrcPrediction,
) -> RmrcStatus {
    guard(|| {
        let params = &ref_arg(reader, "reader")?.params;
        let doc = Document::new("input", str_arg(document, "document")?);
        let question = tokenize(str_arg(question, "question")?);
        let out = out_arg(out, "out")?;
        let input = DocumentFeatures::new(&doc, &params.enc)?.with_question(&question, &params.enc);
        let (span, confidence) = predict(params, &input, max_len, Decoding::Constrained)?;
        let span = span.ok_or_else(|| rmrc::Error::Precondition("reader produced no span".into()))?;
        *out = RmrcPrediction {
            start: span.start,
            end: span.end,
            confidence,
        };
        Ok(())
    })
}

/// Releases a reader handle. Null is ignored.
///
/// # Safety
/// `reader` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rmrc_reader_free(reader: *mut RmrcReader) {
    if !reader.is_null() {
        drop(Box::from_raw(reader));
    }
}

/// Token-level F1 between two answer strings, in `[0, 1]`.
///
/// # Safety
/// Strings must be null or NUL-terminated; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_token_f1(pred: *const c_char, gold: *const c_char, out: *mut f64) -> RmrcStatus {
    guard(|| {
        let (p, g) = (tokenize(str_arg(pred, "pred")?), tokenize(str_arg(gold, "gold")?));
        *out_arg(out, "out")? = token_f1(&p, &g);
        Ok(())
    })
}

/// Writes 1 when both strings tokenize identically, else 0.
///
/// # Safety
/// Strings must be null or NUL-terminated; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn rmrc_exact_match(pred: *const c_char, gold: *const c_char, out: *mut u8) -> RmrcStatus {
    guard(|| {
        let (p, g) = (str_arg(pred, "pred")?, str_arg(gold, "gold")?);
        *out_arg(out, "out")? = exact_match(p, g);
        Ok(())
    })
}
