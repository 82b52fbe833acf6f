use std::ffi::{CStr, CString};
use std::ptr;

use rmrc::corpus::{generate_corpus, read_corpus, GeneratorConfig, SpanStyle};
use rmrc::trainer::{pretrain_mrc, TrainConfig};
use rmrc_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = rmrc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

fn small_config() -> RmrcGeneratorConfig {
    let mut cfg = std::mem::MaybeUninit::<RmrcGeneratorConfig>::uninit();
    assert_eq!(unsafe { rmrc_generator_config_default(cfg.as_mut_ptr()) }, RmrcStatus::Ok);
    let mut cfg = unsafe { cfg.assume_init() };
    cfg.num_documents = 6;
    cfg.seed = 11;
    cfg
}

#[test]
fn generate_write_read_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("c.jsonl").to_str().unwrap());
    let cfg = small_config();

    let mut corpus = ptr::null_mut();
    assert_eq!(unsafe { rmrc_corpus_generate(&cfg, &mut corpus) }, RmrcStatus::Ok);
    let mut counts = RmrcCorpusCounts::default();
    assert_eq!(unsafe { rmrc_corpus_counts(corpus, &mut counts) }, RmrcStatus::Ok);
    assert_eq!(counts.documents, 6);
    assert_eq!(counts.dialogues, 6);
    assert_eq!(counts.truth_pairs, 18);
    assert_eq!(counts.chats, 36);

    assert_eq!(unsafe { rmrc_corpus_write(corpus, path.as_ptr()) }, RmrcStatus::Ok);
    let mut reread = ptr::null_mut();
    assert_eq!(unsafe { rmrc_corpus_read(path.as_ptr(), &mut reread) }, RmrcStatus::Ok);
    let mut counts2 = RmrcCorpusCounts::default();
    assert_eq!(unsafe { rmrc_corpus_counts(reread, &mut counts2) }, RmrcStatus::Ok);
    assert_eq!(counts, counts2);

    let native = generate_corpus(&GeneratorConfig {
        num_documents: 6,
        seed: 11,
        ..GeneratorConfig::default()
    })
    .unwrap();
    assert_eq!(read_corpus(path.to_str().unwrap()).unwrap(), native);

    unsafe {
        rmrc_corpus_free(corpus);
        rmrc_corpus_free(reread);
    }
}

#[test]
fn shuffle_keeps_counts() {
    let cfg = small_config();
    let mut corpus = ptr::null_mut();
    assert_eq!(unsafe { rmrc_corpus_generate(&cfg, &mut corpus) }, RmrcStatus::Ok);
    let mut shuffled = ptr::null_mut();
    assert_eq!(unsafe { rmrc_corpus_shuffle(corpus, 3, 5, &mut shuffled) }, RmrcStatus::Ok);
    let (mut a, mut b) = (RmrcCorpusCounts::default(), RmrcCorpusCounts::default());
    unsafe {
        rmrc_corpus_counts(corpus, &mut a);
        rmrc_corpus_counts(shuffled, &mut b);
        rmrc_corpus_free(corpus);
        rmrc_corpus_free(shuffled);
    }
    assert_eq!(a, b);
}

#[test]
fn invalid_config_reports_error() {
    let mut cfg = small_config();
    cfg.irrelevant_chat_rate = 1.5;
    let mut corpus = ptr::null_mut();
    assert_eq!(unsafe { rmrc_corpus_generate(&cfg, &mut corpus) }, RmrcStatus::Config);
    assert!(corpus.is_null());
    assert!(last_error().contains("invalid configuration"));

    cfg.irrelevant_chat_rate = 0.0;
    cfg.span_style = 7;
    assert_eq!(unsafe { rmrc_corpus_generate(&cfg, &mut corpus) }, RmrcStatus::Config);
    assert!(last_error().contains("span style"));

    rmrc_clear_error();
    assert!(rmrc_last_error().is_null());
}

#[test]
fn null_and_utf8_arguments_are_rejected() {
    let mut out = 0.0;
    assert_eq!(unsafe { rmrc_token_f1(ptr::null(), c("a").as_ptr(), &mut out) }, RmrcStatus::NullArgument);
    assert!(last_error().contains("pred"));
    let bad = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { rmrc_token_f1(bad.as_ptr().cast(), c("a").as_ptr(), &mut out) },
        RmrcStatus::InvalidUtf8
    );
    assert_eq!(unsafe { rmrc_corpus_counts(ptr::null(), ptr::null_mut()) }, RmrcStatus::NullArgument);
    unsafe {
        rmrc_corpus_free(ptr::null_mut());
        rmrc_reader_free(ptr::null_mut());
    }
}

#[test]
fn missing_files_report_io() {
    let mut corpus = ptr::null_mut();
    let path = c("/nonexistent/dir/corpus.jsonl");
    assert_eq!(unsafe { rmrc_corpus_read(path.as_ptr(), &mut corpus) }, RmrcStatus::Io);
    let mut reader = ptr::null_mut();
    assert_eq!(unsafe { rmrc_reader_load(path.as_ptr(), &mut reader) }, RmrcStatus::Io);
    assert!(reader.is_null());
}

#[test]
fn metrics_match_reference_values() {
    let mut f1 = 0.0;
    let mut em = 0u8;
    unsafe {
        assert_eq!(rmrc_token_f1(c("the cat sat").as_ptr(), c("cat sat down").as_ptr(), &mut f1), RmrcStatus::Ok);
        assert_eq!(rmrc_exact_match(c("Cat, sat!").as_ptr(), c("cat sat").as_ptr(), &mut em), RmrcStatus::Ok);
    }
    assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(em, 1);
}

#[test]
fn reader_predicts_like_native_code() {
    let dir = tempfile::tempdir().unwrap();
    let source = generate_corpus(&GeneratorConfig {
        num_documents: 10,
        span_style: SpanStyle::Bare,
        seed: 3,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 2,
        ..TrainConfig::benchmark()
    };
    let params = pretrain_mrc(&source, &cfg).unwrap().params;
    let ck_path = dir.path().join("mrc.ckpt");
    params.to_checkpoint().write(&ck_path).unwrap();

    let mut reader = ptr::null_mut();
    let ck = c(ck_path.to_str().unwrap());
    assert_eq!(unsafe { rmrc_reader_load(ck.as_ptr(), &mut reader) }, RmrcStatus::Ok);

    let tp = &source.truth_pairs[0];
    let dlg = source.dialogue(&tp.dialogue_id).unwrap();
    let doc = source.document(&dlg.document_id).unwrap();
    let question = &dlg.chats[tp.q_index].text;

    let mut pred = RmrcPrediction::default();
    let (dtext, qtext) = (c(&doc.text), c(question));
    assert_eq!(
        unsafe { rmrc_reader_predict(reader, dtext.as_ptr(), qtext.as_ptr(), cfg.max_n, &mut pred) },
        RmrcStatus::Ok
    );
    let input = rmrc::mrc::DocumentFeatures::new(doc, &params.enc)
        .unwrap()
        .with_question(&rmrc::text::tokenize(question), &params.enc);
    let (span, conf) = rmrc::mrc::predict(&params, &input, cfg.max_n, rmrc::mrc::Decoding::Constrained).unwrap();
    let span = span.unwrap();
    assert_eq!((pred.start, pred.end), (span.start, span.end));
    assert_eq!(pred.confidence.to_bits(), conf.to_bits());
    assert!(pred.end - pred.start < cfg.max_n);

    let empty = c("");
    assert_eq!(
        unsafe { rmrc_reader_predict(reader, empty.as_ptr(), qtext.as_ptr(), 7, &mut pred) },
        RmrcStatus::Precondition
    );
    unsafe { rmrc_reader_free(reader) };
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(rmrc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/rmrc.h")).unwrap();
    for name in [
        "rmrc_last_error",
        "rmrc_clear_error",
        "rmrc_version",
        "rmrc_generator_config_default",
        "rmrc_corpus_generate",
        "rmrc_corpus_read",
        "rmrc_corpus_write",
        "rmrc_corpus_counts",
        "rmrc_corpus_shuffle",
        "rmrc_corpus_free",
        "rmrc_reader_load",
        "rmrc_reader_predict",
        "rmrc_reader_free",
        "rmrc_token_f1",
        "rmrc_exact_match",
    ] {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
}
