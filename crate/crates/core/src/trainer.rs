//! Source pre-training, target adaptation, evaluation and the experiment
//! suites built on them.
//!
//! Adaptation alternates two phases per epoch. Pseudo pairs are built from
//! the target dialogues with the answer extractor and the question selector,
//! the reader is fine-tuned on them, and the selector is then updated by
//! policy gradient against rewards from a frozen copy of the reader.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer_extractor::{filter_answers, MatchScope};
use crate::corpus::{generate_corpus, Corpus, GeneratorConfig, SpanStyle};
use crate::error::{Error, Result};
use crate::mrc::{
    cross_entropy, encode_input, mrc_loss_and_grad, predict, span_probs, Decoding, DocumentFeatures, MrcExample,
    MrcParams, SpanLabels, DEFAULT_HIDDEN,
};
use crate::nn::{Adam, EmbeddingConfig, ParamSet};
use crate::question_selector::{select_questions, selector_recall, PseudoPair, Selection, SelectorParams};
use crate::reinforce::{compute_reward_with, policy_sample, qs_loss_and_grad, RewardSettings, RunningBaseline};
use crate::text::{exact_match_tokens, token_f1};

const PRETRAIN_SALT: u64 = 0x0070_7265;
const ADAPT_SALT: u64 = 0x0061_6461;
const INIT_SALT: u64 = 0x0069_6e69;
const TARGET_SALT: u64 = 0x7461_7267;

/// Table rows of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Baseline reward set to zero.
    NoBaseline,
    /// Every best match is kept regardless of its score.
    NoAnswerFiltering,
    /// Only the single most relevant question is used.
    NoQuestionFusing,
    /// Selector stays at its initial parameters.
    NoSelectorTraining,
    /// Untrained selector; pseudo pairs kept only when the reader is confident.
    ConfidenceSelector,
    /// Reward is the min-max normalized negative reader loss.
    CeReward,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoBaseline,
        Variant::NoAnswerFiltering,
        Variant::NoQuestionFusing,
        Variant::NoSelectorTraining,
        Variant::ConfidenceSelector,
        Variant::CeReward,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "RMRC",
            Variant::NoBaseline => "w/o r_b",
            Variant::NoAnswerFiltering => "w/o Answer Filtering",
            Variant::NoQuestionFusing => "w/o Question Fusing",
            Variant::NoSelectorTraining => "w/o QS Training",
            Variant::ConfidenceSelector => "Confidence-based Selector",
            Variant::CeReward => "w/ CE Reward",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| serde_json::to_value(v).ok().and_then(|j| j.as_str().map(|x| x == s)) == Some(true))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    F1,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Longest n-gram and longest decoded span.
    pub max_n: usize,
    pub gamma: f64,
    pub tau: usize,
    pub kappa: usize,
    pub baseline: f64,
    /// Replace the constant baseline with the running mean of rewards.
    pub running_baseline: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub epochs: usize,
    pub mrc_steps_per_epoch: usize,
    pub qs_steps_per_epoch: usize,
    pub batch_size: usize,
    pub adapt_lr: f64,
    pub selector_lr: f64,
    pub seed: u64,
    pub selector_frozen: bool,
    pub variant: Variant,
    pub scope: MatchScope,
    pub exploration: f64,
    pub eval_fraction: f64,
    pub confidence_threshold: f64,
    /// Rebuild pseudo pairs at the start of every epoch instead of once.
    pub reconstruct_each_epoch: bool,
    pub decoding: Decoding,
    pub enc: EmbeddingConfig,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_n: 7,
            gamma: 0.7,
            tau: 16,
            kappa: 5,
            baseline: 0.7,
            running_baseline: false,
            pretrain_epochs: 6,
            pretrain_lr: 2e-5,
            epochs: 3,
            mrc_steps_per_epoch: 100,
            qs_steps_per_epoch: 100,
            batch_size: 8,
            adapt_lr: 1e-5,
            selector_lr: 1e-5,
            seed: 0,
            selector_frozen: false,
            variant: Variant::Full,
            scope: MatchScope::AssociatedDocument,
            exploration: 0.0,
            eval_fraction: 0.2,
            confidence_threshold: 0.5,
            reconstruct_each_epoch: true,
            decoding: Decoding::Constrained,
            enc: EmbeddingConfig::default(),
            hidden: DEFAULT_HIDDEN,
        }
    }
}

/// Resolved per-run switches after applying the variant.
#[derive(Clone, Copy, Debug)]
struct RunPlan {
    gamma: f64,
    kappa: usize,
    baseline: f64,
    selector_frozen: bool,
    confidence_filter: bool,
    reward: RewardKind,
}

impl TrainConfig {
    /// Step sizes and schedule for the small synthetic benchmark. The
    /// hashed-feature models here are far smaller than a pre-trained encoder
    /// and need much larger learning rates to move in a few hundred steps.
    /// The reward baseline sits at the small reader's typical pseudo-pair F1.
    pub fn benchmark() -> Self {
        TrainConfig {
            pretrain_epochs: 6,
            pretrain_lr: 1e-2,
            epochs: 3,
            mrc_steps_per_epoch: 60,
            qs_steps_per_epoch: 60,
            batch_size: 8,
            adapt_lr: 3e-3,
            selector_lr: 3e-3,
            baseline: 0.3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        self.enc.validate()?;
        if self.max_n < 1 || self.tau < 1 || self.kappa < 1 || self.batch_size < 1 || self.hidden < 1 {
            return bad("max_n, tau, kappa, batch_size and hidden must be at least 1");
        }
        if self.gamma.is_nan() || self.baseline.is_nan() {
            return bad("gamma and baseline must be numbers");
        }
        for (name, lr) in [
            ("pretrain_lr", self.pretrain_lr),
            ("adapt_lr", self.adapt_lr),
            ("selector_lr", self.selector_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.exploration) {
            return bad("exploration must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad("confidence_threshold must lie in [0, 1]");
        }
        Ok(())
    }

    fn plan(&self) -> RunPlan {
        let mut p = RunPlan {
            gamma: self.gamma,
            kappa: self.kappa,
            baseline: self.baseline,
            selector_frozen: self.selector_frozen,
            confidence_filter: false,
            reward: RewardKind::F1,
        };
        match self.variant {
            Variant::Full => {}
            Variant::NoBaseline => p.baseline = 0.0,
            Variant::NoAnswerFiltering => p.gamma = f64::NEG_INFINITY,
            Variant::NoQuestionFusing => p.kappa = 1,
            Variant::NoSelectorTraining => p.selector_frozen = true,
            Variant::ConfidenceSelector => {
                p.selector_frozen = true;
                p.confidence_filter = true;
            }
            Variant::CeReward => p.reward = RewardKind::CrossEntropy,
        }
        p
    }

    pub fn init_selector(&self) -> SelectorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ INIT_SALT);
        SelectorParams::init(&self.enc, &mut rng)
    }
}

// ---------------------------------------------------------------------------
// evaluation

/// Question-independent reader features for every document of a corpus.
pub struct FeatureCache {
    docs: Vec<DocumentFeatures>,
}

impl FeatureCache {
    pub fn new(corpus: &Corpus, enc: &EmbeddingConfig) -> Result<Self> {
        let docs = corpus
            .documents
            .iter()
            .map(|d| DocumentFeatures::new(d, enc))
            .collect::<Result<_>>()?;
        Ok(FeatureCache { docs })
    }

    pub fn get(&self, document: usize) -> &DocumentFeatures {
        &self.docs[document]
    }
}

/// A (document, question, gold span) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct GoldExample {
    /// Position of the document in its corpus.
    pub document: usize,
    pub question: Vec<String>,
    pub span: SpanLabels,
}

/// Gold triples from the ground-truth pairs of a corpus.
pub fn gold_examples(corpus: &Corpus) -> Result<Vec<GoldExample>> {
    corpus
        .truth_pairs
        .iter()
        .map(|tp| {
            let dlg = corpus
                .dialogue(&tp.dialogue_id)
                .ok_or_else(|| Error::Integrity(format!("missing dialogue {}", tp.dialogue_id)))?;
            let document = corpus
                .document_position(&dlg.document_id)
                .ok_or_else(|| Error::Integrity(format!("missing document {}", dlg.document_id)))?;
            let question = dlg
                .chats
                .get(tp.q_index)
                .ok_or_else(|| Error::Integrity(format!("missing chat {} in {}", tp.q_index, dlg.id)))?
                .tokens
                .clone();
            Ok(GoldExample {
                document,
                question,
                span: SpanLabels {
                    start: tp.span[0],
                    end: tp.span[1],
                },
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub em: f64,
    pub f1: f64,
    pub count: usize,
}

/// Mean EM and token F1 of decoded spans against gold spans.
pub fn evaluate(
    params: &MrcParams,
    corpus: &Corpus,
    cache: &FeatureCache,
    examples: &[GoldExample],
    max_len: usize,
    decoding: Decoding,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let (mut em, mut f1) = (0.0, 0.0);
    for ex in examples {
        let doc = &corpus.documents[ex.document];
        let input = cache.get(ex.document).with_question(&ex.question, &params.enc);
        let (span, _) = predict(params, &input, max_len, decoding)?;
        let pred: &[String] = match span {
            Some(p) => &doc.tokens[p.start..=p.end],
            None => &[],
        };
        let gold = &doc.tokens[ex.span.start..=ex.span.end];
        em += f64::from(exact_match_tokens(pred, gold));
        f1 += token_f1(pred, gold);
    }
    let n = examples.len() as f64;
    Ok(Evaluation {
        em: em / n,
        f1: f1 / n,
        count: examples.len(),
    })
}

// ---------------------------------------------------------------------------
// pre-training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub em: f64,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: MrcParams,
    pub epochs: Vec<PretrainEpoch>,
}

/// Supervised training on gold triples of the training split of `source`,
/// evaluated on its held-out split after every epoch. The split is by
/// document, fixed by `config.seed` and `config.eval_fraction`.
pub fn pretrain_mrc(source: &Corpus, config: &TrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if !source.has_truth() {
        return Err(Error::Precondition("source corpus has no ground-truth pairs".into()));
    }
    let (train, held) = source.split_by_document(config.eval_fraction, config.seed);
    let train_examples = gold_examples(&train)?;
    if train_examples.is_empty() {
        return Err(Error::Precondition("source training split has no ground-truth pairs".into()));
    }
    let held_examples = gold_examples(&held)?;
    let train_cache = FeatureCache::new(&train, &config.enc)?;
    let held_cache = FeatureCache::new(&held, &config.enc)?;
    let prepared = train_examples
        .iter()
        .map(|g| {
            let input = train_cache.get(g.document).with_question(&g.question, &config.enc);
            MrcExample::from_input(input, g.span)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ PRETRAIN_SALT);
    let mut params = MrcParams::init(config.enc, config.hidden, &mut rng);
    let mut adam = Adam::new(config.pretrain_lr, params.num_params());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut epochs = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<MrcExample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let (loss, grad) = mrc_loss_and_grad(&params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("pre-training loss became {loss} in epoch {epoch}")));
            }
            adam.update(&mut params, &grad)?;
            total += loss;
            steps += 1;
        }
        let eval = if held_examples.is_empty() {
            Evaluation::default()
        } else {
            evaluate(&params, &held, &held_cache, &held_examples, config.max_n, config.decoding)?
        };
        epochs.push(PretrainEpoch {
            epoch,
            loss: total / steps as f64,
            em: eval.em,
            f1: eval.f1,
        });
    }
    Ok(PretrainOutcome { params, epochs })
}

// ---------------------------------------------------------------------------
// pseudo pairs

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Construction {
    pub pairs: Vec<PseudoPair>,
    /// Answers that passed the threshold.
    pub accepted: usize,
    /// Answers below the threshold.
    pub rejected: usize,
    /// Answerer chats with no tokens.
    pub empty_chats: usize,
    /// Accepted answers without any preceding questioner chat.
    pub skips: usize,
}

/// Extracts answers and selects questions for every accepted answer.
pub fn construct_pairs<R: Rng>(
    corpus: &Corpus,
    selector: &SelectorParams,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Construction> {
    let plan = config.plan();
    construct_with(corpus, selector, config, plan.gamma, plan.kappa, rng)
}

fn construct_with<R: Rng>(
    corpus: &Corpus,
    selector: &SelectorParams,
    config: &TrainConfig,
    gamma: f64,
    kappa: usize,
    rng: &mut R,
) -> Result<Construction> {
    let filtered = filter_answers(corpus, config.max_n, gamma, &config.enc, config.scope)?;
    let sel = Selection {
        tau: config.tau,
        kappa,
        exploration: config.exploration,
    };
    let mut out = Construction {
        accepted: filtered.answers.len(),
        rejected: filtered.rejected,
        empty_chats: filtered.empty_chats,
        ..Construction::default()
    };
    for answer in &filtered.answers {
        let dlg = corpus
            .dialogue(&answer.dialogue_id)
            .ok_or_else(|| Error::Integrity(format!("missing dialogue {}", answer.dialogue_id)))?;
        match select_questions(selector, answer, dlg, &sel, &config.enc, rng)? {
            Some(p) => out.pairs.push(p),
            None => out.skips += 1,
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// adaptation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub em: f64,
    pub f1: f64,
    pub selector_recall: Option<f64>,
    /// Mean F1 reward; absent when the selector phase did not run.
    pub mean_reward: Option<f64>,
    pub mean_advantage: Option<f64>,
    pub pairs: usize,
    pub skips: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Pairs dropped by the confidence filter.
    pub low_confidence: usize,
    pub mrc_loss: Option<f64>,
    pub qs_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    /// Scores of the input reader and selector.
    pub before: Evaluation,
    pub recall_before: Option<f64>,
    pub epochs: Vec<EpochMetrics>,
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    pub fn final_f1(&self) -> f64 {
        self.epochs.last().map_or(self.before.f1, |e| e.f1)
    }

    pub fn final_em(&self) -> f64 {
        self.epochs.last().map_or(self.before.em, |e| e.em)
    }

    pub fn final_recall(&self) -> Option<f64> {
        self.epochs.last().map_or(self.recall_before, |e| e.selector_recall)
    }
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub mrc: MrcParams,
    pub selector: SelectorParams,
    pub metrics: RunMetrics,
}

/// Evaluation context for a target corpus: a training split for pseudo
/// pairs and a held-out split whose ground truth is only used for scoring.
pub struct TargetSplit {
    pub train: Corpus,
    pub eval: Corpus,
    eval_cache: FeatureCache,
    eval_examples: Vec<GoldExample>,
}

impl TargetSplit {
    pub fn new(target: &Corpus, config: &TrainConfig) -> Result<Self> {
        let (train, eval) = target.split_by_document(config.eval_fraction, config.seed);
        let eval_examples = gold_examples(&eval)?;
        if eval_examples.is_empty() {
            return Err(Error::Precondition("target evaluation split has no ground-truth pairs".into()));
        }
        let eval_cache = FeatureCache::new(&eval, &config.enc)?;
        Ok(TargetSplit {
            train,
            eval,
            eval_cache,
            eval_examples,
        })
    }

    pub fn evaluate(&self, params: &MrcParams, config: &TrainConfig) -> Result<Evaluation> {
        evaluate(params, &self.eval, &self.eval_cache, &self.eval_examples, config.max_n, config.decoding)
    }

    /// Selector recall over both splits.
    pub fn recall(&self, selector: &SelectorParams, config: &TrainConfig) -> Result<Option<f64>> {
        let kappa = config.plan().kappa;
        let a = selector_recall(selector, &self.train, config.tau, kappa, &config.enc)?;
        let b = selector_recall(selector, &self.eval, config.tau, kappa, &config.enc)?;
        let (na, nb) = (self.train.truth_pairs.len() as f64, self.eval.truth_pairs.len() as f64);
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some((a * na + b * nb) / (na + nb)),
            (a, b) => a.or(b),
        })
    }
}

pub fn adapt(mrc: &MrcParams, selector: &SelectorParams, target: &Corpus, config: &TrainConfig) -> Result<AdaptOutcome> {
    let split = TargetSplit::new(target, config)?;
    adapt_split(mrc, selector, &split, config, None)
}

fn write_diagnostics(dir: Option<&Path>, mrc: &MrcParams, selector: &SelectorParams) {
    if let Some(dir) = dir {
        let _ = std::fs::create_dir_all(dir);
        let _ = mrc.to_checkpoint().write(dir.join("diagnostic-mrc.ckpt"));
        let _ = selector_checkpoint(selector, &mrc.enc).write(dir.join("diagnostic-selector.ckpt"));
    }
}

/// Selector parameters as a checkpoint.
pub fn selector_checkpoint(selector: &SelectorParams, enc: &EmbeddingConfig) -> crate::nn::Checkpoint {
    let mut ck = crate::nn::Checkpoint::default();
    ck.meta.insert("model".into(), "selector".into());
    ck.meta.insert("enc.dim".into(), enc.dim.to_string());
    ck.meta.insert("enc.hash_seed".into(), enc.hash_seed.to_string());
    ck.blocks = selector.blocks();
    ck
}

pub fn selector_from_checkpoint(ck: &crate::nn::Checkpoint) -> Result<(SelectorParams, EmbeddingConfig)> {
    if ck.meta.get("model").map(String::as_str) != Some("selector") {
        return Err(Error::Integrity("checkpoint does not hold a question selector".into()));
    }
    let enc = EmbeddingConfig {
        dim: ck.meta_value("enc.dim")?,
        hash_seed: ck.meta_value("enc.hash_seed")?,
    };
    enc.validate()?;
    let mut p = SelectorParams::zeros(&enc);
    p.load_blocks(&ck.blocks)?;
    Ok((p, enc))
}

fn check_finite(what: &str, v: f64, epoch: usize, dir: Option<&Path>, mrc: &MrcParams, sel: &SelectorParams) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    write_diagnostics(dir, mrc, sel);
    Err(Error::Numerical(format!("{what} became {v} in epoch {epoch}")))
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Adaptation on an already split target corpus. Non-finite losses abort the
/// run after writing diagnostic checkpoints to `diagnostics` when given.
pub fn adapt_split(
    mrc: &MrcParams,
    selector: &SelectorParams,
    split: &TargetSplit,
    config: &TrainConfig,
    diagnostics: Option<&Path>,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if mrc.enc != config.enc {
        return Err(Error::Config("reader embedding settings differ from the run configuration".into()));
    }
    if selector.scorer.input_width() != SelectorParams::feature_width(&config.enc) {
        return Err(Error::Config("selector input width does not match the embedding size".into()));
    }
    let started = Instant::now();
    let plan = config.plan();
    let corpus = &split.train;
    let cache = FeatureCache::new(corpus, &config.enc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ ADAPT_SALT);
    let mut mrc = mrc.clone();
    let mut sel = selector.clone();
    let mut mrc_adam = Adam::new(config.adapt_lr, mrc.num_params());
    let mut sel_adam = Adam::new(config.selector_lr, sel.num_params());
    let mut running = RunningBaseline::new(plan.baseline);

    let before = split.evaluate(&mrc, config)?;
    let recall_before = split.recall(&sel, config)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut construction = Construction::default();
    for epoch in 0..config.epochs {
        if epoch == 0 || config.reconstruct_each_epoch {
            construction = construct_with(corpus, &sel, config, plan.gamma, plan.kappa, &mut rng)?;
        }
        let mut pairs: Vec<&PseudoPair> = construction.pairs.iter().collect();
        let doc_of = |p: &PseudoPair| -> Result<usize> {
            corpus
                .document_position(p.answer.document_id())
                .ok_or_else(|| Error::Integrity(format!("missing document {}", p.answer.document_id())))
        };

        let mut low_confidence = 0;
        if plan.confidence_filter {
            let mut kept = Vec::with_capacity(pairs.len());
            for p in pairs {
                let input = cache.get(doc_of(p)?).with_question(&p.question_tokens, &config.enc);
                let (_, conf) = predict(&mrc, &input, config.max_n, config.decoding)?;
                if conf > config.confidence_threshold {
                    kept.push(p);
                } else {
                    low_confidence += 1;
                }
            }
            pairs = kept;
        }

        // reader phase
        let examples = pairs
            .iter()
            .map(|p| {
                let input = cache.get(doc_of(p)?).with_question(&p.question_tokens, &config.enc);
                let span = &p.answer.answer_span;
                MrcExample::from_input(input, SpanLabels { start: span.start, end: span.end })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mrc_loss = None;
        if !examples.is_empty() && config.mrc_steps_per_epoch > 0 {
            let mut total = 0.0;
            for _ in 0..config.mrc_steps_per_epoch {
                let batch: Vec<MrcExample> = (0..config.batch_size)
                    .map(|_| examples[rng.gen_range(0..examples.len())].clone())
                    .collect();
                let (loss, grad) = mrc_loss_and_grad(&mrc, &batch)?;
                check_finite("reader loss", loss, epoch, diagnostics, &mrc, &sel)?;
                mrc_adam.update(&mut mrc, &grad)?;
                total += loss;
            }
            mrc_loss = Some(total / config.mrc_steps_per_epoch as f64);
        }

        // selector phase against a frozen reader
        let (mut mean_reward, mut mean_advantage, mut qs_loss) = (None, None, None);
        if !plan.selector_frozen && !pairs.is_empty() {
            let snapshot = mrc.clone();
            let settings = RewardSettings {
                baseline: plan.baseline,
                max_len: config.max_n,
                decoding: config.decoding,
            };
            let mut f1_rewards = Vec::with_capacity(pairs.len());
            for p in &pairs {
                let d = doc_of(p)?;
                let rec = compute_reward_with(p, &snapshot, &corpus.documents[d], cache.get(d), &settings)?;
                f1_rewards.push(rec.reward);
            }
            let rewards = match plan.reward {
                RewardKind::F1 => f1_rewards.clone(),
                RewardKind::CrossEntropy => {
                    let raw = examples
                        .iter()
                        .map(|ex| {
                            let v = encode_input(&snapshot, &ex.input)?;
                            Ok(-cross_entropy(&span_probs(&snapshot, &v)?, ex.labels))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    min_max(&raw)
                }
            };
            let advantages: Vec<f64> = rewards
                .iter()
                .map(|&r| {
                    if config.running_baseline {
                        let a = r - running.mean;
                        running.observe(r);
                        a
                    } else {
                        r - plan.baseline
                    }
                })
                .collect();
            mean_reward = mean(f1_rewards.iter().copied());
            mean_advantage = mean(advantages.iter().copied());
            let samples = pairs
                .iter()
                .zip(&advantages)
                .map(|(p, &a)| policy_sample(p, a, corpus, config.tau, &config.enc))
                .collect::<Result<Vec<_>>>()?;
            if config.qs_steps_per_epoch > 0 {
                let mut total = 0.0;
                for _ in 0..config.qs_steps_per_epoch {
                    let batch: Vec<_> = (0..config.batch_size)
                        .map(|_| samples[rng.gen_range(0..samples.len())].clone())
                        .collect();
                    let (loss, grad) = qs_loss_and_grad(&sel, &batch)?;
                    check_finite("selector loss", loss, epoch, diagnostics, &mrc, &sel)?;
                    sel_adam.update(&mut sel, &grad)?;
                    total += loss;
                }
                qs_loss = Some(total / config.qs_steps_per_epoch as f64);
            }
        }

        let eval = split.evaluate(&mrc, config)?;
        epochs.push(EpochMetrics {
            epoch,
            em: eval.em,
            f1: eval.f1,
            selector_recall: split.recall(&sel, config)?,
            mean_reward,
            mean_advantage,
            pairs: pairs.len(),
            skips: construction.skips,
            accepted: construction.accepted,
            rejected: construction.rejected,
            low_confidence,
            mrc_loss,
            qs_loss,
        });
    }
    Ok(AdaptOutcome {
        mrc,
        selector: sel,
        metrics: RunMetrics {
            before,
            recall_before,
            epochs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Rescales to [0, 1]; a constant input maps to 0.5.
fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        xs.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; xs.len()]
    }
}

/// One JSON object per epoch.
pub fn write_metrics_log<W: Write>(epochs: &[EpochMetrics], w: &mut W) -> std::io::Result<()> {
    for e in epochs {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// suites

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub pretrain: Vec<PretrainEpoch>,
    /// Pre-trained reader on the target evaluation split.
    pub no_adaptation: Evaluation,
    pub runs: Vec<VariantRun>,
}

impl SeedRun {
    pub fn run(&self, v: Variant) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.variant == v).map(|r| &r.metrics)
    }
}

/// Pre-trains on `source` and adapts every listed variant on `target` from
/// the same starting point.
pub fn run_seed(source: &Corpus, target: &Corpus, config: &TrainConfig, variants: &[Variant]) -> Result<SeedRun> {
    let pre = pretrain_mrc(source, config)?;
    let split = TargetSplit::new(target, config)?;
    let selector = config.init_selector();
    let no_adaptation = split.evaluate(&pre.params, config)?;
    let runs = variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                ..config.clone()
            };
            Ok(VariantRun {
                variant,
                metrics: adapt_split(&pre.params, &selector, &split, &cfg, None)?.metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedRun {
        seed: config.seed,
        pretrain: pre.epochs,
        no_adaptation,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub em: f64,
    pub f1: f64,
    pub per_seed_f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub no_adaptation_em: f64,
    pub no_adaptation_f1: f64,
    pub rows: Vec<AblationRow>,
    #[serde(skip)]
    pub runs: Vec<SeedRun>,
}

impl AblationReport {
    pub fn from_runs(runs: Vec<SeedRun>, variants: &[Variant]) -> Self {
        let rows = variants
            .iter()
            .map(|&v| {
                let f1: Vec<f64> = runs.iter().filter_map(|r| r.run(v)).map(RunMetrics::final_f1).collect();
                let em: Vec<f64> = runs.iter().filter_map(|r| r.run(v)).map(RunMetrics::final_em).collect();
                AblationRow {
                    variant: v,
                    label: v.label().to_owned(),
                    em: median(&em),
                    f1: median(&f1),
                    per_seed_f1: f1,
                }
            })
            .collect();
        let na_em: Vec<f64> = runs.iter().map(|r| r.no_adaptation.em).collect();
        let na_f1: Vec<f64> = runs.iter().map(|r| r.no_adaptation.f1).collect();
        AblationReport {
            seeds: runs.iter().map(|r| r.seed).collect(),
            no_adaptation_em: median(&na_em),
            no_adaptation_f1: median(&na_f1),
            rows,
            runs,
        }
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Median EM/F1 table, scores in percent.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>7} {:>7}\n", "variant", "EM", "F1");
        s.push_str(&format!(
            "{:<28} {:>7.2} {:>7.2}\n",
            "no adaptation",
            100.0 * self.no_adaptation_em,
            100.0 * self.no_adaptation_f1
        ));
        for r in &self.rows {
            s.push_str(&format!("{:<28} {:>7.2} {:>7.2}\n", r.label, 100.0 * r.em, 100.0 * r.f1));
        }
        s.push_str(&format!(
            "seeds: {}\n",
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
        ));
        s
    }
}

/// Runs all seven variants for each seed on fixed corpora.
pub fn ablate(config: &TrainConfig, source: &Corpus, target: &Corpus, seeds: &[u64]) -> Result<AblationReport> {
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            run_seed(source, target, &cfg, &Variant::ALL)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport::from_runs(runs, &Variant::ALL))
}

/// Corpus generators for the synthetic benchmark. The source domain marks
/// gold spans without the leading marker token, the target domain with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source: GeneratorConfig,
    pub target: GeneratorConfig,
    pub train: TrainConfig,
}

impl Benchmark {
    pub fn standard() -> Self {
        Benchmark {
            source: GeneratorConfig {
                span_style: SpanStyle::Bare,
                ..GeneratorConfig::default()
            },
            target: GeneratorConfig {
                span_style: SpanStyle::Marked,
                shuffle: true,
                shuffle_max_shift: 5,
                irrelevant_chat_rate: 0.3,
                ..GeneratorConfig::default()
            },
            train: TrainConfig::benchmark(),
        }
    }

    pub fn corpora(&self, seed: u64) -> Result<(Corpus, Corpus)> {
        let source = generate_corpus(&GeneratorConfig {
            seed,
            ..self.source.clone()
        })?;
        let target = generate_corpus(&GeneratorConfig {
            seed: seed ^ TARGET_SALT,
            ..self.target.clone()
        })?;
        Ok((source, target))
    }

    /// Generates fresh corpora per seed and runs the listed variants.
    pub fn run(&self, seeds: &[u64], variants: &[Variant]) -> Result<AblationReport> {
        let runs = seeds
            .iter()
            .map(|&seed| {
                let (source, target) = self.corpora(seed)?;
                let cfg = TrainConfig {
                    seed,
                    ..self.train.clone()
                };
                run_seed(&source, &target, &cfg, variants)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AblationReport::from_runs(runs, variants))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Kappa,
    Baseline,
    Tau,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<SweepParam> {
        match s {
            "gamma" => Some(SweepParam::Gamma),
            "kappa" => Some(SweepParam::Kappa),
            "baseline" | "r_b" | "rb" => Some(SweepParam::Baseline),
            "tau" => Some(SweepParam::Tau),
            _ => None,
        }
    }

    pub fn apply(self, config: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!("{self:?} needs a positive integer, got {value}")))
            }
        };
        let mut c = config.clone();
        match self {
            SweepParam::Gamma => c.gamma = value,
            SweepParam::Kappa => c.kappa = count()?,
            SweepParam::Baseline => c.baseline = value,
            SweepParam::Tau => c.tau = count()?,
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: RunMetrics,
}

/// Adapts one pre-trained reader under each value of `param`. Runs are
/// independent; `workers > 1` spreads them over threads without changing
/// any result.
pub fn sweep(
    config: &TrainConfig,
    pretrained: &MrcParams,
    target: &Corpus,
    param: SweepParam,
    values: &[f64],
    workers: usize,
) -> Result<Vec<SweepPoint>> {
    let configs = values
        .iter()
        .map(|&v| param.apply(config, v))
        .collect::<Result<Vec<_>>>()?;
    let split = TargetSplit::new(target, config)?;
    let selector = config.init_selector();
    let one = |c: &TrainConfig, v: f64| -> Result<SweepPoint> {
        Ok(SweepPoint {
            value: v,
            metrics: adapt_split(pretrained, &selector, &split, c, None)?.metrics,
        })
    };
    let workers = workers.max(1).min(configs.len().max(1));
    if workers == 1 {
        return configs.iter().zip(values).map(|(c, &v)| one(c, v)).collect();
    }
    let jobs: Vec<(usize, &TrainConfig, f64)> = configs.iter().zip(values).enumerate().map(|(i, (c, &v))| (i, c, v)).collect();
    let mut results: Vec<Option<Result<SweepPoint>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(jobs.len().div_ceil(workers))
            .map(|chunk| s.spawn(|| chunk.iter().map(|&(i, c, v)| (i, one(c, v))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}
