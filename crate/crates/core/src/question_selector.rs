//! Picks the questioner chats that most likely asked for an extracted answer.
//!
//! Candidates are the `tau` nearest questioner chats before the answer. A
//! small tanh network scores each (answer chat, question chat) pair; the
//! sigmoid of that score is the relevance `R`. The top `kappa` candidates are
//! fused in dialogue order into one pseudo question whose probability is the
//! product of the selected relevances.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer_extractor::ExtractedAnswer;
use crate::corpus::{Chat, Corpus, Dialogue, Role, SEPARATOR_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{cosine, embed, log_sigmoid, sigmoid, Block, DenseParams, EmbeddingConfig, Linear, ParamSet};

pub const SCORER_HIDDEN: usize = 32;
const BLOCK_PREFIX: &str = "selector.scorer";

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    pub scorer: DenseParams,
}

impl SelectorParams {
    pub fn feature_width(enc: &EmbeddingConfig) -> usize {
        2 * enc.dim + 3
    }

    pub fn init<R: Rng>(enc: &EmbeddingConfig, rng: &mut R) -> Self {
        SelectorParams {
            scorer: DenseParams::mlp(Self::feature_width(enc), SCORER_HIDDEN, 1, rng),
        }
    }

    /// Scorer with every weight and bias at zero, so every pair scores 0.5.
    pub fn zeros(enc: &EmbeddingConfig) -> Self {
        SelectorParams {
            scorer: DenseParams {
                layers: vec![
                    Linear::zeros(Self::feature_width(enc), SCORER_HIDDEN),
                    Linear::zeros(SCORER_HIDDEN, 1),
                ],
            },
        }
    }

    pub fn logit(&self, features: &[f64]) -> Result<f64> {
        Ok(self.scorer.forward(features)?.0[0])
    }
}

impl ParamSet for SelectorParams {
    fn flat(&self) -> Vec<f64> {
        self.scorer.flat()
    }

    fn set_flat(&mut self, values: &[f64]) {
        self.scorer.set_flat(values)
    }

    fn blocks(&self) -> Vec<Block> {
        self.scorer.named_blocks(BLOCK_PREFIX)
    }

    fn load_blocks(&mut self, blocks: &[Block]) -> Result<()> {
        self.scorer.load_named(BLOCK_PREFIX, blocks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedQuestion {
    pub chat_index: usize,
    pub relevance: f64,
    pub logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoPair {
    pub dialogue_id: String,
    pub answer: ExtractedAnswer,
    pub question_tokens: Vec<String>,
    /// Selected questions in dialogue order.
    pub selected: Vec<SelectedQuestion>,
    /// Sum of log relevances of the selected questions.
    pub log_prob: f64,
}

impl PseudoPair {
    /// Product of the selected relevances.
    pub fn probability(&self) -> f64 {
        self.selected.iter().map(|s| s.relevance).product()
    }
}

/// Up to `tau` questioner chats before `answer_index`, nearest first.
pub fn candidate_questions(dialogue: &Dialogue, answer_index: usize, tau: usize) -> Result<Vec<&Chat>> {
    if tau < 1 {
        return Err(Error::Precondition("tau must be at least 1".into()));
    }
    let answer = dialogue.chats.get(answer_index).ok_or_else(|| {
        Error::Precondition(format!("chat {answer_index} does not exist in dialogue {}", dialogue.id))
    })?;
    if answer.role != Role::Answerer {
        return Err(Error::Precondition(format!(
            "chat {answer_index} of dialogue {} is not an answerer chat",
            dialogue.id
        )));
    }
    Ok(dialogue.chats[..answer_index]
        .iter()
        .rev()
        .filter(|c| c.role == Role::Questioner)
        .take(tau)
        .collect())
}

/// `[embed(answer); embed(question); cosine; gap / tau; ln((1+|q|)/(1+|a|))]`.
pub fn pair_features(answer_chat: &Chat, question_chat: &Chat, tau: usize, enc: &EmbeddingConfig) -> Vec<f64> {
    let a = embed(&answer_chat.tokens, enc);
    let q = embed(&question_chat.tokens, enc);
    let cos = cosine(&a.values, &q.values).expect("same dim");
    let gap = answer_chat.index.abs_diff(question_chat.index) as f64 / tau as f64;
    let len_ratio = ((1 + question_chat.tokens.len()) as f64 / (1 + answer_chat.tokens.len()) as f64).ln();
    let mut f = Vec::with_capacity(2 * enc.dim + 3);
    f.extend_from_slice(&a.values);
    f.extend_from_slice(&q.values);
    f.extend_from_slice(&[cos, gap, len_ratio]);
    f
}

pub fn relevance(params: &SelectorParams, answer_chat: &Chat, question_chat: &Chat, tau: usize, enc: &EmbeddingConfig) -> Result<f64> {
    Ok(sigmoid(params.logit(&pair_features(answer_chat, question_chat, tau, enc))?))
}

/// Window and selection sizes plus optional exploration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub tau: usize,
    pub kappa: usize,
    /// Probability of swapping one selected question for a random unselected candidate.
    pub exploration: f64,
}

struct Scored<'a> {
    chat: &'a Chat,
    logit: f64,
    gap: usize,
}

fn score_candidates<'a>(
    params: &SelectorParams,
    dialogue: &'a Dialogue,
    answer_index: usize,
    tau: usize,
    enc: &EmbeddingConfig,
) -> Result<Vec<Scored<'a>>> {
    let answer_chat = &dialogue.chats[answer_index];
    let mut scored = candidate_questions(dialogue, answer_index, tau)?
        .into_iter()
        .map(|q| {
            Ok(Scored {
                chat: q,
                logit: params.logit(&pair_features(answer_chat, q, tau, enc))?,
                gap: answer_index - q.index,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // relevance descending, nearer question first on ties
    scored.sort_by(|a, b| b.logit.total_cmp(&a.logit).then(a.gap.cmp(&b.gap)));
    Ok(scored)
}

/// Chat indices of the top-`kappa` candidates for `answer_index`, in dialogue order.
pub fn top_questions(
    params: &SelectorParams,
    dialogue: &Dialogue,
    answer_index: usize,
    tau: usize,
    kappa: usize,
    enc: &EmbeddingConfig,
) -> Result<Vec<usize>> {
    let scored = score_candidates(params, dialogue, answer_index, tau, enc)?;
    let mut picked: Vec<usize> = scored.iter().take(kappa).map(|s| s.chat.index).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Builds the pseudo pair for one extracted answer, or `None` when no questioner chat precedes it.
pub fn select_questions<R: Rng>(
    params: &SelectorParams,
    answer: &ExtractedAnswer,
    dialogue: &Dialogue,
    sel: &Selection,
    enc: &EmbeddingConfig,
    rng: &mut R,
) -> Result<Option<PseudoPair>> {
    if sel.kappa < 1 {
        return Err(Error::Precondition("kappa must be at least 1".into()));
    }
    let scored = score_candidates(params, dialogue, answer.chat_index, sel.tau, enc)?;
    if scored.is_empty() {
        return Ok(None);
    }
    let k = sel.kappa.min(scored.len());
    let mut chosen: Vec<&Scored<'_>> = scored[..k].iter().collect();
    if sel.exploration > 0.0 && scored.len() > k && rng.gen_bool(sel.exploration) {
        let out = rng.gen_range(0..k);
        chosen[out] = scored[k..].choose(rng).expect("non-empty remainder");
    }
    chosen.sort_by_key(|s| s.chat.index);

    let mut question_tokens = Vec::new();
    let mut selected = Vec::with_capacity(k);
    let mut log_prob = 0.0;
    for (i, s) in chosen.iter().enumerate() {
        if i > 0 {
            question_tokens.push(SEPARATOR_TOKEN.to_owned());
        }
        question_tokens.extend(s.chat.tokens.iter().cloned());
        log_prob += log_sigmoid(s.logit);
        selected.push(SelectedQuestion {
            chat_index: s.chat.index,
            relevance: sigmoid(s.logit),
            logit: s.logit,
        });
    }
    Ok(Some(PseudoPair {
        dialogue_id: dialogue.id.clone(),
        answer: answer.clone(),
        question_tokens,
        selected,
        log_prob,
    }))
}

/// Fraction of ground-truth pairs whose question lands in the top `kappa`
/// candidates of its answer. `None` without ground truth.
pub fn selector_recall(
    params: &SelectorParams,
    corpus: &Corpus,
    tau: usize,
    kappa: usize,
    enc: &EmbeddingConfig,
) -> Result<Option<f64>> {
    if corpus.truth_pairs.is_empty() {
        return Ok(None);
    }
    let mut hits = 0usize;
    for tp in &corpus.truth_pairs {
        let dlg = corpus
            .dialogue(&tp.dialogue_id)
            .ok_or_else(|| Error::Integrity(format!("missing dialogue {}", tp.dialogue_id)))?;
        if top_questions(params, dlg, tp.a_index, tau, kappa, enc)?.contains(&tp.q_index) {
            hits += 1;
        }
    }
    Ok(Some(hits as f64 / corpus.truth_pairs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TokenSpan;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dialogue(roles: &str) -> Dialogue {
        let chats = roles
            .chars()
            .enumerate()
            .map(|(i, r)| {
                let role = if r == 'q' { Role::Questioner } else { Role::Answerer };
                Chat::new(i, role, format!("tok{:04} word{i}", 100 + i), None)
            })
            .collect();
        Dialogue {
            id: "dlg".into(),
            document_id: "doc".into(),
            chats,
        }
    }

    fn extracted(chat_index: usize) -> ExtractedAnswer {
        ExtractedAnswer {
            answer_span: TokenSpan::new("doc", 0, 1),
            dialogue_id: "dlg".into(),
            chat_index,
            score: 1.0,
        }
    }

    fn small_enc() -> EmbeddingConfig {
        EmbeddingConfig { dim: 16, hash_seed: 1 }
    }

    #[test]
    fn candidates_nearest_first() {
        let d = dialogue("aqaqaqa");
        let idx: Vec<usize> = candidate_questions(&d, 6, 2).unwrap().iter().map(|c| c.index).collect();
        assert_eq!(idx, vec![5, 3]);
        let idx: Vec<usize> = candidate_questions(&d, 6, 16).unwrap().iter().map(|c| c.index).collect();
        assert_eq!(idx, vec![5, 3, 1]);
        assert!(candidate_questions(&d, 0, 16).unwrap().is_empty());
        assert!(matches!(candidate_questions(&d, 9, 4), Err(Error::Precondition(_))));
        assert!(matches!(candidate_questions(&d, 1, 4), Err(Error::Precondition(_))));
    }

    #[test]
    fn feature_examples() {
        let enc = small_enc();
        let a = Chat::new(5, Role::Answerer, "tok0001 tok0002", None);
        let q = Chat::new(4, Role::Questioner, "tok0001 tok0002", None);
        let f = pair_features(&a, &q, 16, &enc);
        assert_eq!(f.len(), 2 * 16 + 3);
        assert!((f[32] - 1.0).abs() < 1e-12);
        assert!((f[33] - 1.0 / 16.0).abs() < 1e-15);
        let far = Chat::new(0, Role::Answerer, "x", None);
        let q16 = Chat::new(16, Role::Questioner, "y", None);
        assert_eq!(pair_features(&q16, &far, 16, &enc)[33], 1.0);
        assert_eq!(pair_features(&a, &q, 16, &enc), pair_features(&a, &q, 16, &enc));
    }

    #[test]
    fn zero_scorer_gives_half() {
        let enc = small_enc();
        let p = SelectorParams::zeros(&enc);
        let d = dialogue("qa");
        let r = relevance(&p, &d.chats[1], &d.chats[0], 16, &enc).unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn relevance_is_sigmoid_of_scorer() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SelectorParams::init(&enc, &mut rng);
        let d = dialogue("qa");
        let f = pair_features(&d.chats[1], &d.chats[0], 16, &enc);
        let direct = sigmoid(p.scorer.forward(&f).unwrap().0[0]);
        let r = relevance(&p, &d.chats[1], &d.chats[0], 16, &enc).unwrap();
        assert_eq!(r, direct);
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn kappa_one_takes_the_top_question() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = SelectorParams::init(&enc, &mut rng);
        let d = dialogue("qqqqa");
        let sel = Selection { tau: 16, kappa: 1, exploration: 0.0 };
        let pair = select_questions(&p, &extracted(4), &d, &sel, &enc, &mut rng).unwrap().unwrap();
        let best = (0..4)
            .max_by(|&i, &j| {
                let ri = relevance(&p, &d.chats[4], &d.chats[i], 16, &enc).unwrap();
                let rj = relevance(&p, &d.chats[4], &d.chats[j], 16, &enc).unwrap();
                ri.total_cmp(&rj)
            })
            .unwrap();
        assert_eq!(pair.question_tokens, d.chats[best].tokens);
        assert_eq!(pair.selected.len(), 1);
    }

    #[test]
    fn probability_is_product_of_relevances() {
        let pair = PseudoPair {
            dialogue_id: "d".into(),
            answer: extracted(3),
            question_tokens: vec![],
            selected: vec![
                SelectedQuestion { chat_index: 0, relevance: 0.5, logit: 0.0 },
                SelectedQuestion { chat_index: 2, relevance: 0.4, logit: (0.4f64 / 0.6).ln() },
            ],
            log_prob: 0.5f64.ln() + 0.4f64.ln(),
        };
        assert!((pair.probability() - 0.2).abs() < 1e-15);
        assert!((pair.log_prob.exp() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn kappa_above_candidates_fuses_all_chronologically() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = SelectorParams::init(&enc, &mut rng);
        let d = dialogue("qaqaqa");
        let sel = Selection { tau: 16, kappa: 5, exploration: 0.0 };
        let pair = select_questions(&p, &extracted(5), &d, &sel, &enc, &mut rng).unwrap().unwrap();
        let idx: Vec<usize> = pair.selected.iter().map(|s| s.chat_index).collect();
        assert_eq!(idx, vec![0, 2, 4]);
        let mut expected = d.chats[0].tokens.clone();
        for i in [2, 4] {
            expected.push(SEPARATOR_TOKEN.into());
            expected.extend(d.chats[i].tokens.iter().cloned());
        }
        assert_eq!(pair.question_tokens, expected);
        let lp: f64 = pair.selected.iter().map(|s| s.relevance.ln()).sum();
        assert!((lp - pair.log_prob).abs() < 1e-9);
        assert!(pair.log_prob <= 0.0);
    }

    #[test]
    fn no_candidates_skips() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = SelectorParams::init(&enc, &mut rng);
        let d = dialogue("aq");
        let sel = Selection { tau: 16, kappa: 5, exploration: 0.0 };
        assert!(select_questions(&p, &extracted(0), &d, &sel, &enc, &mut rng).unwrap().is_none());
    }

    #[test]
    fn selection_matches_exhaustive_sort() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let roles: String = std::iter::repeat_n('q', 32).chain(std::iter::once('a')).collect();
        let d = dialogue(&roles);
        for trial in 0..20 {
            let p = SelectorParams::init(&enc, &mut rng);
            let kappa = 1 + trial % 7;
            let picked = top_questions(&p, &d, 32, 32, kappa, &enc).unwrap();
            let mut all: Vec<(f64, usize)> = (0..32)
                .map(|i| (relevance(&p, &d.chats[32], &d.chats[i], 32, &enc).unwrap(), i))
                .collect();
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
            let mut expected: Vec<usize> = all[..kappa].iter().map(|x| x.1).collect();
            expected.sort_unstable();
            assert_eq!(picked, expected);
        }
    }

    #[test]
    fn selection_invariant_under_monotone_logit_transform() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = dialogue("qqqqqqqqa");
        let p = SelectorParams::init(&enc, &mut rng);
        // scaling and shifting the output layer is a strictly increasing map of every logit
        let mut q = p.clone();
        let out = q.scorer.layers.last_mut().unwrap();
        out.weight.iter_mut().for_each(|w| *w *= 3.0);
        out.bias[0] = out.bias[0] * 3.0 - 2.0;
        for kappa in 1..=8 {
            assert_eq!(
                top_questions(&p, &d, 8, 16, kappa, &enc).unwrap(),
                top_questions(&q, &d, 8, 16, kappa, &enc).unwrap()
            );
        }
    }

    #[test]
    fn exploration_swaps_in_an_unselected_candidate() {
        let enc = small_enc();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = SelectorParams::init(&enc, &mut rng);
        let d = dialogue("qqqqqa");
        let greedy = top_questions(&p, &d, 5, 16, 2, &enc).unwrap();
        let sel = Selection { tau: 16, kappa: 2, exploration: 1.0 };
        let pair = select_questions(&p, &extracted(5), &d, &sel, &enc, &mut rng).unwrap().unwrap();
        let idx: Vec<usize> = pair.selected.iter().map(|s| s.chat_index).collect();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.iter().filter(|i| greedy.contains(i)).count(), 1);
    }
}
