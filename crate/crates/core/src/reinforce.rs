//! Reinforced self-training of the question selector.
//!
//! The reader decodes an answer for each pseudo question; the token F1 of that
//! answer against the pseudo answer span is the reward. The selector is then
//! pushed along `advantage * grad log R` for every question it selected,
//! where `advantage = reward - baseline` is held constant.

use crate::corpus::{Corpus, Document};
use crate::error::{Error, Result};
use crate::mrc::{predict, Decoding, DocumentFeatures, MrcParams};
use crate::nn::{log_sigmoid, sigmoid, EmbeddingConfig};
use crate::question_selector::{pair_features, PseudoPair, SelectorParams};
use crate::text::{token_f1, TokenSpan};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RewardRecord {
    /// `None` when decoding produced no well-formed span.
    pub predicted_span: Option<TokenSpan>,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardSettings {
    pub baseline: f64,
    pub max_len: usize,
    pub decoding: Decoding,
}

/// Reward of one pseudo pair under a frozen reader.
pub fn compute_reward(pair: &PseudoPair, mrc: &MrcParams, corpus: &Corpus, settings: &RewardSettings) -> Result<RewardRecord> {
    let doc_id = pair.answer.document_id();
    let doc = corpus
        .document(doc_id)
        .ok_or_else(|| Error::Integrity(format!("pseudo pair refers to missing document {doc_id}")))?;
    let features = DocumentFeatures::new(doc, &mrc.enc)?;
    compute_reward_with(pair, mrc, doc, &features, settings)
}

/// Same as [`compute_reward`] with the document features already built.
pub fn compute_reward_with(
    pair: &PseudoPair,
    mrc: &MrcParams,
    doc: &Document,
    features: &DocumentFeatures,
    settings: &RewardSettings,
) -> Result<RewardRecord> {
    let input = features.with_question(&pair.question_tokens, &mrc.enc);
    let (span, _) = predict(mrc, &input, settings.max_len, settings.decoding)?;
    let gold = pair.answer.answer_span.slice(&doc.tokens);
    let (predicted_span, reward) = match span {
        Some(p) => {
            let ts = TokenSpan::new(doc.id.clone(), p.start, p.end);
            let r = token_f1(ts.slice(&doc.tokens), gold);
            (Some(ts), r)
        }
        None => (None, 0.0),
    };
    Ok(RewardRecord {
        predicted_span,
        reward,
        advantage: reward - settings.baseline,
    })
}

/// Mean of all rewards seen so far; starts at `initial`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunningBaseline {
    pub mean: f64,
    pub count: u64,
}

impl RunningBaseline {
    pub fn new(initial: f64) -> Self {
        RunningBaseline { mean: initial, count: 0 }
    }

    pub fn observe(&mut self, reward: f64) {
        self.count += 1;
        self.mean += (reward - self.mean) / self.count as f64;
    }
}

/// Feature rows of the selected questions plus the fixed advantage.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySample {
    pub features: Vec<Vec<f64>>,
    pub advantage: f64,
}

/// Rebuilds selector inputs for a pseudo pair from the corpus.
pub fn policy_sample(pair: &PseudoPair, advantage: f64, corpus: &Corpus, tau: usize, enc: &EmbeddingConfig) -> Result<PolicySample> {
    let dlg = corpus
        .dialogue(&pair.dialogue_id)
        .ok_or_else(|| Error::Integrity(format!("pseudo pair refers to missing dialogue {}", pair.dialogue_id)))?;
    let chat = |i: usize| {
        dlg.chats
            .get(i)
            .ok_or_else(|| Error::Integrity(format!("chat {i} missing from dialogue {}", dlg.id)))
    };
    let answer = chat(pair.answer.chat_index)?;
    let features = pair
        .selected
        .iter()
        .map(|s| Ok(pair_features(answer, chat(s.chat_index)?, tau, enc)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PolicySample { features, advantage })
}

/// `-(1/N) * sum_i advantage_i * sum_selected log R`, with its gradient.
pub fn qs_loss_and_grad(params: &SelectorParams, samples: &[PolicySample]) -> Result<(f64, SelectorParams)> {
    if samples.is_empty() {
        return Err(Error::Precondition("no policy samples".into()));
    }
    let n = samples.len() as f64;
    let mut grad = SelectorParams {
        scorer: params.scorer.zeros_like(),
    };
    let mut loss = 0.0;
    for s in samples {
        if s.features.is_empty() {
            return Err(Error::Precondition("policy sample selected no questions".into()));
        }
        if s.advantage == 0.0 {
            continue;
        }
        for x in &s.features {
            let (out, cache) = params.scorer.forward(x)?;
            let h = out[0];
            loss -= s.advantage * log_sigmoid(h) / n;
            // d/dh log sigmoid(h) = 1 - sigmoid(h)
            let g = -s.advantage * (1.0 - sigmoid(h)) / n;
            params.scorer.backward_into(&cache, &[g], &mut grad.scorer)?;
        }
    }
    Ok((loss, grad))
}

/// Loss only.
pub fn qs_loss(params: &SelectorParams, samples: &[PolicySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("no policy samples".into()));
    }
    let mut loss = 0.0;
    for s in samples {
        for x in &s.features {
            loss -= s.advantage * log_sigmoid(params.logit(x)?);
        }
    }
    Ok(loss / samples.len() as f64)
}

/// Sum of log relevances over a sample's selected questions.
pub fn sample_log_prob(params: &SelectorParams, sample: &PolicySample) -> Result<f64> {
    sample.features.iter().map(|x| Ok(log_sigmoid(params.logit(x)?))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer_extractor::ExtractedAnswer;
    use crate::nn::{Adam, ParamSet};
    use crate::question_selector::SelectedQuestion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn enc() -> EmbeddingConfig {
        EmbeddingConfig { dim: 8, hash_seed: 3 }
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<PolicySample> {
        let w = SelectorParams::feature_width(&enc());
        (0..n)
            .map(|_| PolicySample {
                features: (0..k).map(|_| (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
                advantage: rng.gen_range(-0.7..0.3),
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let params = SelectorParams::init(&enc(), &mut rng);
            let samples = random_samples(&mut rng, 2, 2);
            let (_, g) = qs_loss_and_grad(&params, &samples).unwrap();
            let flat = params.flat();
            let gf = g.flat();
            for _ in 0..6 {
                let i = rng.gen_range(0..flat.len());
                let mut p = params.clone();
                let mut v = flat.clone();
                v[i] += 1e-5;
                p.set_flat(&v);
                let up = qs_loss(&p, &samples).unwrap();
                v[i] -= 2e-5;
                p.set_flat(&v);
                let down = qs_loss(&p, &samples).unwrap();
                let fd = (up - down) / 2e-5;
                assert!(rel_err(gf[i], fd) <= 1e-4, "trial {trial} param {i}: {} vs {fd}", gf[i]);
            }
        }
    }

    #[test]
    fn zero_advantage_gives_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = SelectorParams::init(&enc(), &mut rng);
        let mut samples = random_samples(&mut rng, 3, 2);
        for s in &mut samples {
            s.advantage = 0.0;
        }
        let (loss, g) = qs_loss_and_grad(&params, &samples).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn empty_inputs_rejected() {
        let params = SelectorParams::zeros(&enc());
        assert!(matches!(qs_loss_and_grad(&params, &[]), Err(Error::Precondition(_))));
        let s = PolicySample { features: vec![], advantage: 0.5 };
        assert!(matches!(qs_loss_and_grad(&params, &[s]), Err(Error::Precondition(_))));
    }

    #[test]
    fn sign_flip_flips_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = SelectorParams::init(&enc(), &mut rng);
        let mut s = random_samples(&mut rng, 1, 2);
        s[0].advantage = 0.3;
        let (_, g1) = qs_loss_and_grad(&params, &s).unwrap();
        s[0].advantage = -0.3;
        let (_, g2) = qs_loss_and_grad(&params, &s).unwrap();
        for (a, b) in g1.flat().iter().zip(g2.flat()) {
            assert!((a + b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = SelectorParams::init(&enc(), &mut rng);
        let samples = random_samples(&mut rng, 6, 3);
        let mut rev = samples.clone();
        rev.reverse();
        let (a, _) = qs_loss_and_grad(&params, &samples).unwrap();
        let (b, _) = qs_loss_and_grad(&params, &rev).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn positive_advantage_step_raises_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        for _ in 0..20 {
            let mut params = SelectorParams::init(&enc(), &mut rng);
            let mut samples = random_samples(&mut rng, 1, 2);
            samples[0].advantage = 0.3;
            let before = sample_log_prob(&params, &samples[0]).unwrap();
            let (_, g) = qs_loss_and_grad(&params, &samples).unwrap();
            let mut adam = Adam::new(1e-4, params.num_params());
            adam.update(&mut params, &g).unwrap();
            assert!(sample_log_prob(&params, &samples[0]).unwrap() > before);
        }
    }

    #[test]
    fn running_baseline_tracks_mean() {
        let mut b = RunningBaseline::new(0.7);
        assert_eq!(b.mean, 0.7);
        for r in [1.0, 0.0, 0.5] {
            b.observe(r);
        }
        assert!((b.mean - 0.5).abs() < 1e-15);
    }

    fn pair_over(doc: &Document, start: usize, end: usize) -> PseudoPair {
        PseudoPair {
            dialogue_id: "dlg".into(),
            answer: ExtractedAnswer {
                answer_span: TokenSpan::new(doc.id.clone(), start, end),
                dialogue_id: "dlg".into(),
                chat_index: 1,
                score: 1.0,
            },
            question_tokens: vec!["tok0010".into()],
            selected: vec![SelectedQuestion { chat_index: 0, relevance: 0.5, logit: 0.0 }],
            log_prob: 0.5f64.ln(),
        }
    }

    #[test]
    fn reward_examples() {
        let doc = Document::new("d", "tok0001 tok0010 tok0011 tok0002 tok0012 tok0013");
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut mrc = MrcParams::init(enc(), 4, &mut rng);
        // heads that ignore every token: uniform, decodes (0, 0)
        mrc.start_head = mrc.start_head.zeros_like();
        mrc.end_head = mrc.end_head.zeros_like();
        let f = DocumentFeatures::new(&doc, &mrc.enc).unwrap();
        let settings = RewardSettings { baseline: 0.7, max_len: 7, decoding: Decoding::Constrained };
        let hit = compute_reward_with(&pair_over(&doc, 0, 0), &mrc, &doc, &f, &settings).unwrap();
        assert_eq!(hit.reward, 1.0);
        assert!((hit.advantage - 0.3).abs() < 1e-15);
        let miss = compute_reward_with(&pair_over(&doc, 3, 4), &mrc, &doc, &f, &settings).unwrap();
        assert_eq!(miss.reward, 0.0);
        assert_eq!(miss.advantage, -0.7);

        let empty = Corpus::default();
        assert!(matches!(
            compute_reward(&pair_over(&doc, 0, 0), &mrc, &empty, &settings),
            Err(Error::Integrity(_))
        ));
    }
}
