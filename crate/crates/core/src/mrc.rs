//! Span-prediction reader.
//!
//! Each document token gets a raw feature row built from hashed embeddings of
//! its width-3 window and its lexical agreement with the question. A tanh
//! projection turns rows into token vectors, and two linear heads give start
//! and end logits that are normalized by a softmax over the document.

use rand::Rng;

use crate::corpus::{Document, SEPARATOR_TOKEN};
use crate::error::{Error, Result};
use crate::nn::{embed, log_softmax, softmax, Block, Checkpoint, DenseParams, EmbeddingConfig, Linear, ParamSet};

/// Scalars appended to the window embedding: window/question cosine,
/// relative position, the question match of the previous, current and next
/// token, and the same three matches against the last question segment.
pub const SCALAR_FEATURES: usize = 8;
pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct MrcParams {
    pub enc: EmbeddingConfig,
    pub feature: DenseParams,
    pub start_head: DenseParams,
    pub end_head: DenseParams,
}

impl MrcParams {
    pub fn input_width(enc: &EmbeddingConfig) -> usize {
        enc.dim + SCALAR_FEATURES
    }

    pub fn init<R: Rng>(enc: EmbeddingConfig, hidden: usize, rng: &mut R) -> Self {
        MrcParams {
            feature: DenseParams::linear(Self::input_width(&enc), hidden, rng),
            start_head: DenseParams::linear(hidden, 1, rng),
            end_head: DenseParams::linear(hidden, 1, rng),
            enc,
        }
    }

    pub fn hidden(&self) -> usize {
        self.feature.output_width()
    }

    pub fn zeros_like(&self) -> Self {
        MrcParams {
            enc: self.enc,
            feature: self.feature.zeros_like(),
            start_head: self.start_head.zeros_like(),
            end_head: self.end_head.zeros_like(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("model".into(), "mrc".into());
        ck.meta.insert("enc.dim".into(), self.enc.dim.to_string());
        ck.meta.insert("enc.hash_seed".into(), self.enc.hash_seed.to_string());
        ck.meta.insert("hidden".into(), self.hidden().to_string());
        ck.blocks = self.blocks();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").map(String::as_str) != Some("mrc") {
            return Err(Error::Integrity("checkpoint does not hold a reader model".into()));
        }
        let enc = EmbeddingConfig {
            dim: ck.meta_value("enc.dim")?,
            hash_seed: ck.meta_value("enc.hash_seed")?,
        };
        enc.validate()?;
        let hidden: usize = ck.meta_value("hidden")?;
        let mut p = MrcParams {
            enc,
            feature: DenseParams { layers: vec![Linear::zeros(Self::input_width(&enc), hidden)] },
            start_head: DenseParams { layers: vec![Linear::zeros(hidden, 1)] },
            end_head: DenseParams { layers: vec![Linear::zeros(hidden, 1)] },
        };
        p.load_blocks(&ck.blocks)?;
        Ok(p)
    }
}

impl ParamSet for MrcParams {
    fn flat(&self) -> Vec<f64> {
        let mut v = self.feature.flat();
        v.extend(self.start_head.flat());
        v.extend(self.end_head.flat());
        v
    }

    fn set_flat(&mut self, values: &[f64]) {
        let a = self.feature.num_params();
        let b = a + self.start_head.num_params();
        self.feature.set_flat(&values[..a]);
        self.start_head.set_flat(&values[a..b]);
        self.end_head.set_flat(&values[b..]);
    }

    fn blocks(&self) -> Vec<Block> {
        let mut v = self.feature.named_blocks("mrc.feature");
        v.extend(self.start_head.named_blocks("mrc.start_head"));
        v.extend(self.end_head.named_blocks("mrc.end_head"));
        v
    }

    fn load_blocks(&mut self, blocks: &[Block]) -> Result<()> {
        self.feature.load_named("mrc.feature", blocks)?;
        self.start_head.load_named("mrc.start_head", blocks)?;
        self.end_head.load_named("mrc.end_head", blocks)
    }
}

/// Signed hash bucket of one token, as a one-entry sparse vector.
type Sparse = Vec<(usize, f64)>;

fn sparse(tokens: &[&str], enc: &EmbeddingConfig) -> Sparse {
    embed(tokens, enc)
        .values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| (i, *v))
        .collect()
}

fn sparse_dot(s: &Sparse, dense: &[f64]) -> f64 {
    s.iter().map(|&(i, v)| v * dense[i]).sum()
}

/// Question-independent per-token data of one document.
#[derive(Clone, Debug)]
pub struct DocumentFeatures {
    /// Offset-tagged window embedding per token.
    windows: Vec<Vec<f64>>,
    /// Plain window bag per token, for the question cosine.
    bags: Vec<Sparse>,
    tokens: Vec<Sparse>,
}

impl DocumentFeatures {
    pub fn new(doc: &Document, enc: &EmbeddingConfig) -> Result<Self> {
        let t = doc.tokens.len();
        if t == 0 {
            return Err(Error::Precondition(format!("document {} has no tokens", doc.id)));
        }
        let tok = |i: isize| -> &str {
            if i < 0 {
                "<bos>"
            } else if i as usize >= t {
                "<eos>"
            } else {
                &doc.tokens[i as usize]
            }
        };
        let mut windows = Vec::with_capacity(t);
        let mut bags = Vec::with_capacity(t);
        let mut tokens = Vec::with_capacity(t);
        for i in 0..t as isize {
            let tagged = [
                format!("l:{}", tok(i - 1)),
                format!("c:{}", tok(i)),
                format!("r:{}", tok(i + 1)),
            ];
            windows.push(embed(&tagged, enc).values);
            let lo = (i - 1).max(0) as usize;
            let hi = ((i + 1) as usize).min(t - 1);
            let bag: Vec<&str> = doc.tokens[lo..=hi].iter().map(String::as_str).collect();
            bags.push(sparse(&bag, enc));
            tokens.push(sparse(&[tok(i)], enc));
        }
        Ok(DocumentFeatures { windows, bags, tokens })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Raw input rows for a (document, question) pair. A fused question's
    /// last segment is the text after its final separator token.
    pub fn with_question<S: AsRef<str>>(&self, question: &[S], enc: &EmbeddingConfig) -> MrcInput {
        let q = embed(question, enc).values;
        let last_start = question
            .iter()
            .rposition(|t| t.as_ref() == SEPARATOR_TOKEN)
            .map_or(0, |i| i + 1);
        let q_last = embed(&question[last_start..], enc).values;
        let t = self.len();
        let norm = |s: &Sparse| s.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
        let cos_with = |s: &Sparse, q: &[f64]| {
            let n = norm(s);
            if n == 0.0 {
                0.0
            } else {
                sparse_dot(s, q) / n
            }
        };
        let cos = |s: &Sparse| cos_with(s, &q);
        let matches: Vec<f64> = self.tokens.iter().map(cos).collect();
        let last: Vec<f64> = self.tokens.iter().map(|s| cos_with(s, &q_last)).collect();
        let rows = (0..t)
            .map(|i| {
                let mut row = Vec::with_capacity(enc.dim + SCALAR_FEATURES);
                row.extend_from_slice(&self.windows[i]);
                row.push(cos(&self.bags[i]));
                row.push(if t > 1 { i as f64 / (t - 1) as f64 } else { 0.0 });
                row.push(if i > 0 { matches[i - 1] } else { 0.0 });
                row.push(matches[i]);
                row.push(if i + 1 < t { matches[i + 1] } else { 0.0 });
                row.push(if i > 0 { last[i - 1] } else { 0.0 });
                row.push(last[i]);
                row.push(if i + 1 < t { last[i + 1] } else { 0.0 });
                row
            })
            .collect();
        MrcInput { rows }
    }
}

/// One raw feature row per document token.
#[derive(Clone, Debug, PartialEq)]
pub struct MrcInput {
    pub rows: Vec<Vec<f64>>,
}

/// Per-token feature vectors for `question` against `doc`.
pub fn encode<S: AsRef<str>>(params: &MrcParams, doc: &Document, question: &[S]) -> Result<Vec<Vec<f64>>> {
    let input = DocumentFeatures::new(doc, &params.enc)?.with_question(question, &params.enc);
    encode_input(params, &input)
}

pub fn encode_input(params: &MrcParams, input: &MrcInput) -> Result<Vec<Vec<f64>>> {
    input
        .rows
        .iter()
        .map(|x| {
            let (z, _) = params.feature.forward(x)?;
            Ok(z.into_iter().map(f64::tanh).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanDistributions {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

fn head_logits(head: &DenseParams, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    features.iter().map(|v| Ok(head.forward(v)?.0[0])).collect()
}

pub fn span_logits(params: &MrcParams, features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if features.is_empty() {
        return Err(Error::Precondition("no token features".into()));
    }
    Ok((head_logits(&params.start_head, features)?, head_logits(&params.end_head, features)?))
}

pub fn span_probs(params: &MrcParams, features: &[Vec<f64>]) -> Result<SpanDistributions> {
    let (s, e) = span_logits(params, features)?;
    Ok(SpanDistributions {
        start: softmax(&s),
        end: softmax(&e),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanLabels {
    pub start: usize,
    pub end: usize,
}

/// `-ln P^s[start] - ln P^e[end]`.
pub fn cross_entropy(dists: &SpanDistributions, labels: SpanLabels) -> f64 {
    -dists.start[labels.start].ln() - dists.end[labels.end].ln()
}

/// A prepared training example.
#[derive(Clone, Debug)]
pub struct MrcExample {
    pub input: MrcInput,
    pub labels: SpanLabels,
}

impl MrcExample {
    pub fn new<S: AsRef<str>>(doc: &Document, question: &[S], labels: SpanLabels, enc: &EmbeddingConfig) -> Result<Self> {
        let input = DocumentFeatures::new(doc, enc)?.with_question(question, enc);
        MrcExample::from_input(input, labels)
    }

    pub fn from_input(input: MrcInput, labels: SpanLabels) -> Result<Self> {
        let t = input.rows.len();
        if labels.start > labels.end || labels.end >= t {
            return Err(Error::Precondition(format!(
                "span labels ({}, {}) invalid for a {t}-token document",
                labels.start, labels.end
            )));
        }
        Ok(MrcExample { input, labels })
    }
}

/// Per-example cross entropy of the start and end distributions, averaged
/// over the batch, with the analytic gradient.
pub fn mrc_loss_and_grad(params: &MrcParams, batch: &[MrcExample]) -> Result<(f64, MrcParams)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let t = ex.input.rows.len();
        if ex.labels.start > ex.labels.end || ex.labels.end >= t {
            return Err(Error::Precondition("span labels out of range".into()));
        }
        let mut caches = Vec::with_capacity(t);
        let mut v = Vec::with_capacity(t);
        for x in &ex.input.rows {
            let (z, cache) = params.feature.forward(x)?;
            v.push(z.into_iter().map(f64::tanh).collect::<Vec<f64>>());
            caches.push(cache);
        }
        let (ls, le) = span_logits(params, &v)?;
        let (lps, lpe) = (log_softmax(&ls), log_softmax(&le));
        total += -(lps[ex.labels.start] + lpe[ex.labels.end]);

        let ws = &params.start_head.layers[0].weight;
        let we = &params.end_head.layers[0].weight;
        let gs = &mut grad.start_head.layers[0];
        let ge = &mut grad.end_head.layers[0];
        for i in 0..t {
            let ds = scale * (lps[i].exp() - f64::from(u8::from(i == ex.labels.start)));
            let de = scale * (lpe[i].exp() - f64::from(u8::from(i == ex.labels.end)));
            gs.bias[0] += ds;
            ge.bias[0] += de;
            let vi = &v[i];
            let mut dz = vec![0.0; vi.len()];
            for h in 0..vi.len() {
                gs.weight[h] += ds * vi[h];
                ge.weight[h] += de * vi[h];
                dz[h] = (ds * ws[h] + de * we[h]) * (1.0 - vi[h] * vi[h]);
            }
            params.feature.backward_into(&caches[i], &dz, &mut grad.feature)?;
        }
    }
    Ok((total * scale, grad))
}

/// Mean loss without gradients.
pub fn mrc_loss(params: &MrcParams, batch: &[MrcExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let v = encode_input(params, &ex.input)?;
        total += cross_entropy(&span_probs(params, &v)?, ex.labels);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictedSpan {
    pub start: usize,
    pub end: usize,
}

/// Highest `P^s[s] * P^e[e]` over `s <= e <= s + max_len - 1`; ties keep the
/// smaller start, then the smaller end.
pub fn predict_span(dists: &SpanDistributions, max_len: usize) -> PredictedSpan {
    let t = dists.start.len();
    let max_len = max_len.max(1);
    let mut best = (0, 0, f64::NEG_INFINITY);
    for s in 0..t {
        for e in s..(s + max_len).min(t) {
            let p = dists.start[s] * dists.end[e];
            if p > best.2 {
                best = (s, e, p);
            }
        }
    }
    PredictedSpan {
        start: best.0,
        end: best.1,
    }
}

/// Independent argmax of start and end; may produce `end < start`.
pub fn predict_span_independent(dists: &SpanDistributions) -> (usize, usize) {
    let argmax = |p: &[f64]| {
        p.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0
    };
    (argmax(&dists.start), argmax(&dists.end))
}

/// Decoding rule for turning distributions into answer tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Joint argmax over well-formed spans of bounded length.
    #[default]
    Constrained,
    /// Separate argmaxes; an inverted pair decodes to no tokens.
    Independent,
}

/// Runs the reader on one input and returns the predicted span (if well formed) with its
/// confidence `P^s[s] * P^e[e]`.
pub fn predict(params: &MrcParams, input: &MrcInput, max_len: usize, decoding: Decoding) -> Result<(Option<PredictedSpan>, f64)> {
    let v = encode_input(params, input)?;
    let d = span_probs(params, &v)?;
    Ok(match decoding {
        Decoding::Constrained => {
            let p = predict_span(&d, max_len);
            (Some(p), d.start[p.start] * d.end[p.end])
        }
        Decoding::Independent => {
            let (s, e) = predict_span_independent(&d);
            let conf = d.start[s] * d.end[e];
            ((s <= e).then_some(PredictedSpan { start: s, end: e }), conf)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc() -> EmbeddingConfig {
        EmbeddingConfig { dim: 16, hash_seed: 7 }
    }

    fn doc() -> Document {
        Document::new("d", "tok0001 tok0010 tok0011 tok0002 tok0012 tok0013")
    }

    #[test]
    fn encode_shape_bag_invariance_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MrcParams::init(enc(), 8, &mut rng);
        let f = encode(&p, &doc(), &["what", "tok0010", "tok0011"]).unwrap();
        assert_eq!(f.len(), 6);
        assert_eq!(f[0].len(), 8);
        let g = encode(&p, &doc(), &["tok0011", "what", "tok0010"]).unwrap();
        assert_eq!(f, g);
        assert_eq!(f, encode(&p, &doc(), &["what", "tok0010", "tok0011"]).unwrap());
        let empty = Document::new("e", " ");
        assert!(matches!(encode(&p, &empty, &["x"]), Err(Error::Precondition(_))));
    }

    #[test]
    fn match_features_mark_question_tokens() {
        let df = DocumentFeatures::new(&doc(), &enc()).unwrap();
        let input = df.with_question(&["tok0010"], &enc());
        let m = enc().dim + 3;
        assert!((input.rows[1][m] - 1.0).abs() < 1e-12);
        assert!((input.rows[0][m + 1] - 1.0).abs() < 1e-12);
        assert!((input.rows[2][m - 1] - 1.0).abs() < 1e-12);
        // a single question is its own last segment
        assert_eq!(input.rows[1][m + 3], input.rows[1][m]);

        let fused = df.with_question(&["tok0010", SEPARATOR_TOKEN, "tok0012"], &enc());
        assert!(fused.rows[1][m] > 0.0 && fused.rows[4][m] > 0.0);
        assert_eq!(fused.rows[1][m + 3], 0.0);
        assert!((fused.rows[4][m + 3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_heads_give_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = MrcParams::init(enc(), 8, &mut rng);
        p.start_head = p.start_head.zeros_like();
        p.end_head = p.end_head.zeros_like();
        let f = encode(&p, &doc(), &["tok0010"]).unwrap();
        let d = span_probs(&p, &f).unwrap();
        for x in d.start.iter().chain(&d.end) {
            assert!((x - 1.0 / 6.0).abs() < 1e-15);
        }
        let ex = MrcExample::new(&doc(), &["tok0010"], SpanLabels { start: 1, end: 2 }, &enc()).unwrap();
        let (loss, _) = mrc_loss_and_grad(&p, &[ex]).unwrap();
        assert!((loss - 2.0 * 6f64.ln()).abs() < 1e-12);
        assert_eq!(predict_span(&d, 7), PredictedSpan { start: 0, end: 0 });
    }

    #[test]
    fn distributions_normalize_and_ignore_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = MrcParams::init(enc(), 8, &mut rng);
        let f = encode(&p, &doc(), &["tok0002"]).unwrap();
        let d = span_probs(&p, &f).unwrap();
        assert!((d.start.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((d.end.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        p.start_head.layers[0].bias[0] += 5.0;
        let d2 = span_probs(&p, &f).unwrap();
        for (a, b) in d.start.iter().zip(&d2.start) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(matches!(
            MrcExample::new(&doc(), &["x"], SpanLabels { start: 2, end: 6 }, &enc()),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            MrcExample::new(&doc(), &["x"], SpanLabels { start: 3, end: 2 }, &enc()),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn peaked_predictions_have_vanishing_loss() {
        let mut start = vec![1e-12; 6];
        start[2] = 1.0 - 5e-12;
        let mut end = vec![1e-12; 6];
        end[4] = 1.0 - 5e-12;
        let d = SpanDistributions { start, end };
        let ce = cross_entropy(&d, SpanLabels { start: 2, end: 4 });
        assert!(ce > 0.0 && ce < 1e-10);
    }

    fn peaked(t: usize, at: usize, mass: f64) -> Vec<f64> {
        let mut v = vec![(1.0 - mass) / (t - 1) as f64; t];
        v[at] = mass;
        v
    }

    #[test]
    fn decode_examples() {
        let d = SpanDistributions { start: peaked(10, 2, 0.99), end: peaked(10, 5, 0.99) };
        assert_eq!(predict_span(&d, 7), PredictedSpan { start: 2, end: 5 });
        let d = SpanDistributions { start: peaked(10, 5, 0.9), end: peaked(10, 2, 0.8) };
        let p = predict_span(&d, 7);
        assert!(p.start <= p.end);
        // the start peak dominates the small end mass everywhere after it
        assert_eq!(p, PredictedSpan { start: 5, end: 5 });
        assert_eq!(predict_span_independent(&d), (5, 2));
    }

    #[test]
    fn overfitting_one_sample_lowers_loss_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = MrcParams::init(enc(), 8, &mut rng);
        let ex = MrcExample::new(&doc(), &["tok0011", "tok0002"], SpanLabels { start: 2, end: 3 }, &enc()).unwrap();
        let batch = [ex];
        let mut adam = Adam::new(0.01, p.num_params());
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let (loss, g) = mrc_loss_and_grad(&p, &batch).unwrap();
            assert!(loss < last, "step {step}: {loss} >= {last}");
            last = loss;
            adam.update(&mut p, &g).unwrap();
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        for trial in 0..100 {
            let p = MrcParams::init(enc(), 4, &mut rng);
            let batch: Vec<MrcExample> = (0..2)
                .map(|_| {
                    let t = rng.gen_range(3..9);
                    let words: Vec<String> = (0..t).map(|_| format!("tok{:04}", rng.gen_range(0..12))).collect();
                    let d = Document::new("d", words.join(" "));
                    let q: Vec<String> = (0..3).map(|_| format!("tok{:04}", rng.gen_range(0..12))).collect();
                    let s = rng.gen_range(0..t);
                    let e = rng.gen_range(s..t);
                    MrcExample::new(&d, &q, SpanLabels { start: s, end: e }, &enc()).unwrap()
                })
                .collect();
            let (_, grad) = mrc_loss_and_grad(&p, &batch).unwrap();
            let grad = grad.flat();
            let theta = p.flat();
            for _ in 0..8 {
                let i = rng.gen_range(0..theta.len());
                let mut q = p.clone();
                let mut t = theta.clone();
                t[i] = theta[i] + h;
                q.set_flat(&t);
                let up = mrc_loss(&q, &batch).unwrap();
                t[i] = theta[i] - h;
                q.set_flat(&t);
                let down = mrc_loss(&q, &batch).unwrap();
                let fd = (up - down) / (2.0 * h);
                assert!(rel_err(grad[i], fd) <= 1e-4, "trial {trial} param {i}: {} vs {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MrcParams::init(enc(), 8, &mut rng);
        let ck = Checkpoint::from_reader(&p.to_checkpoint().to_bytes()[..]).unwrap();
        assert_eq!(MrcParams::from_checkpoint(&ck).unwrap(), p);
    }
}
