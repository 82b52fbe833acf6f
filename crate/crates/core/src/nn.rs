//! Numerical building blocks: signed feature hashing, cosine similarity,
//! small tanh networks with hand-written backward passes, Adam, and the
//! parameter checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub hash_seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 256,
            hash_seed: 0x9e37_79b9,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(Error::Config("embedding dim must be at least 8".into()));
        }
        Ok(())
    }
}

/// L2-normalized hashed bag of tokens. `empty` marks the all-zero vector of an empty input.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub empty: bool,
}

fn bucket(token: &str, cfg: &EmbeddingConfig) -> (usize, f64) {
    let mut h = FnvHasher::default();
    h.write_u64(cfg.hash_seed);
    h.write(token.as_bytes());
    let x = h.finish();
    let coord = (x % cfg.dim as u64) as usize;
    let sign = if x >> 63 == 0 { 1.0 } else { -1.0 };
    (coord, sign)
}

pub fn embed<S: AsRef<str>>(tokens: &[S], cfg: &EmbeddingConfig) -> Embedding {
    let mut values = vec![0.0; cfg.dim];
    for t in tokens {
        let (i, s) = bucket(t.as_ref(), cfg);
        values[i] += s;
    }
    let norm = l2_norm(&values);
    if norm > 0.0 {
        values.iter_mut().for_each(|v| *v /= norm);
    }
    Embedding {
        values,
        empty: tokens.is_empty(),
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Precondition(format!(
            "cosine of vectors with different dims {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without underflow for large negative `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `ln softmax(logits)[i]` for every i.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

// ---------------------------------------------------------------------------
// Dense networks
// ---------------------------------------------------------------------------

/// `y = W x + b` with `W` stored row-major as `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..=bound);
        Linear {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| draw()).collect(),
            bias: (0..outputs).map(|_| draw()).collect(),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        for (o, y) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            *y += dot(row, x);
        }
        y
    }
}

/// Stack of linear layers with tanh between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub layers: Vec<Linear>,
}

/// Layer inputs recorded by the forward pass. `inputs[0]` is the network input.
#[derive(Clone, Debug)]
pub struct DenseCache {
    inputs: Vec<Vec<f64>>,
}

impl DenseParams {
    pub fn linear<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        DenseParams {
            layers: vec![Linear::init(inputs, outputs, rng)],
        }
    }

    pub fn mlp<R: Rng>(inputs: usize, hidden: usize, outputs: usize, rng: &mut R) -> Self {
        DenseParams {
            layers: vec![Linear::init(inputs, hidden, rng), Linear::init(hidden, outputs, rng)],
        }
    }

    pub fn zeros_like(&self) -> Self {
        DenseParams {
            layers: self.layers.iter().map(|l| Linear::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("at least one layer").outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Precondition(format!(
                "network expects {} inputs, got {}",
                self.input_width(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, DenseCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&a);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        Ok((a, DenseCache { inputs }))
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward_into(&self, cache: &DenseCache, output_grad: &[f64], grad: &mut DenseParams) -> Result<Vec<f64>> {
        if output_grad.len() != self.output_width() {
            return Err(Error::Precondition(format!(
                "output gradient has {} entries, network emits {}",
                output_grad.len(),
                self.output_width()
            )));
        }
        let mut delta = output_grad.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            let x = &cache.inputs[l];
            let mut dx = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = o * layer.inputs;
                for i in 0..layer.inputs {
                    g.weight[row + i] += d * x[i];
                    dx[i] += d * layer.weight[row + i];
                }
            }
            if l > 0 {
                // x is tanh output of the previous layer
                for (d, &a) in dx.iter_mut().zip(x) {
                    *d *= 1.0 - a * a;
                }
            }
            delta = dx;
        }
        Ok(delta)
    }

    pub fn backward(&self, cache: &DenseCache, output_grad: &[f64]) -> Result<(DenseParams, Vec<f64>)> {
        let mut grad = self.zeros_like();
        let input_grad = self.backward_into(cache, output_grad, &mut grad)?;
        Ok((grad, input_grad))
    }
}

/// A parameter container with a flat vector view.
pub trait ParamSet {
    fn flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, values: &[f64]);

    fn num_params(&self) -> usize {
        self.flat().len()
    }

    /// Named arrays with shapes, for checkpoints.
    fn blocks(&self) -> Vec<Block>;
    fn load_blocks(&mut self, blocks: &[Block]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseParams {
    pub fn named_blocks(&self, prefix: &str) -> Vec<Block> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(Block {
                name: format!("{prefix}.{l}.weight"),
                shape: vec![layer.outputs, layer.inputs],
                data: layer.weight.clone(),
            });
            out.push(Block {
                name: format!("{prefix}.{l}.bias"),
                shape: vec![layer.outputs],
                data: layer.bias.clone(),
            });
        }
        out
    }

    /// Loads `{prefix}.{l}.weight|bias` blocks into a network of the same shape.
    pub fn load_named(&mut self, prefix: &str, blocks: &[Block]) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (suffix, expected, target) in [
                ("weight", vec![layer.outputs, layer.inputs], &mut layer.weight),
                ("bias", vec![layer.outputs], &mut layer.bias),
            ] {
                let name = format!("{prefix}.{l}.{suffix}");
                let block = blocks
                    .iter()
                    .find(|b| b.name == name)
                    .ok_or_else(|| Error::Integrity(format!("checkpoint lacks block {name}")))?;
                if block.shape != expected {
                    return Err(Error::Integrity(format!(
                        "block {name} has shape {:?}, expected {:?}",
                        block.shape, expected
                    )));
                }
                target.copy_from_slice(&block.data);
            }
        }
        Ok(())
    }
}

impl ParamSet for DenseParams {
    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(DenseParams::num_params(self));
        for l in &self.layers {
            v.extend_from_slice(&l.weight);
            v.extend_from_slice(&l.bias);
        }
        v
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&values[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[at..at + nb]);
            at += nb;
        }
    }

    fn num_params(&self) -> usize {
        DenseParams::num_params(self)
    }

    fn blocks(&self) -> Vec<Block> {
        self.named_blocks("dense")
    }

    fn load_blocks(&mut self, blocks: &[Block]) -> Result<()> {
        self.load_named("dense", blocks)
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Precondition(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} at parameter {i} (step {})",
                grads[i], self.step
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Steps a whole parameter set.
    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut flat = params.flat();
        self.step(&mut flat, &grads.flat())?;
        params.set_flat(&flat);
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &str = "rmrc-params 1";

/// Text header (`meta` and `block` lines, closed by `data`) followed by the
/// blocks' little-endian f64 values in header order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta
            .get(key)
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks meta key {key}")))?
            .parse()
            .map_err(|_| Error::Integrity(format!("checkpoint meta key {key} is malformed")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.meta {
            out.extend_from_slice(format!("meta {k} {v}\n").as_bytes());
        }
        for b in &self.blocks {
            let dims: Vec<String> = b.shape.iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("block {} {}\n", b.name, dims.join(" ")).as_bytes());
        }
        out.extend_from_slice(b"data\n");
        for b in &self.blocks {
            for x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_reader<R: BufRead>(mut r: R) -> Result<Self> {
        let mut ck = Checkpoint::default();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut line_no = 0;
        loop {
            let mut line = String::new();
            line_no += 1;
            let n = r.read_line(&mut line).map_err(|e| Error::io("<checkpoint>", e))?;
            if n == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    message: "checkpoint header ended without a data line".into(),
                });
            }
            let line = line.trim_end_matches('\n');
            let parse_err = |m: &str| Error::Parse {
                line: line_no,
                message: m.to_owned(),
            };
            if line_no == 1 {
                if line != MAGIC {
                    return Err(parse_err("not a parameter checkpoint"));
                }
                continue;
            }
            if line == "data" {
                break;
            }
            let mut parts = line.split(' ');
            match parts.next() {
                Some("meta") => {
                    let key = parts.next().ok_or_else(|| parse_err("meta line without key"))?;
                    let value: Vec<&str> = parts.collect();
                    ck.meta.insert(key.to_owned(), value.join(" "));
                }
                Some("block") => {
                    let name = parts.next().ok_or_else(|| parse_err("block line without name"))?;
                    let shape = parts
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| parse_err("block shape must be integers"))?;
                    shapes.push((name.to_owned(), shape));
                }
                _ => return Err(parse_err("unknown header line")),
            }
        }
        let mut buf = [0u8; 8];
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Integrity(format!("checkpoint data truncated in block {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            ck.blocks.push(Block { name, shape, data });
        }
        if r.read(&mut buf).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
            return Err(Error::Integrity("trailing bytes after checkpoint data".into()));
        }
        Ok(ck)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_reader(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn embedding_properties() {
        let cfg = EmbeddingConfig::default();
        let a = embed(&toks("tok0001 tok0002 tok0001"), &cfg);
        let b = embed(&toks("tok0001 tok0002 tok0001"), &cfg);
        assert_eq!(a, b);
        assert!((l2_norm(&a.values) - 1.0).abs() < 1e-12);
        assert!(!a.empty);
        let e = embed::<String>(&[], &cfg);
        assert!(e.empty);
        assert!(e.values.iter().all(|&v| v == 0.0));
        assert!(matches!(EmbeddingConfig { dim: 4, hash_seed: 0 }.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_examples() {
        let u = [0.6, 0.8, 0.0];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&u, &[0.0; 3]).unwrap(), 0.0);
        assert!(matches!(cosine(&u, &[1.0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn softmax_and_sigmoid() {
        let p = softmax(&[0.0; 5]);
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(sigmoid(0.0), 0.5);
        let z = [1.0, -2.0, 3.5, 0.25];
        let shifted: Vec<f64> = z.iter().map(|x| x + 17.0).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!((softmax(&[1000.0, 0.0])[0] - 1.0).abs() < 1e-12);
        for x in [-800.0, -3.0, 0.0, 2.0, 40.0] {
            let direct = sigmoid(x).ln();
            if direct.is_finite() {
                assert!((log_sigmoid(x) - direct).abs() < 1e-12);
            }
        }
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        let ls = log_softmax(&z);
        for (l, p) in ls.iter().zip(softmax(&z)) {
            assert!((l.exp() - p).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_linear_outputs_bias() {
        let mut net = DenseParams {
            layers: vec![Linear::zeros(4, 3)],
        };
        net.layers[0].bias = vec![1.0, -2.0, 0.5];
        let (y, _) = net.forward(&[3.0, 1.0, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 0.5]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Precondition(_))));
    }

    #[test]
    fn linear_input_grad_is_weight_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseParams::linear(5, 3, &mut rng);
        let x = [0.1, -0.2, 0.3, 0.7, -1.1];
        let g = [0.5, -1.0, 2.0];
        let (_, cache) = net.forward(&x).unwrap();
        let (_, dx) = net.backward(&cache, &g).unwrap();
        for (i, d) in dx.iter().enumerate() {
            let expected: f64 = (0..3).map(|o| net.layers[0].weight[o * 5 + i] * g[o]).sum();
            assert!((d - expected).abs() < 1e-15);
        }
    }

    // Central-difference oracle for a scalar function of the flat parameters.
    fn fd_grad(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                let orig = t[i];
                t[i] = orig + h;
                let up = f(&t);
                t[i] = orig - h;
                let down = f(&t);
                t[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let net = DenseParams::mlp(8, 6, 3, &mut rng);
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // scalar objective L = w . net(x)
            let (_, cache) = net.forward(&x).unwrap();
            let (grad, dx) = net.backward(&cache, &w).unwrap();
            let objective = |theta: &[f64]| {
                let mut n = net.clone();
                n.set_flat(theta);
                dot(&n.forward(&x).unwrap().0, &w)
            };
            let fd = fd_grad(objective, &net.flat(), 1e-5);
            for (a, b) in grad.flat().iter().zip(&fd) {
                assert!(rel_err(*a, *b) <= 1e-4, "trial {trial}: {a} vs {b}");
            }
            let fd_x = fd_grad(|xx| dot(&net.forward(xx).unwrap().0, &w), &x, 1e-5);
            for (a, b) in dx.iter().zip(&fd_x) {
                assert!(rel_err(*a, *b) <= 1e-4);
            }
        }
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut adam = Adam::new(0.01, 3);
        let mut p = vec![1.0, 2.0, 3.0];
        let g = vec![0.5, -2.0, 0.0];
        adam.step(&mut p, &g).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction
        for (i, (&pi, &gi)) in p.iter().zip(&g).enumerate() {
            let expected = [1.0, 2.0, 3.0][i] - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-12);
        }
        assert_eq!(adam.step, 1);
        let before = p.clone();
        adam.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(adam.step, 2);
        // momentum keeps moving, zero-grad on a fresh state would not
        let mut fresh = Adam::new(0.01, 3);
        let mut q = before.clone();
        fresh.step(&mut q, &[0.0; 3]).unwrap();
        assert_eq!(q, before);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut adam = Adam::new(0.01, 2);
        let mut p = vec![0.0; 2];
        assert!(matches!(adam.step(&mut p, &[f64::NAN, 0.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseParams::mlp(4, 3, 2, &mut rng);
        let mut ck = Checkpoint::default();
        ck.meta.insert("kind".into(), "test".into());
        ck.blocks = net.named_blocks("net");
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_reader(&bytes[..]).unwrap();
        assert_eq!(back, ck);
        let mut other = DenseParams::mlp(4, 3, 2, &mut rng);
        other.load_named("net", &back.blocks).unwrap();
        assert_eq!(other, net);
        assert!(Checkpoint::from_reader(&bytes[..bytes.len() - 3]).is_err());
        assert!(matches!(Checkpoint::from_reader(&b"nope\n"[..]), Err(Error::Parse { line: 1, .. })));
    }
}
