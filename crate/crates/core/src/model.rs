//! GPT-2 style decoder-only transformer over log keys.
//!
//! Pre-norm residual blocks, learned positional embeddings, a GELU MLP of
//! width `4·d_model` and an untied linear head. Every forward pass runs on a
//! [`Tape`]; in eval mode no randomness is consumed, and because each row
//! only ever reads rows at or before it, the logits at position `t` are
//! bit-identical whatever follows `t`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use libm::{cosf, logf, sqrtf};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{PAD, RESERVED};
use crate::tensor::{softmax_in_place, Tape, Tensor, Var};
use crate::{Error, Result, Rng};

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;
/// Tensors per transformer block.
const PER_LAYER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 6,
            d_model: 60,
            vocab_size: 0,
            max_len: 512,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad(format!("degenerate architecture {:?}", self));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab_size <= crate::corpus::RESERVED {
            return bad(format!("vocab_size {} leaves no mined keys", self.vocab_size));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count:
    /// `2·V·d + L·d + n_layers·(12·d² + 13·d) + 2·d`.
    pub fn param_count(&self) -> usize {
        let (v, d, l) = (self.vocab_size, self.d_model, self.max_len);
        2 * v * d + l * d + self.n_layers * (12 * d * d + 13 * d) + 2 * d
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, l) = (self.vocab_size, self.d_model, self.max_len);
        let mut out = vec![
            ("tok_emb".into(), vec![v, d]),
            ("pos_emb".into(), vec![l, d]),
        ];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("h{i}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.bq"), vec![d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.bk"), vec![d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.bv"), vec![d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.bo"), vec![d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.fc_w"), vec![d, 4 * d]),
                (p("mlp.fc_b"), vec![4 * d]),
                (p("mlp.proj_w"), vec![4 * d, d]),
                (p("mlp.proj_b"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_f.gain".into(), vec![d]),
            ("ln_f.bias".into(), vec![d]),
            ("head".into(), vec![d, v]),
        ]);
        out
    }
}

fn normal_sample(rng: &mut Rng) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen::<f32>().max(f32::MIN_POSITIVE);
    let u2: f32 = rng.gen();
    sqrtf(-2.0 * logf(u1)) * cosf(core::f32::consts::TAU * u2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameter handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl GptModel {
    /// Weights and embeddings ~ N(0, 0.02), zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng_from_seed(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.layout() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".gain") {
                t.data_mut().iter_mut().for_each(|v| *v = 1.0);
            } else if shape.len() == 2 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = INIT_STD * normal_sample(&mut rng));
            }
            names.push(name);
            params.push(t.with_grad());
        }
        Ok(GptModel {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against the configuration.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(layout.len());
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, t)) in layout.into_iter().zip(named) {
            if name != got_name || t.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "expected tensor {name} {:?}, found {got_name} {:?}",
                    shape,
                    t.shape()
                )));
            }
            let mut t = t;
            t.set_requires_grad(true);
            names.push(name);
            params.push(t);
        }
        Ok(GptModel {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// FNV-1a hash over parameter names, shapes and value bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.named_params() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Sets the LM head to zero so every position predicts uniformly.
    pub fn zero_head(&mut self) {
        let head = self.params.len() - 1;
        self.params[head].data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf_ref(p)).collect(),
        }
    }

    /// Adds the gradients that `tape` holds for `bound` into the parameters.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[u32], block: usize) -> Result<()> {
        if ids.is_empty() || block == 0 || ids.len() % block != 0 {
            return Err(Error::Empty("model input"));
        }
        if block > self.config.max_len {
            return Err(Error::OverLength {
                len: block,
                max: self.config.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::BadId {
                id: id as usize,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Logits `[ids.len(), vocab]` for `ids` laid out as rows of `block`
    /// positions. Dropout is applied iff `rng` is given.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &[u32],
        block: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_ids(ids, block)?;
        let cfg = &self.config;
        let p = &bound.vars;
        let p_drop = if rng.is_some() { cfg.dropout } else { 0.0 };
        let mut drop = |tape: &mut Tape, x: Var| match rng.as_deref_mut() {
            Some(r) => tape.dropout(x, p_drop, r),
            None => x,
        };

        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_ids: Vec<usize> = (0..ids.len()).map(|i| i % block).collect();
        let tok = tape.embedding(p[0], &tok_ids)?;
        let pos = tape.embedding(p[1], &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        x = drop(tape, x);

        for layer in 0..cfg.n_layers {
            let w = &p[2 + layer * PER_LAYER..2 + (layer + 1) * PER_LAYER];
            let h = tape.layer_norm(x, w[0], w[1], LN_EPS)?;
            let q = tape.matmul(h, w[2])?;
            let q = tape.add_bias(q, w[3])?;
            let k = tape.matmul(h, w[4])?;
            let k = tape.add_bias(k, w[5])?;
            let v = tape.matmul(h, w[6])?;
            let v = tape.add_bias(v, w[7])?;
            let a = tape.causal_attention(q, k, v, cfg.n_heads, block)?;
            let o = tape.matmul(a, w[8])?;
            let o = tape.add_bias(o, w[9])?;
            let o = drop(tape, o);
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, w[10], w[11], LN_EPS)?;
            let f = tape.matmul(h, w[12])?;
            let f = tape.add_bias(f, w[13])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w[14])?;
            let f = tape.add_bias(f, w[15])?;
            let f = drop(tape, f);
            x = tape.add(x, f)?;
        }
        let base = 2 + cfg.n_layers * PER_LAYER;
        let x = tape.layer_norm(x, p[base], p[base + 1], LN_EPS)?;
        tape.matmul(x, p[base + 2])
    }

    /// Logits `[T, vocab]` for one sequence.
    pub fn forward(&self, keys: &[u32], rng: Option<&mut Rng>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward_on_tape(&mut tape, &bound, keys, keys.len().max(1), rng)?;
        Ok(tape.to_tensor(out))
    }

    /// Next-key distribution after every prefix of `keys` (eval mode):
    /// row `t` conditions on `keys[..=t]`.
    pub fn distributions(&self, keys: &[u32]) -> Result<Vec<Vec<f32>>> {
        let logits = self.forward(keys, None)?;
        let v = self.config.vocab_size;
        Ok(logits.data().chunks(v).map(pad_masked_softmax).collect())
    }

    /// Distribution of the key following `prefix`.
    pub fn next_key_distribution(&self, prefix: &[u32]) -> Result<Vec<f32>> {
        let logits = self.forward(prefix, None)?;
        let v = self.config.vocab_size;
        let last = &logits.data()[(prefix.len() - 1) * v..];
        Ok(pad_masked_softmax(last))
    }
}

/// Softmax with the PAD logit removed, so PAD gets exactly zero mass.
pub fn pad_masked_softmax(logits: &[f32]) -> Vec<f32> {
    let mut row = logits.to_vec();
    row[PAD as usize] = f32::NEG_INFINITY;
    softmax_in_place(&mut row);
    row
}

/// Position of `id` in the Top-K ordering: probability descending, ties
/// by ascending id. Only mined keys (ids from [`RESERVED`] on) are
/// candidates; a reserved id ranks after all of them, so it is never in a
/// Top-K set. `id` is in the Top-K set iff its rank is below K.
pub fn rank_of(dist: &[f32], id: u32) -> usize {
    let pool = dist.len().saturating_sub(RESERVED);
    if (id as usize) < RESERVED {
        return pool;
    }
    let p = dist[id as usize];
    dist.iter()
        .enumerate()
        .skip(RESERVED)
        .filter(|&(j, &q)| q > p || (q == p && (j as u32) < id))
        .count()
}

fn check_k(dist: &[f32], k: usize) -> Result<()> {
    let pool = dist.len().saturating_sub(RESERVED);
    if k == 0 || k > pool {
        return Err(Error::BadK { k, vocab: dist.len() });
    }
    Ok(())
}

/// Whether `id` is among the `k` most probable mined keys. This is the
/// single membership test behind both the RL reward and the detector.
pub fn in_top_k(dist: &[f32], id: u32, k: usize) -> Result<bool> {
    check_k(dist, k)?;
    if id as usize >= dist.len() {
        return Err(Error::BadId {
            id: id as usize,
            vocab: dist.len(),
        });
    }
    Ok(rank_of(dist, id) < k)
}

/// The `k` most probable mined keys, most probable first; ties by
/// ascending id.
pub fn top_k_set(dist: &[f32], k: usize) -> Result<Vec<u32>> {
    check_k(dist, k)?;
    let mut ids: Vec<u32> = (RESERVED as u32..dist.len() as u32).collect();
    ids.sort_by(|&a, &b| {
        dist[b as usize]
            .partial_cmp(&dist[a as usize])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids.truncate(k);
    Ok(ids)
}

/// Samples from the Top-K set with probabilities renormalized over it.
/// Returns the id and its log-probability under the renormalized
/// distribution.
pub fn sample_top_k(dist: &[f32], k: usize, rng: &mut Rng) -> Result<(u32, f32)> {
    let set = top_k_set(dist, k)?;
    let total: f64 = set.iter().map(|&i| dist[i as usize] as f64).sum();
    if !(total > 0.0) {
        return Err(Error::NonFinite("sample_top_k"));
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0f64;
    let mut pick = set[0];
    for &i in &set {
        let p = dist[i as usize] as f64;
        if p <= 0.0 {
            continue;
        }
        pick = i;
        acc += p;
        if u < acc {
            break;
        }
    }
    let logp = libm::log(dist[pick as usize] as f64 / total) as f32;
    Ok((pick, logp))
}
