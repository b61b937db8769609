use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{expf, logf, sqrtf};
use rand::Rng as _;

use super::kernels::{self, dot, gelu_grad, gelu_parts, row_moments, softmax_in_place};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    Sum { x: Var },
    AddBias { x: Var, bias: Var },
    Gelu { x: Var, tanh: Vec<f32> },
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f32, f32)> },
    Embedding { table: Var, ids: Vec<usize> },
    CausalAttention { q: Var, k: Var, v: Var, heads: usize, block: usize, probs: Vec<f32> },
    Dropout { x: Var, mask: Vec<f32> },
    SoftmaxRows { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32> },
    LogProbPick { logits: Var, picks: Vec<(usize, usize)>, probs: Vec<f32> },
    Surrogate { x: Var, coeffs: Vec<f32> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Vec<f32>,
    op: Op,
    tracked: bool,
}

/// Records operations in execution order so [`Tape::backward`] can replay
/// them in reverse.
///
/// Leaf gradients accumulate across `backward` calls; interior gradients
/// are rebuilt on every call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl core::fmt::Debug for Tape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::shape(op, detail)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: Vec::new(),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a leaf. It is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let (shape, data, requires_grad) = tensor.into_parts();
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    /// Records a leaf by copying a tensor's values.
    pub fn leaf_ref(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward root w.r.t. `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        let g = &self.nodes[v.0].grad;
        if g.is_empty() {
            None
        } else {
            Some(g)
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, tracked))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.nodes[a.0].shape.clone();
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::Scale { x, factor }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(vec![1], vec![s], Op::Sum { x }, tracked)
    }

    /// `x[..., n] + bias[n]`, the one broadcast the engine supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.nodes[x.0].shape.last().unwrap_or(&0);
        if self.nodes[bias.0].shape != [n] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} for last axis {n}", self.nodes[bias.0].shape),
            ));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(&[x, bias]);
        Ok(self.push(shape, out, Op::AddBias { x, bias }, tracked))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tracked = self.tracked(&[x]);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(xs.len());
        let mut tanh = Vec::with_capacity(if tracked { xs.len() } else { 0 });
        for &v in xs {
            let (y, t) = gelu_parts(v);
            out.push(y);
            if tracked {
                tanh.push(t);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Gelu { x, tanh }, tracked)
    }

    /// Normalizes each row of the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let n = *self.nodes[x.0].shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(shape_err("layer_norm", "empty normalized axis".into()));
        }
        for p in [gain, bias] {
            if self.nodes[p.0].shape != [n] {
                return Err(shape_err(
                    "layer_norm",
                    format!("affine {:?} for axis {n}", self.nodes[p.0].shape),
                ));
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let xs = self.value(x);
        let mut out = Vec::with_capacity(xs.len());
        let mut stats = Vec::with_capacity(xs.len() / n);
        for row in xs.chunks(n) {
            let (mean, rstd) = row_moments(row, eps);
            stats.push((mean, rstd));
            for i in 0..n {
                out.push((row[i] - mean) * rstd * g[i] + b[i]);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, stats }, tracked))
    }

    /// Gathers rows of `table[V, d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding")?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::BadId { id, vocab: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let tracked = self.tracked(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding { table, ids: ids.to_vec() },
            tracked,
        ))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[N, d]` with `N` a multiple of `block`; each block
    /// of `block` consecutive rows is an independent sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        block: usize,
    ) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "causal_attention")?;
        self.same_shape(q, k, "causal_attention")?;
        self.same_shape(q, v, "causal_attention")?;
        if heads == 0 || d % heads != 0 || block == 0 || n % block != 0 {
            return Err(shape_err(
                "causal_attention",
                format!("[{n},{d}] with {heads} heads and block {block}"),
            ));
        }
        let hd = d / heads;
        let scale = 1.0 / sqrtf(hd as f32);
        let blocks = n / block;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; blocks * heads * block * block];
        let mut out = vec![0.0; n * d];
        let mut qh = vec![0.0; block * hd];
        let mut kt = vec![0.0; hd * block];
        let mut vh = vec![0.0; block * hd];
        let mut oh = vec![0.0; block * hd];
        for b in 0..blocks {
            let rows = b * block..(b + 1) * block;
            for h in 0..heads {
                let off = h * hd;
                gather_head(qv, rows.clone(), d, off, hd, &mut qh);
                gather_head(vv, rows.clone(), d, off, hd, &mut vh);
                for (j, r) in rows.clone().enumerate() {
                    for t in 0..hd {
                        kt[t * block + j] = kv[r * d + off + t];
                    }
                }
                let p = &mut probs[(b * heads + h) * block * block..][..block * block];
                kernels::matmul_acc(&qh, &kt, p, block, hd, block);
                for i in 0..block {
                    let row = &mut p[i * block..(i + 1) * block];
                    row.iter_mut().for_each(|x| *x *= scale);
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                }
                oh.iter_mut().for_each(|x| *x = 0.0);
                kernels::matmul_acc(p, &vh, &mut oh, block, block, hd);
                scatter_head(&oh, rows.clone(), d, off, hd, &mut out);
            }
        }
        let tracked = self.tracked(&[q, k, v]);
        Ok(self.push(
            vec![n, d],
            out,
            Op::CausalAttention { q, k, v, heads, block, probs },
            tracked,
        ))
    }

    /// Inverted dropout. `p == 0` returns `x` unchanged.
    pub fn dropout<R: rand::RngCore>(&mut self, x: Var, p: f32, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(&[x]);
        self.push(shape, out, Op::Dropout { x, mask }, tracked)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = *self.nodes[x.0].shape.last().unwrap_or(&0);
        if n == 0 {
            return Err(shape_err("softmax_rows", "empty row".into()));
        }
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.nodes[x.0].shape.clone();
        let tracked = self.tracked(&[x]);
        Ok(self.push(shape, out, Op::SoftmaxRows { x }, tracked))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// Rows whose target equals `ignore` contribute nothing; with no
    /// remaining rows the loss is 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let (rows, classes) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut kept = Vec::with_capacity(rows);
        for &t in targets {
            if Some(t) == ignore {
                kept.push(None);
            } else if t >= classes {
                return Err(Error::TargetOutOfRange { target: t, classes });
            } else {
                kept.push(Some(t));
            }
        }
        let count = kept.iter().filter(|t| t.is_some()).count();
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f32;
        for (row, t) in probs.chunks_mut(classes).zip(&kept) {
            softmax_in_place(row);
            if let Some(t) = *t {
                total -= logf(row[t].max(f32::MIN_POSITIVE));
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f32 };
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: kept, probs },
            tracked,
        ))
    }

    /// `log softmax(logits[row])[col]` for each pick, optionally treating one
    /// column as masked out of the normalization.
    pub fn log_prob_pick(
        &mut self,
        logits: Var,
        picks: &[(usize, usize)],
        masked: Option<usize>,
    ) -> Result<Var> {
        let (rows, classes) = self.matrix_dims(logits, "log_prob_pick")?;
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(picks.len() * classes);
        let mut out = Vec::with_capacity(picks.len());
        for &(r, c) in picks {
            if r >= rows || c >= classes || Some(c) == masked {
                return Err(shape_err(
                    "log_prob_pick",
                    format!("pick ({r},{c}) on [{rows},{classes}]"),
                ));
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let (max, sum) = kernels::masked_logsumexp_parts(row, masked);
            out.push(row[c] - max - logf(sum));
            let p = row.iter().enumerate().map(|(j, &v)| {
                if Some(j) == masked {
                    0.0
                } else {
                    expf(v - max) / sum
                }
            });
            let p: Vec<f32> = p.collect();
            probs.extend_from_slice(&p);
        }
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            vec![picks.len()],
            out,
            Op::LogProbPick { logits, picks: picks.to_vec(), probs },
            tracked,
        ))
    }

    /// Mean PPO surrogate `min(ρ·r, clip(ρ, 1-ε, 1+ε)·r)` with
    /// `ρ = exp(logp - logp_old)`; with `clip = None` it is the plain `ρ·r`.
    pub fn ppo_surrogate(
        &mut self,
        logp: Var,
        logp_old: &[f32],
        rewards: &[f32],
        clip: Option<f32>,
    ) -> Result<Var> {
        let lp = self.value(logp);
        if lp.len() != logp_old.len() || lp.len() != rewards.len() || lp.is_empty() {
            return Err(shape_err(
                "ppo_surrogate",
                format!("{} / {} / {}", lp.len(), logp_old.len(), rewards.len()),
            ));
        }
        let n = lp.len() as f32;
        let mut total = 0.0;
        let mut coeffs = Vec::with_capacity(lp.len());
        for ((&new, &old), &r) in lp.iter().zip(logp_old).zip(rewards) {
            let ratio = expf(new - old);
            let plain = ratio * r;
            let (obj, coeff) = match clip {
                Some(eps) => {
                    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * r;
                    if plain <= clipped {
                        (plain, plain)
                    } else {
                        (clipped, 0.0)
                    }
                }
                None => (plain, plain),
            };
            total += obj;
            coeffs.push(coeff / n);
        }
        let tracked = self.tracked(&[logp]);
        Ok(self.push(
            vec![1],
            vec![total / n],
            Op::Surrogate { x: logp, coeffs },
            tracked,
        ))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].shape.clone()));
        }
        for node in self.nodes.iter_mut() {
            if !matches!(node.op, Op::Leaf) {
                node.grad.clear();
            }
        }
        if !self.nodes[root.0].tracked {
            return Ok(());
        }
        self.nodes[root.0].grad = vec![1.0];
        for i in (0..=root.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.tracked || node.grad.is_empty() {
                continue;
            }
            backprop(node, before);
        }
        Ok(())
    }
}

/// Runs `f` on the gradient buffer of `v` (allocated on demand) while the
/// rest of the graph stays readable.
fn with_grad<F>(nodes: &mut [Node], v: Var, f: F)
where
    F: FnOnce(&mut [f32], &[Node]),
{
    if !nodes[v.0].tracked {
        return;
    }
    let mut g = core::mem::take(&mut nodes[v.0].grad);
    if g.is_empty() {
        g = vec![0.0; nodes[v.0].value.len()];
    }
    f(&mut g, nodes);
    nodes[v.0].grad = g;
}

fn backprop(node: &Node, before: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            with_grad(before, a, |ga, nodes| {
                kernels::matmul_grad_a(g, &nodes[b.0].value, ga, m, k, n)
            });
            with_grad(before, b, |gb, nodes| {
                kernels::matmul_grad_b(&nodes[a.0].value, g, gb, m, k, n)
            });
        }
        &Op::Add { a, b } => {
            for v in [a, b] {
                with_grad(before, v, |gv, _| {
                    gv.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
        }
        &Op::Mul { a, b } => {
            with_grad(before, a, |ga, nodes| {
                for ((x, y), o) in ga.iter_mut().zip(g).zip(&nodes[b.0].value) {
                    *x += y * o;
                }
            });
            with_grad(before, b, |gb, nodes| {
                for ((x, y), o) in gb.iter_mut().zip(g).zip(&nodes[a.0].value) {
                    *x += y * o;
                }
            });
        }
        &Op::Scale { x, factor } => {
            with_grad(before, x, |gx, _| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor)
            });
        }
        &Op::Sum { x } => {
            let s = g[0];
            with_grad(before, x, |gx, _| gx.iter_mut().for_each(|a| *a += s));
        }
        &Op::AddBias { x, bias } => {
            with_grad(before, x, |gx, _| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            });
            with_grad(before, bias, |gb, _| {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::Gelu { x, tanh } => {
            with_grad(before, *x, |gx, nodes| {
                for (((a, b), &v), &t) in gx.iter_mut().zip(g).zip(&nodes[x.0].value).zip(tanh) {
                    *a += b * gelu_grad(v, t);
                }
            });
        }
        Op::LayerNorm { x, gain, bias, stats } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let n = before[gain.0].value.len();
            let xs = &before[x.0].value;
            let gv = &before[gain.0].value;
            // dx needs the affine-scaled upstream gradient per row.
            let mut dx = vec![0.0; xs.len()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for (r, &(mean, rstd)) in stats.iter().enumerate() {
                let row = &xs[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for i in 0..n {
                    let xhat = (row[i] - mean) * rstd;
                    let d = gr[i] * gv[i];
                    sum_d += d;
                    sum_dx += d * xhat;
                    dgain[i] += gr[i] * xhat;
                    dbias[i] += gr[i];
                }
                let inv_n = 1.0 / n as f32;
                for i in 0..n {
                    let xhat = (row[i] - mean) * rstd;
                    let d = gr[i] * gv[i];
                    dx[r * n + i] = rstd * (d - sum_d * inv_n - xhat * sum_dx * inv_n);
                }
            }
            add_into(before, x, &dx);
            add_into(before, gain, &dgain);
            add_into(before, bias, &dbias);
        }
        Op::Embedding { table, ids } => {
            with_grad(before, *table, |gt, nodes| {
                let d = nodes[table.0].shape[1];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
            });
        }
        Op::CausalAttention { q, k, v, heads, block, probs } => {
            let (q, k, v, heads, block) = (*q, *k, *v, *heads, *block);
            let shape = &before[q.0].shape;
            let (n, d) = (shape[0], shape[1]);
            let hd = d / heads;
            let scale = 1.0 / sqrtf(hd as f32);
            let (qv, kv, vv) = (&before[q.0].value, &before[k.0].value, &before[v.0].value);
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut qh = vec![0.0; block * hd];
            let mut kh = vec![0.0; block * hd];
            let mut vh = vec![0.0; block * hd];
            let mut goh = vec![0.0; block * hd];
            let mut dh = vec![0.0; block * hd];
            let mut ds = vec![0.0; block * block];
            for b in 0..n / block {
                let rows = b * block..(b + 1) * block;
                for h in 0..heads {
                    let off = h * hd;
                    let p = &probs[(b * heads + h) * block * block..][..block * block];
                    gather_head(qv, rows.clone(), d, off, hd, &mut qh);
                    gather_head(kv, rows.clone(), d, off, hd, &mut kh);
                    gather_head(vv, rows.clone(), d, off, hd, &mut vh);
                    gather_head(g, rows.clone(), d, off, hd, &mut goh);

                    // dV = Pᵀ·dO
                    dh.iter_mut().for_each(|x| *x = 0.0);
                    kernels::matmul_grad_b(p, &goh, &mut dh, block, block, hd);
                    scatter_head(&dh, rows.clone(), d, off, hd, &mut dv);

                    // dP = dO·Vᵀ, then the softmax Jacobian row by row.
                    ds.iter_mut().for_each(|x| *x = 0.0);
                    kernels::matmul_grad_a(&goh, &vh, &mut ds, block, block, hd);
                    for i in 0..block {
                        let pr = &p[i * block..][..=i];
                        let dr = &mut ds[i * block..(i + 1) * block];
                        let weighted: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, &pj) in dr[..=i].iter_mut().zip(pr) {
                            *x = pj * (*x - weighted) * scale;
                        }
                        dr[i + 1..].iter_mut().for_each(|x| *x = 0.0);
                    }

                    dh.iter_mut().for_each(|x| *x = 0.0);
                    kernels::matmul_acc(&ds, &kh, &mut dh, block, block, hd);
                    scatter_head(&dh, rows.clone(), d, off, hd, &mut dq);
                    dh.iter_mut().for_each(|x| *x = 0.0);
                    kernels::matmul_grad_b(&ds, &qh, &mut dh, block, block, hd);
                    scatter_head(&dh, rows.clone(), d, off, hd, &mut dk);
                }
            }
            add_into(before, q, &dq);
            add_into(before, k, &dk);
            add_into(before, v, &dv);
        }
        Op::Dropout { x, mask } => {
            with_grad(before, *x, |gx, _| {
                for ((a, b), m) in gx.iter_mut().zip(g).zip(mask) {
                    *a += b * m;
                }
            });
        }
        &Op::SoftmaxRows { x } => {
            let y = &node.value;
            let n = *node.shape.last().unwrap();
            with_grad(before, x, |gx, _| {
                for ((gx, gy), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let s = dot(gy, y);
                    for i in 0..n {
                        gx[i] += y[i] * (gy[i] - s);
                    }
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let count = targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                return;
            }
            let scale = g[0] / count as f32;
            with_grad(before, *logits, |gl, nodes| {
                let classes = nodes[logits.0].shape[1];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut gl[r * classes..(r + 1) * classes];
                    let p = &probs[r * classes..(r + 1) * classes];
                    for c in 0..classes {
                        row[c] += scale * p[c];
                    }
                    row[t] -= scale;
                }
            });
        }
        Op::LogProbPick { logits, picks, probs } => {
            with_grad(before, *logits, |gl, nodes| {
                let classes = nodes[logits.0].shape[1];
                for (i, &(r, c)) in picks.iter().enumerate() {
                    let p = &probs[i * classes..(i + 1) * classes];
                    let row = &mut gl[r * classes..(r + 1) * classes];
                    for j in 0..classes {
                        row[j] -= g[i] * p[j];
                    }
                    row[c] += g[i];
                }
            });
        }
        Op::Surrogate { x, coeffs } => {
            let s = g[0];
            with_grad(before, *x, |gx, _| {
                gx.iter_mut().zip(coeffs).for_each(|(a, c)| *a += s * c)
            });
        }
    }
}

/// Copies head columns `off..off + hd` of `rows` into a dense `[rows, hd]`.
fn gather_head(x: &[f32], rows: core::ops::Range<usize>, d: usize, off: usize, hd: usize, out: &mut [f32]) {
    for (i, r) in rows.enumerate() {
        out[i * hd..(i + 1) * hd].copy_from_slice(&x[r * d + off..r * d + off + hd]);
    }
}

/// Adds a dense `[rows, hd]` block into head columns of `out`.
fn scatter_head(x: &[f32], rows: core::ops::Range<usize>, d: usize, off: usize, hd: usize, out: &mut [f32]) {
    for (i, r) in rows.enumerate() {
        for (o, v) in out[r * d + off..r * d + off + hd].iter_mut().zip(&x[i * hd..(i + 1) * hd]) {
            *o += v;
        }
    }
}

fn add_into(nodes: &mut [Node], v: Var, delta: &[f32]) {
    with_grad(nodes, v, |g, _| g.iter_mut().zip(delta).for_each(|(a, b)| *a += b));
}
