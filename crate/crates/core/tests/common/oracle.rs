//! Independent f64 reference implementations used as finite-difference
//! oracles. Nothing here calls into the crate's kernels.
#![allow(dead_code)]

pub const FD_EPS: f64 = 1e-3;

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n).flat_map(softmax).collect()
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            out.push((row[i] - mean) * rstd * g[i] + b[i]);
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add_bias(x: &[f64], b: &[f64]) -> Vec<f64> {
    x.chunks(b.len())
        .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
        .collect()
}

/// Causal multi-head attention; rows grouped into independent blocks.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], d: usize, heads: usize, block: usize) -> Vec<f64> {
    let n = q.len() / d;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; n * d];
    for b in 0..n / block {
        for h in 0..heads {
            for i in 0..block {
                let ri = b * block + i;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let rj = b * block + j;
                        (0..hd)
                            .map(|t| q[ri * d + h * hd + t] * k[rj * d + h * hd + t])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let p = softmax(&scores);
                for (j, pj) in p.iter().enumerate() {
                    let rj = b * block + j;
                    for t in 0..hd {
                        out[ri * d + h * hd + t] += pj * v[rj * d + h * hd + t];
                    }
                }
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], targets: &[usize], classes: usize, ignore: Option<usize>) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (row, &t) in logits.chunks(classes).zip(targets) {
        if Some(t) == ignore {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn log_prob_pick(logits: &[f64], classes: usize, picks: &[(usize, usize)], masked: Option<usize>) -> Vec<f64> {
    picks
        .iter()
        .map(|&(r, c)| {
            let row = &logits[r * classes..(r + 1) * classes];
            let lse = row
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != masked)
                .map(|(_, v)| v.exp())
                .sum::<f64>()
                .ln();
            row[c] - lse
        })
        .collect()
}

pub fn ppo_surrogate(logp: &[f64], old: &[f64], rewards: &[f64], clip: Option<f64>) -> f64 {
    let mut total = 0.0;
    for ((&n, &o), &r) in logp.iter().zip(old).zip(rewards) {
        let ratio = (n - o).exp();
        total += match clip {
            Some(e) => (ratio * r).min(ratio.clamp(1.0 - e, 1.0 + e) * r),
            None => ratio * r,
        };
    }
    total / logp.len() as f64
}

/// Plain f64 GPT forward: pre-norm blocks, learned positions, tanh GELU,
/// untied head. `params` follow the crate's parameter order.
pub struct RefGpt<'a> {
    pub params: &'a [Vec<f64>],
    pub n_layers: usize,
    pub n_heads: usize,
    pub d: usize,
    pub vocab: usize,
}

impl RefGpt<'_> {
    pub fn logits(&self, ids: &[usize]) -> Vec<f64> {
        let d = self.d;
        let t = ids.len();
        let p = self.params;
        let mut x = vec![0.0; t * d];
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..d {
                x[i * d + c] = p[0][id * d + c] + p[1][i * d + c];
            }
        }
        for l in 0..self.n_layers {
            let w = &p[2 + 16 * l..2 + 16 * (l + 1)];
            let h = layer_norm(&x, &w[0], &w[1], 1e-5);
            let q = add_bias(&matmul(&h, &w[2], t, d, d), &w[3]);
            let k = add_bias(&matmul(&h, &w[4], t, d, d), &w[5]);
            let v = add_bias(&matmul(&h, &w[6], t, d, d), &w[7]);
            let a = attention(&q, &k, &v, d, self.n_heads, t);
            let o = add_bias(&matmul(&a, &w[8], t, d, d), &w[9]);
            for i in 0..x.len() {
                x[i] += o[i];
            }
            let h = layer_norm(&x, &w[10], &w[11], 1e-5);
            let f: Vec<f64> = add_bias(&matmul(&h, &w[12], t, d, 4 * d), &w[13])
                .into_iter()
                .map(gelu)
                .collect();
            let f = add_bias(&matmul(&f, &w[14], t, 4 * d, d), &w[15]);
            for i in 0..x.len() {
                x[i] += f[i];
            }
        }
        let base = 2 + 16 * self.n_layers;
        let x = layer_norm(&x, &p[base], &p[base + 1], 1e-5);
        matmul(&x, &p[base + 2], t, d, self.vocab)
    }
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_EPS;
            let up = f(&x);
            x[i] = orig - FD_EPS;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

/// Relative error with a floor of 1e-2 on the denominator, so gradients
/// below 1e-2 are compared at an absolute 1e-6.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}
