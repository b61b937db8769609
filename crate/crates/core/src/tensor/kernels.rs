//! Plain-slice kernels shared by the tape ops and the inference paths.

use alloc::vec;
use alloc::vec::Vec;

use libm::{expf, logf, sqrtf, tanhf};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

const MR: usize = 6;
const NR: usize = 16;

/// `out[m,n] += a[m,k] · b[k,n]`, all row-major.
///
/// Register-tiled over `MR × NR` output blocks. Each output element sums
/// over `p` in order, so a row's result does not depend on `m`.
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let full = m - m % MR;
    for i0 in (0..full).step_by(MR) {
        tile_rows::<MR>(&a[i0 * k..(i0 + MR) * k], b, &mut out[i0 * n..(i0 + MR) * n], k, n);
    }
    for i in full..m {
        tile_rows::<1>(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n);
    }
}

#[inline(always)]
fn tile_rows<const R: usize>(a: &[f32], b: &[f32], out: &mut [f32], k: usize, n: usize) {
    let mut bpad = [0.0f32; NR];
    let a_rows: [&[f32]; R] = core::array::from_fn(|r| &a[r * k..(r + 1) * k]);
    for j0 in (0..n).step_by(NR) {
        let w = NR.min(n - j0);
        let mut acc = [[0.0f32; NR]; R];
        for p in 0..k {
            let bp: &[f32; NR] = if w == NR {
                b[p * n + j0..][..NR].try_into().unwrap()
            } else {
                bpad[..w].copy_from_slice(&b[p * n + j0..][..w]);
                &bpad
            };
            for r in 0..R {
                let av = a_rows[r][p];
                for c in 0..NR {
                    acc[r][c] += av * bp[c];
                }
            }
        }
        for r in 0..R {
            let o = &mut out[r * n + j0..][..w];
            for (o, v) in o.iter_mut().zip(&acc[r]) {
                *o += v;
            }
        }
    }
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// `da[m,k] += dc[m,n] · bᵀ`
pub(crate) fn matmul_grad_a(dc: &[f32], b: &[f32], da: &mut [f32], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(dc, &bt, da, m, n, k);
}

/// `db[k,n] += aᵀ · dc[m,n]`
pub(crate) fn matmul_grad_b(a: &[f32], dc: &[f32], db: &mut [f32], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    matmul_acc(&at, dc, db, k, m, n);
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Tanh-approximated GELU (GPT-2 form).
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + tanhf(GELU_C * (x + GELU_A * x * x * x)))
}

/// GELU value together with the inner `tanh`, which the derivative reuses.
#[inline]
pub(crate) fn gelu_parts(x: f32) -> (f32, f32) {
    let t = tanhf(GELU_C * (x + GELU_A * x * x * x));
    (0.5 * x * (1.0 + t), t)
}

/// Derivative of [`gelu`] at `x` given `t` from [`gelu_parts`].
#[inline]
pub(crate) fn gelu_grad(x: f32, t: f32) -> f32 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = expf(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Log-softmax over one row.
pub fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|v| expf(v - max)).sum();
    let lse = max + logf(sum);
    row.iter_mut().for_each(|v| *v -= lse);
}

/// `(max, Σ exp(x - max))` over a row, skipping the `masked` column.
pub(crate) fn masked_logsumexp_parts(row: &[f32], masked: Option<usize>) -> (f32, f32) {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != masked)
        .map(|(_, &v)| v)
        .fold(f32::NEG_INFINITY, f32::max);
    let sum = row
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != masked)
        .map(|(_, &v)| expf(v - max))
        .sum();
    (max, sum)
}

/// Log-probability of column `c` under a softmax that excludes `masked`.
/// Bit-identical to the value [`Tape::log_prob_pick`](super::Tape::log_prob_pick) records.
pub fn masked_log_prob(row: &[f32], c: usize, masked: Option<usize>) -> f32 {
    let (max, sum) = masked_logsumexp_parts(row, masked);
    row[c] - max - logf(sum)
}

/// Row statistics for layer norm: returns (mean, 1/sqrt(var + eps)).
pub(crate) fn row_moments(row: &[f32], eps: f32) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / sqrtf(var + eps))
}
