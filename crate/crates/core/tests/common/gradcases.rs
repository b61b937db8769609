//! Gradient cases: analytic gradients vs central finite differences of
//! independent f64 reference implementations (ε = 1e-3).
#![allow(dead_code)]

use super::oracle::{self, numeric_grad, rel_err};
use logsentinel_core::model::{GptModel, ModelConfig};
use logsentinel_core::tensor::{Tape, Tensor, Var};
use logsentinel_core::{rng_from_seed, Rng};
use rand::Rng as _;

pub const TOL: f64 = 1e-4;
pub const TRIALS: u64 = 12;

fn randn(rng: &mut Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * scale).collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Builds `sum(w ⊙ op(inputs))` on a tape, back-propagates, and compares
/// each input gradient against finite differences of the f64 reference.
fn check_op(
    rng: &mut Rng,
    inputs: &[(Vec<usize>, Vec<f32>)],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap().with_grad()))
        .collect();
    let out = build(&mut tape, &vars);
    let n_out = tape.value(out).len();
    let weights = randn(rng, n_out, 1.0);
    let w = tape.constant(tape.shape(out).to_vec(), weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    tape.backward(loss).unwrap();

    let w64 = to64(&weights);
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| to64(d)).collect();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; base[i].len()]);
        let numeric = numeric_grad(&base[i], |x| {
            let mut all = base.clone();
            all[i] = x.to_vec();
            reference(&all).iter().zip(&w64).map(|(a, b)| a * b).sum()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a as f64, *n));
        }
    }
    worst
}

/// Worst relative error of one case over its randomized trials.
pub struct Outcome {
    pub name: &'static str,
    pub worst: f64,
    pub trials: usize,
}

pub fn all() -> Vec<fn() -> Outcome> {
    vec![matmul, softmax_rows, layer_norm, gelu_and_bias, causal_attention, cross_entropy, log_prob_pick, ppo_surrogate, toy_two_layer_network, full_six_layer_model]
}

pub fn matmul() -> Outcome {
    let mut rng = rng_from_seed(10);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let inputs = [
            (vec![m, k], randn(&mut rng, m * k, 1.0)),
            (vec![k, n], randn(&mut rng, k * n, 1.0)),
        ];
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            |x| oracle::matmul(&x[0], &x[1], m, k, n),
        ));
    }
    // the fixed 3x4 · 4x2 case
    let inputs = [
        (vec![3, 4], randn(&mut rng, 12, 1.0)),
        (vec![4, 2], randn(&mut rng, 8, 1.0)),
    ];
    worst = worst.max(check_op(
        &mut rng,
        &inputs,
        |t, v| t.matmul(v[0], v[1]).unwrap(),
        |x| oracle::matmul(&x[0], &x[1], 3, 4, 2),
    ));
    Outcome { name: "matmul", worst, trials: TRIALS as usize + 1 }
}

pub fn softmax_rows() -> Outcome {
    let mut rng = rng_from_seed(11);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (r, n) = (rng.gen_range(1..4), rng.gen_range(1..7));
        let inputs = [(vec![r, n], randn(&mut rng, r * n, 2.0))];
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, v| t.softmax_rows(v[0]).unwrap(),
            |x| oracle::softmax_rows(&x[0], n),
        ));
    }
    Outcome { name: "softmax_rows", worst, trials: TRIALS as usize }
}

pub fn layer_norm() -> Outcome {
    let mut rng = rng_from_seed(12);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (r, n) = (rng.gen_range(1..4), rng.gen_range(2..9));
        let inputs = [
            (vec![r, n], randn(&mut rng, r * n, 2.0)),
            (vec![n], randn(&mut rng, n, 1.5)),
            (vec![n], randn(&mut rng, n, 1.0)),
        ];
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            |x| oracle::layer_norm(&x[0], &x[1], &x[2], 1e-5),
        ));
    }
    Outcome { name: "layer_norm", worst, trials: TRIALS as usize }
}

pub fn gelu_and_bias() -> Outcome {
    let mut rng = rng_from_seed(13);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (r, n) = (rng.gen_range(1..4), rng.gen_range(1..6));
        let inputs = [
            (vec![r, n], randn(&mut rng, r * n, 3.0)),
            (vec![n], randn(&mut rng, n, 1.0)),
        ];
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, v| {
                let b = t.add_bias(v[0], v[1]).unwrap();
                t.gelu(b)
            },
            |x| oracle::add_bias(&x[0], &x[1]).into_iter().map(oracle::gelu).collect(),
        ));
    }
    Outcome { name: "gelu+bias", worst, trials: TRIALS as usize }
}

pub fn causal_attention() -> Outcome {
    let mut rng = rng_from_seed(14);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let heads = rng.gen_range(1..4);
        let d = heads * rng.gen_range(1..4);
        let block = rng.gen_range(1..5);
        let n = block * rng.gen_range(1..3);
        let inputs: Vec<_> = (0..3).map(|_| (vec![n, d], randn(&mut rng, n * d, 1.0))).collect();
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, v| t.causal_attention(v[0], v[1], v[2], heads, block).unwrap(),
            |x| oracle::attention(&x[0], &x[1], &x[2], d, heads, block),
        ));
    }
    Outcome { name: "attention", worst, trials: TRIALS as usize }
}

pub fn cross_entropy() -> Outcome {
    let mut rng = rng_from_seed(15);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (b, v) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..v)).collect();
        let ignore = Some(0);
        let inputs = [(vec![b, v], randn(&mut rng, b * v, 2.0))];
        let tg = targets.clone();
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, x| t.cross_entropy(x[0], &tg, ignore).unwrap(),
            |x| vec![oracle::cross_entropy(&x[0], &targets, v, ignore)],
        ));
    }
    Outcome { name: "cross_entropy", worst, trials: TRIALS as usize }
}

pub fn log_prob_pick() -> Outcome {
    let mut rng = rng_from_seed(16);
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (r, v) = (rng.gen_range(1..4), rng.gen_range(3..7));
        let picks: Vec<(usize, usize)> = (0..rng.gen_range(1..5))
            .map(|_| (rng.gen_range(0..r), rng.gen_range(1..v)))
            .collect();
        let inputs = [(vec![r, v], randn(&mut rng, r * v, 2.0))];
        let pk = picks.clone();
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, x| t.log_prob_pick(x[0], &pk, Some(0)).unwrap(),
            |x| oracle::log_prob_pick(&x[0], v, &picks, Some(0)),
        ));
    }
    Outcome { name: "log_prob_pick", worst, trials: TRIALS as usize }
}

pub fn ppo_surrogate() -> Outcome {
    let mut rng = rng_from_seed(17);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let n = rng.gen_range(1..6);
        let old = randn(&mut rng, n, 1.0);
        // keep ratios away from the clip kinks at 0.8 / 1.2
        let new: Vec<f32> = old
            .iter()
            .map(|o| o + [-0.6f32, -0.05, 0.05, 0.6][rng.gen_range(0..4)])
            .collect();
        let rewards: Vec<f32> = (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
        let clip = if trial % 2 == 0 { Some(0.2f32) } else { None };
        let inputs = [(vec![n], new)];
        let (o2, r2) = (old.clone(), rewards.clone());
        worst = worst.max(check_op(
            &mut rng,
            &inputs,
            |t, x| t.ppo_surrogate(x[0], &o2, &r2, clip).unwrap(),
            |x| vec![oracle::ppo_surrogate(&x[0], &to64(&old), &to64(&rewards), clip.map(|c| c as f64))],
        ));
    }
    Outcome { name: "ppo_surrogate", worst, trials: TRIALS as usize }
}

pub fn toy_two_layer_network() -> Outcome {
    let mut rng = rng_from_seed(18);
    let (b, i, h, o) = (3, 4, 5, 3);
    let targets = vec![0usize, 2, 1];
    let inputs = [
        (vec![b, i], randn(&mut rng, b * i, 1.0)),
        (vec![i, h], randn(&mut rng, i * h, 1.0)),
        (vec![h], randn(&mut rng, h, 0.5)),
        (vec![h, o], randn(&mut rng, h * o, 1.0)),
    ];
    let tg = targets.clone();
    let worst = check_op(
        &mut rng,
        &inputs,
        |t, v| {
            let z = t.matmul(v[0], v[1]).unwrap();
            let z = t.add_bias(z, v[2]).unwrap();
            let z = t.gelu(z);
            let z = t.matmul(z, v[3]).unwrap();
            t.cross_entropy(z, &tg, None).unwrap()
        },
        |x| {
            let z = oracle::matmul(&x[0], &x[1], b, i, h);
            let z: Vec<f64> = oracle::add_bias(&z, &x[2]).into_iter().map(oracle::gelu).collect();
            let z = oracle::matmul(&z, &x[3], b, h, o);
            vec![oracle::cross_entropy(&z, &targets, o, None)]
        },
    );
    Outcome { name: "two-layer net", worst, trials: 1 }
}

pub fn full_six_layer_model() -> Outcome {
    let cfg = ModelConfig {
        n_layers: 6,
        n_heads: 6,
        d_model: 60,
        vocab_size: 10,
        max_len: 8,
        dropout: 0.0,
    };
    let mut model = GptModel::new(cfg, 21).unwrap();
    // move gains and biases off their init values so every path carries signal
    let mut rng = rng_from_seed(22);
    for p in model.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v += (rng.gen::<f32>() - 0.5) * 0.2;
            }
        }
    }
    let ids = [1u32, 4, 7, 3, 9, 5];
    let targets = [4usize, 7, 3, 9, 5, 0];
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let logits = model.forward_on_tape(&mut tape, &bound, &ids, ids.len(), None).unwrap();
    let loss = tape.cross_entropy(logits, &targets, Some(0)).unwrap();
    tape.backward(loss).unwrap();

    let base: Vec<Vec<f64>> = model.params().iter().map(|p| to64(p.data())).collect();
    let ids_usize: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let loss_at = |params: &[Vec<f64>]| {
        let gpt = oracle::RefGpt {
            params,
            n_layers: 6,
            n_heads: 6,
            d: 60,
            vocab: 10,
        };
        oracle::cross_entropy(&gpt.logits(&ids_usize), &targets, 10, Some(0))
    };
    let ref_loss = loss_at(&base);
    assert!((ref_loss - tape.value(loss)[0] as f64).abs() < 1e-5);

    let mut worst: f64 = 0.0;
    let mut params = base.clone();
    let trials = 120;
    for _ in 0..trials {
        let t = rng.gen_range(0..params.len());
        let j = rng.gen_range(0..params[t].len());
        let analytic = tape.grad(bound.vars()[t]).map(|g| g[j] as f64).unwrap_or(0.0);
        let orig = params[t][j];
        params[t][j] = orig + oracle::FD_EPS;
        let up = loss_at(&params);
        params[t][j] = orig - oracle::FD_EPS;
        let down = loss_at(&params);
        params[t][j] = orig;
        let numeric = (up - down) / (2.0 * oracle::FD_EPS);
        worst = worst.max(rel_err(analytic, numeric));
    }
    Outcome { name: "gpt 6-layer", worst, trials }
}

