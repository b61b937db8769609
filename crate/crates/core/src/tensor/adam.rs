use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::sqrtf;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update. `step` is 1-based.
pub fn adam_step(
    param: &mut [f32],
    grad: &[f32],
    state: &mut AdamState,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.m.len() || param.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {}, grad {}, state {}/{}",
                param.len(),
                grad.len(),
                state.m.len(),
                state.v.len()
            ),
        ));
    }
    let bc1 = 1.0 - libm::powf(cfg.beta1, step as f32);
    let bc2 = 1.0 - libm::powf(cfg.beta2, step as f32);
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param[i] -= cfg.lr * m_hat / (sqrtf(v_hat) + cfg.eps);
    }
    Ok(())
}

/// Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            config,
            step: 0,
            states: params.iter().map(|p| AdamState::new(p.len())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Parameters with
    /// no gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::shape(
                "adam",
                format!("{} params for {} states", params.len(), self.states.len()),
            ));
        }
        self.step += 1;
        for (p, state) in params.iter_mut().zip(self.states.iter_mut()) {
            let grad = p.grad.take().unwrap_or_else(|| vec![0.0; p.len()]);
            let res = adam_step(p.data_mut(), &grad, state, self.step, &self.config);
            p.grad = Some(grad);
            res?;
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut [Tensor], max_norm: f32) -> f32 {
    let sq: f32 = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = sqrtf(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
