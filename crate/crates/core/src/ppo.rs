//! Policy-gradient fine-tuning with the Top-K reward.
//!
//! The policy is the model's PAD-masked next-key distribution. A rollout
//! feeds a prompt `S[..t]`, then for every later position samples an action
//! from the Top-K set and appends it to the state. The step reward is `+1`
//! when the ground-truth key at that position is inside the Top-K set of
//! the state's distribution and `-1` otherwise, decided by the same test the
//! detector applies. The update ascends
//! `J = mean(min(ρ·r, clip(ρ, 1-ε, 1+ε)·r))` with `ρ = π(a|s) / π_old(a|s)`,
//! or `mean(ρ·r)` when clipping is off.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{KeySequence, BOS, PAD, RESERVED};
use crate::detector::{self, k_for_ratio, DetectorConfig};
use crate::model::{pad_masked_softmax, sample_top_k, GptModel};
use crate::tensor::{clip_grad_norm, masked_log_prob, Adam, AdamConfig, Tape};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub lr: f32,
    pub episodes: usize,
    /// Fraction of each sequence given as the prompt.
    pub prompt_ratio: f32,
    pub ppo_epochs: usize,
    /// `None` optimizes the unclipped ratio objective.
    pub clip_epsilon: Option<f32>,
    pub early_stop_patience: usize,
    pub top_k_ratio: f32,
    /// Prompts rolled out per episode; 0 uses every training sequence.
    pub prompts_per_episode: usize,
    /// Episodes per gradient step.
    pub minibatch_size: usize,
    pub grad_clip_norm: f32,
    pub seed: u64,
    /// First-key scoring for the validation violation rate.
    pub score_first_key: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            lr: 1e-6,
            episodes: 20,
            prompt_ratio: 0.5,
            ppo_epochs: 4,
            clip_epsilon: Some(0.2),
            early_stop_patience: 3,
            top_k_ratio: 0.5,
            prompts_per_episode: 128,
            minibatch_size: 16,
            grad_clip_norm: 1.0,
            seed: 0,
            score_first_key: true,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0) {
            return bad(alloc::format!("lr {} must be positive", self.lr));
        }
        if !(self.prompt_ratio > 0.0 && self.prompt_ratio < 1.0) {
            return bad(alloc::format!("prompt_ratio {} outside (0, 1)", self.prompt_ratio));
        }
        if !(self.top_k_ratio > 0.0 && self.top_k_ratio <= 1.0) {
            return bad(alloc::format!("top_k_ratio {} outside (0, 1]", self.top_k_ratio));
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(alloc::format!("clip_epsilon {eps} outside (0, 1)"));
            }
        }
        if self.minibatch_size == 0 {
            return bad("minibatch_size must be >= 1".into());
        }
        Ok(())
    }

    fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            top_k_ratio: self.top_k_ratio,
            score_first_key: self.score_first_key,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Index of the ground-truth key this step is judged against.
    pub position: usize,
    pub action: u32,
    pub logp_old: f32,
    pub reward: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub prompt: Vec<u32>,
    pub steps: Vec<StepRecord>,
}

impl Episode {
    /// Model input covering every step: BOS, the prompt, and all actions
    /// but the last. Row `prompt.len() + s` predicts action `s`.
    pub fn input(&self) -> Vec<u32> {
        let mut row = Vec::with_capacity(1 + self.prompt.len() + self.steps.len());
        row.push(BOS);
        row.extend_from_slice(&self.prompt);
        if let Some((_, init)) = self.steps.split_last() {
            row.extend(init.iter().map(|s| s.action));
        }
        row
    }

    pub fn mean_reward(&self) -> f32 {
        mean(self.steps.iter().map(|s| s.reward))
    }
}

fn mean<I: IntoIterator<Item = f32>>(xs: I) -> f32 {
    let (sum, n) = xs.into_iter().fold((0.0f64, 0usize), |(s, n), x| (s + x as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64) as f32
    }
}

/// Prompt length for a sequence of `len` keys, or `None` when it is too
/// short to leave a generated step.
pub fn prompt_len(len: usize, ratio: f32) -> Option<usize> {
    if len < 2 {
        return None;
    }
    let t = ((ratio as f64 * len as f64) as usize).max(1);
    (t < len).then_some(t)
}

/// Reward for observing `truth` at a state with distribution `dist`.
pub fn step_reward(dist: &[f32], truth: u32, k: usize) -> Result<f32> {
    Ok(if detector::violates(dist, truth, k)? { -1.0 } else { 1.0 })
}

/// Rolls out `keys` with an explicit prompt length `t` (`1 ≤ t < len`).
pub fn rollout_from(model: &GptModel, keys: &[u32], t: usize, k: usize, rng: &mut Rng) -> Result<Episode> {
    if t == 0 || t >= keys.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "prompt length {t} for a sequence of {}",
            keys.len()
        )));
    }
    let v = model.vocab_size();
    let mut state = Vec::with_capacity(keys.len() + 1);
    state.push(BOS);
    state.extend_from_slice(&keys[..t]);
    let mut steps = Vec::with_capacity(keys.len() - t);
    for (position, &truth) in keys.iter().enumerate().skip(t) {
        let logits = model.forward(&state, None)?;
        let last = &logits.data()[(state.len() - 1) * v..];
        let dist = pad_masked_softmax(last);
        let reward = step_reward(&dist, truth, k)?;
        let (action, _) = sample_top_k(&dist, k, rng)?;
        let logp_old = masked_log_prob(last, action as usize, Some(PAD as usize));
        steps.push(StepRecord {
            position,
            action,
            logp_old,
            reward,
        });
        state.push(action);
    }
    Ok(Episode {
        prompt: keys[..t].to_vec(),
        steps,
    })
}

/// Rolls out `keys` with the prompt length given by `prompt_ratio`;
/// `None` for sequences shorter than two keys.
pub fn rollout(model: &GptModel, keys: &[u32], prompt_ratio: f32, k: usize, rng: &mut Rng) -> Result<Option<Episode>> {
    match prompt_len(keys.len(), prompt_ratio) {
        Some(t) => rollout_from(model, keys, t, k, rng).map(Some),
        None => Ok(None),
    }
}

/// Padded minibatch of episodes ready for one tape.
struct PackedBatch {
    inputs: Vec<u32>,
    width: usize,
    picks: Vec<(usize, usize)>,
    logp_old: Vec<f32>,
    rewards: Vec<f32>,
}

fn pack(episodes: &[&Episode]) -> PackedBatch {
    let rows: Vec<Vec<u32>> = episodes.iter().map(|e| e.input()).collect();
    let width = rows.iter().map(Vec::len).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(rows.len() * width);
    let mut picks = Vec::new();
    let mut logp_old = Vec::new();
    let mut rewards = Vec::new();
    for (r, (row, ep)) in rows.iter().zip(episodes).enumerate() {
        inputs.extend_from_slice(row);
        inputs.resize((r + 1) * width, PAD);
        for (s, step) in ep.steps.iter().enumerate() {
            picks.push((r * width + ep.prompt.len() + s, step.action as usize));
            logp_old.push(step.logp_old);
            rewards.push(step.reward);
        }
    }
    PackedBatch {
        inputs,
        width,
        picks,
        logp_old,
        rewards,
    }
}

/// Diagnostics of one update round.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    /// Step-weighted objective over the first pass, before any step moved
    /// the parameters further.
    pub first_pass_objective: f32,
    pub gradient_steps: usize,
    /// Steps dropped because their ratio was not finite.
    pub skipped_nonfinite: usize,
}

/// Objective `J` of `batch` under the current model. Returns the tape, the
/// objective node and the number of steps kept.
fn objective_on_tape(
    model: &GptModel,
    batch: &PackedBatch,
    clip: Option<f32>,
) -> Result<(Tape, crate::model::Bound, Option<crate::tensor::Var>, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let logits = model.forward_on_tape(&mut tape, &bound, &batch.inputs, batch.width, None)?;
    let logp = tape.log_prob_pick(logits, &batch.picks, Some(PAD as usize))?;
    let finite: Vec<usize> = tape
        .value(logp)
        .iter()
        .zip(&batch.logp_old)
        .enumerate()
        .filter(|(_, (&new, &old))| libm::expf(new - old).is_finite())
        .map(|(i, _)| i)
        .collect();
    let skipped = batch.picks.len() - finite.len();
    if finite.is_empty() {
        return Ok((tape, bound, None, skipped));
    }
    let j = if skipped == 0 {
        tape.ppo_surrogate(logp, &batch.logp_old, &batch.rewards, clip)?
    } else {
        let picks: Vec<(usize, usize)> = finite.iter().map(|&i| batch.picks[i]).collect();
        let old: Vec<f32> = finite.iter().map(|&i| batch.logp_old[i]).collect();
        let rewards: Vec<f32> = finite.iter().map(|&i| batch.rewards[i]).collect();
        let kept = tape.log_prob_pick(logits, &picks, Some(PAD as usize))?;
        tape.ppo_surrogate(kept, &old, &rewards, clip)?
    };
    Ok((tape, bound, Some(j), skipped))
}

/// `J(θ)` over all steps of `episodes` without changing the model.
pub fn surrogate_objective(model: &GptModel, episodes: &[Episode], clip: Option<f32>) -> Result<f32> {
    let refs: Vec<&Episode> = episodes.iter().filter(|e| !e.steps.is_empty()).collect();
    if refs.is_empty() {
        return Err(Error::Empty("episodes"));
    }
    let batch = pack(&refs);
    let (tape, _, j, _) = objective_on_tape(model, &batch, clip)?;
    j.map(|j| tape.value(j)[0]).ok_or(Error::NonFinite("ppo ratio"))
}

/// Runs `cfg.ppo_epochs` passes of minibatched gradient ascent on `J`.
pub fn ppo_update(
    model: &mut GptModel,
    episodes: &[Episode],
    cfg: &RlConfig,
    opt: &mut Adam,
    rng: &mut Rng,
) -> Result<UpdateStats> {
    let mut order: Vec<usize> = (0..episodes.len()).filter(|&i| !episodes[i].steps.is_empty()).collect();
    if order.is_empty() {
        return Err(Error::Empty("episodes"));
    }
    let mut stats = UpdateStats::default();
    let mut first_sum = 0.0f64;
    let mut first_steps = 0usize;
    for pass in 0..cfg.ppo_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let refs: Vec<&Episode> = chunk.iter().map(|&i| &episodes[i]).collect();
            let batch = pack(&refs);
            let (mut tape, bound, j, skipped) = objective_on_tape(model, &batch, cfg.clip_epsilon)?;
            stats.skipped_nonfinite += skipped;
            let Some(j) = j else { continue };
            let kept = batch.picks.len() - skipped;
            if pass == 0 {
                first_sum += tape.value(j)[0] as f64 * kept as f64;
                first_steps += kept;
            }
            let loss = tape.scale(j, -1.0);
            model.zero_grad();
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &bound)?;
            clip_grad_norm(model.params_mut(), cfg.grad_clip_norm);
            opt.step(model.params_mut())?;
            stats.gradient_steps += 1;
        }
    }
    model.zero_grad();
    stats.first_pass_objective = if first_steps == 0 { 0.0 } else { (first_sum / first_steps as f64) as f32 };
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Mean step reward of the rollouts, measured before this episode's update.
    pub mean_reward: f32,
    /// Fraction of validation sequences with at least one violation.
    pub violation_rate: Option<f32>,
    pub rollouts: usize,
    pub skipped_short: usize,
    pub update: Option<UpdateStats>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneReport {
    pub episodes: Vec<EpisodeStats>,
    /// Episode whose pre-update policy was kept.
    pub best_episode: usize,
    pub early_stopped: bool,
}

impl FinetuneReport {
    pub fn rewards(&self) -> Vec<f32> {
        self.episodes.iter().map(|e| e.mean_reward).collect()
    }
}

/// Fraction of `seqs` flagged by the detector under `model`.
pub fn violation_rate(model: &GptModel, seqs: &[KeySequence], cfg: &DetectorConfig) -> Result<f32> {
    let verdicts = detector::detect_all(model, seqs, cfg)?;
    Ok(mean(verdicts.iter().map(|v| if v.anomalous { 1.0 } else { 0.0 })))
}

pub fn finetune(
    model: &mut GptModel,
    train: &[KeySequence],
    cfg: &RlConfig,
    validation: Option<&[KeySequence]>,
) -> Result<FinetuneReport> {
    finetune_with(model, train, cfg, validation, |_, _| {})
}

/// Fine-tunes `model` in place and leaves it at the policy with the best
/// mean rollout reward. `on_episode` sees every episode's statistics.
pub fn finetune_with<F>(
    model: &mut GptModel,
    train: &[KeySequence],
    cfg: &RlConfig,
    validation: Option<&[KeySequence]>,
    mut on_episode: F,
) -> Result<FinetuneReport>
where
    F: FnMut(&EpisodeStats, &GptModel),
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let k = k_for_ratio(cfg.top_k_ratio, model.vocab_size() - RESERVED);
    let mut rng = crate::rng_from_seed(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let take = if cfg.prompts_per_episode == 0 {
        train.len()
    } else {
        cfg.prompts_per_episode.min(train.len())
    };

    let mut report = FinetuneReport::default();
    let mut best: Option<(f32, GptModel)> = None;
    let mut stale = 0usize;
    for episode in 0..cfg.episodes {
        order.shuffle(&mut rng);
        let mut episodes = Vec::with_capacity(take);
        let mut skipped_short = 0;
        for &i in &order[..take] {
            match rollout(model, &train[i].keys, cfg.prompt_ratio, k, &mut rng)? {
                Some(e) => episodes.push(e),
                None => skipped_short += 1,
            }
        }
        let mean_reward = mean(episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.reward)));
        let violation_rate = match validation {
            Some(v) if !v.is_empty() => Some(violation_rate(model, v, &cfg.detector())?),
            _ => None,
        };
        let mut stats = EpisodeStats {
            episode,
            mean_reward,
            violation_rate,
            rollouts: episodes.len(),
            skipped_short,
            update: None,
        };

        if best.as_ref().is_none_or(|(r, _)| mean_reward > *r) {
            best = Some((mean_reward, model.clone()));
            report.best_episode = episode;
            stale = 0;
        } else {
            stale += 1;
        }
        let stop = stale >= cfg.early_stop_patience.max(1);
        if !stop && !episodes.is_empty() {
            stats.update = Some(ppo_update(model, &episodes, cfg, &mut opt, &mut rng)?);
        }
        on_episode(&stats, model);
        report.episodes.push(stats);
        if stop {
            report.early_stopped = true;
            break;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(report)
}
