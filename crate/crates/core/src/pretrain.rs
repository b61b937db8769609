//! Next-key language-model training on normal sequences.
//!
//! The objective is the mean negative log-likelihood of every next key
//! given its prefix, averaged per token (not per sequence). Each sequence is
//! fed as `[BOS, k1, .., kT]`; with `score_first_key` the BOS position
//! predicts `k1` as well, otherwise targets start at `k2`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{KeySequence, Vocabulary, BOS, PAD};
use crate::model::{rank_of, GptModel};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip_norm: f32,
    /// Epochs between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub score_first_key: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            grad_clip_norm: 1.0,
            checkpoint_every: 0,
            score_first_key: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A right-padded batch. `inputs` and `targets` are `rows × width`,
/// row-major; a target equal to the pad id is masked out of the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub width: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn masked_targets(&self, pad_id: u32) -> usize {
        self.targets.iter().filter(|&&t| t == pad_id).count()
    }

    pub fn target_count(&self, pad_id: u32) -> usize {
        self.targets.len() - self.masked_targets(pad_id)
    }
}

/// Groups `sequences` into batches of `batch_size`, right-pads each batch to
/// its longest member, and shifts left by one to form targets.
pub fn batchify(sequences: &[&[u32]], batch_size: usize, pad_id: u32) -> Vec<Batch> {
    let mut out = Vec::new();
    for chunk in sequences.chunks(batch_size.max(1)) {
        let full = chunk.iter().map(|s| s.len()).max().unwrap_or(0);
        if full < 2 {
            continue;
        }
        let width = full - 1;
        let mut inputs = vec![pad_id; chunk.len() * width];
        let mut targets = vec![pad_id; chunk.len() * width];
        for (r, s) in chunk.iter().enumerate() {
            for (i, &k) in s.iter().enumerate() {
                if i < width {
                    inputs[r * width + i] = k;
                }
                if i > 0 {
                    targets[r * width + i - 1] = k;
                }
            }
        }
        out.push(Batch {
            rows: chunk.len(),
            width,
            inputs,
            targets,
        });
    }
    out
}

/// `[BOS, k1, .., kT]` model rows for a set of sequences.
pub fn with_bos<'a, I>(sequences: I) -> Vec<Vec<u32>>
where
    I: IntoIterator<Item = &'a KeySequence>,
{
    sequences
        .into_iter()
        .map(|s| {
            let mut row = Vec::with_capacity(s.len() + 1);
            row.push(BOS);
            row.extend_from_slice(&s.keys);
            row
        })
        .collect()
}

fn mask_first_targets(batch: &mut Batch) {
    for r in 0..batch.rows {
        batch.targets[r * batch.width] = PAD;
    }
}

/// Per-epoch training statistics (train mode, so dropout is active).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub top1_acc: f32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub epochs: Vec<EpochStats>,
}

impl PretrainReport {
    pub fn losses(&self) -> Vec<f32> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

/// Loss of one batch on a fresh tape; gradients land in the model when
/// `accumulate` is set.
fn batch_step(
    model: &mut GptModel,
    batch: &Batch,
    rng: Option<&mut crate::Rng>,
    accumulate: bool,
) -> Result<(f32, usize, usize)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let logits = model.forward_on_tape(&mut tape, &bound, &batch.inputs, batch.width, rng)?;
    let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
    let loss = tape.cross_entropy(logits, &targets, Some(PAD as usize))?;
    let v = model.vocab_size();
    let mut correct = 0;
    let mut counted = 0;
    for (row, &t) in tape.value(logits).chunks(v).zip(&batch.targets) {
        if t == PAD {
            continue;
        }
        counted += 1;
        if rank_of(row, t) == 0 {
            correct += 1;
        }
    }
    let value = tape.value(loss)[0];
    if accumulate && value.is_finite() {
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &bound)?;
    }
    Ok((value, correct, counted))
}

/// Trains `model` on `train` and reports per-epoch loss and accuracy.
pub fn pretrain(
    model: &mut GptModel,
    train: &[KeySequence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    pretrain_with(model, train, vocab, cfg, |_, _| {})
}

/// [`pretrain`] with a hook called after every epoch.
pub fn pretrain_with<F>(
    model: &mut GptModel,
    train: &[KeySequence],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<PretrainReport>
where
    F: FnMut(&EpochStats, &GptModel),
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if vocab.size() != model.vocab_size() {
        return Err(Error::VocabMismatch {
            model: model.vocab_size(),
            corpus: vocab.size(),
        });
    }
    let rows = with_bos(train);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut shuffle_rng = crate::rng_from_seed(cfg.seed);
    let mut dropout_rng = crate::rng_from_seed(cfg.seed ^ 0x5eed_d20f);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), model.params());
    let mut report = PretrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let ordered: Vec<&[u32]> = order.iter().map(|&i| rows[i].as_slice()).collect();
        let mut total_loss = 0.0f64;
        let mut total_tokens = 0usize;
        let mut total_correct = 0usize;
        for (b, mut batch) in batchify(&ordered, cfg.batch_size, PAD).into_iter().enumerate() {
            if !cfg.score_first_key {
                mask_first_targets(&mut batch);
            }
            if batch.target_count(PAD) == 0 {
                continue;
            }
            model.zero_grad();
            let (loss, correct, tokens) = batch_step(model, &batch, Some(&mut dropout_rng), true)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            clip_grad_norm(model.params_mut(), cfg.grad_clip_norm);
            opt.step(model.params_mut())?;
            total_loss += loss as f64 * tokens as f64;
            total_tokens += tokens;
            total_correct += correct;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: if total_tokens == 0 { 0.0 } else { (total_loss / total_tokens as f64) as f32 },
            top1_acc: if total_tokens == 0 { 0.0 } else { total_correct as f32 / total_tokens as f32 },
        };
        on_epoch(&stats, model);
        report.epochs.push(stats);
    }
    model.zero_grad();
    Ok(report)
}

/// Per-token loss, top-1 accuracy and token count of a model on held-out
/// sequences, in eval mode, under the PAD-masked predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmEval {
    pub mean_loss: f32,
    pub top1_acc: f32,
    pub tokens: usize,
}

pub fn evaluate(model: &GptModel, sequences: &[KeySequence], score_first_key: bool) -> Result<LmEval> {
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for row in with_bos(sequences) {
        if row.len() < 2 {
            continue;
        }
        let dists = model.distributions(&row[..row.len() - 1])?;
        let start = if score_first_key { 0 } else { 1 };
        for (t, dist) in dists.iter().enumerate().skip(start) {
            let target = row[t + 1];
            loss -= libm::log(dist[target as usize].max(f32::MIN_POSITIVE) as f64);
            if rank_of(dist, target) == 0 {
                correct += 1;
            }
            tokens += 1;
        }
    }
    Ok(LmEval {
        mean_loss: if tokens == 0 { 0.0 } else { (loss / tokens as f64) as f32 },
        top1_acc: if tokens == 0 { 0.0 } else { correct as f32 / tokens as f32 },
        tokens,
    })
}

/// Mean batched loss of `sequences` without updating anything.
pub fn batched_loss(model: &GptModel, sequences: &[KeySequence], batch_size: usize, score_first_key: bool) -> Result<f32> {
    let rows = with_bos(sequences);
    let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
    let mut model = model.clone();
    let mut total = 0.0f64;
    let mut count = 0usize;
    for mut batch in batchify(&refs, batch_size, PAD) {
        if !score_first_key {
            mask_first_targets(&mut batch);
        }
        let (loss, _, tokens) = batch_step(&mut model, &batch, None, false)?;
        total += loss as f64 * tokens as f64;
        count += tokens;
    }
    Ok(if count == 0 { 0.0 } else { (total / count as f64) as f32 })
}

/// Unpadded per-sequence loss summed over tokens and divided by the token
/// count; the reference the batched loss must agree with.
pub fn naive_loss(model: &GptModel, sequences: &[KeySequence], score_first_key: bool) -> Result<f32> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for row in with_bos(sequences) {
        if row.len() < 2 {
            continue;
        }
        let logits = model.forward(&row[..row.len() - 1], None)?;
        let v = model.vocab_size();
        let start = if score_first_key { 0 } else { 1 };
        for (t, l) in logits.data().chunks(v).enumerate().skip(start) {
            let mut lsm = l.to_vec();
            crate::tensor::log_softmax_in_place(&mut lsm);
            total -= lsm[row[t + 1] as usize] as f64;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { (total / count as f64) as f32 })
}
