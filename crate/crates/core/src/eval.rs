//! End-to-end experiments: split, pretrain, optional fine-tuning, detect and
//! score. Sweeps over the Top-K ratio and the training size, and the paired
//! with/without fine-tuning ablation, are built on the same runner.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_split, encode_split, CorpusSplit, KeySequence, Label, DEFAULT_MAX_KEYS, RESERVED};
use crate::detector::{self, k_for_ratio, DetectorConfig, SequenceScore, Verdict};
use crate::metrics::{score as score_metrics, MetricsReport};
use crate::model::{GptModel, ModelConfig};
use crate::ppo::{finetune, FinetuneReport, RlConfig};
use crate::pretrain::{pretrain, PretrainReport, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub n_train: usize,
    pub split_seed: u64,
    pub max_keys: usize,
    /// Architecture; the vocabulary size is filled in from the split.
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub use_rl: bool,
    pub detector: DetectorConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_train: 5000,
            split_seed: 0,
            max_keys: DEFAULT_MAX_KEYS,
            model: ModelConfig::default(),
            model_seed: 0,
            train: TrainConfig::default(),
            rl: RlConfig::default(),
            use_rl: true,
            detector: DetectorConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Fine-tuning settings with the detector's Top-K ratio and first-key
    /// rule, so the reward optimizes what detection measures.
    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            top_k_ratio: self.detector.top_k_ratio,
            score_first_key: self.detector.score_first_key,
            ..self.rl
        }
    }
}

/// Labeled test sequences (normal, then anomalous) and their labels.
pub fn labeled_test(split: &CorpusSplit) -> (Vec<KeySequence>, Vec<bool>) {
    let seqs: Vec<KeySequence> = split.test_normal.iter().chain(&split.test_anomalous).cloned().collect();
    let labels = seqs.iter().map(|s| s.label == Label::Anomalous).collect();
    (seqs, labels)
}

pub fn evaluate(model: &GptModel, seqs: &[KeySequence], labels: &[bool], cfg: &DetectorConfig) -> Result<(Vec<Verdict>, MetricsReport)> {
    let verdicts = detector::detect_all(model, seqs, cfg)?;
    let flags: Vec<bool> = verdicts.iter().map(|v| v.anomalous).collect();
    let report = score_metrics(&flags, labels)?;
    Ok((verdicts, report))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub split: CorpusSplit,
    pub pretrain: PretrainReport,
    /// Fingerprint of the model right after pretraining.
    pub pretrained_fingerprint: u64,
    pub finetune: Option<FinetuneReport>,
    pub model: GptModel,
    pub verdicts: Vec<Verdict>,
    pub metrics: MetricsReport,
}

fn pretrained_model(split: &CorpusSplit, cfg: &ExperimentConfig) -> Result<(GptModel, PretrainReport)> {
    let model_cfg = ModelConfig {
        vocab_size: split.vocab.size(),
        ..cfg.model
    };
    let mut model = GptModel::new(model_cfg, cfg.model_seed)?;
    let report = pretrain(&mut model, &split.train, &split.vocab, &cfg.train)?;
    Ok((model, report))
}

/// Runs the whole pipeline on an already built split.
pub fn run_on_split(split: CorpusSplit, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (mut model, pretrain_report) = pretrained_model(&split, cfg)?;
    let pretrained_fingerprint = model.fingerprint();
    let finetune_report = if cfg.use_rl {
        Some(finetune(&mut model, &split.train, &cfg.rl_config(), None)?)
    } else {
        None
    };
    let (seqs, labels) = labeled_test(&split);
    let (verdicts, metrics) = evaluate(&model, &seqs, &labels, &cfg.detector)?;
    Ok(ExperimentOutcome {
        split,
        pretrain: pretrain_report,
        pretrained_fingerprint,
        finetune: finetune_report,
        model,
        verdicts,
        metrics,
    })
}

/// Splits raw `sequences` with `cfg.n_train` and runs the pipeline.
pub fn run_experiment(sequences: &[KeySequence], cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let split = build_split(sequences, cfg.n_train, cfg.split_seed, cfg.max_keys)?;
    run_on_split(split, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKRow {
    pub ratio: f32,
    pub k: usize,
    pub metrics: MetricsReport,
    /// Per-sequence flags in input order.
    pub flagged: Vec<bool>,
}

/// The default sweep grid `0.1, 0.2, .., 1.0`.
pub fn default_ratios() -> Vec<f32> {
    (1..=10).map(|i| i as f32 / 10.0).collect()
}

/// Scores every sequence once and re-thresholds for each ratio.
pub fn sweep_top_k(
    model: &GptModel,
    seqs: &[KeySequence],
    labels: &[bool],
    ratios: &[f32],
    score_first_key: bool,
) -> Result<Vec<TopKRow>> {
    let scores: Vec<SequenceScore> = seqs
        .iter()
        .map(|s| detector::score(model, s, score_first_key))
        .collect::<Result<_>>()?;
    let mined = model.vocab_size() - RESERVED;
    ratios
        .iter()
        .map(|&ratio| {
            DetectorConfig { top_k_ratio: ratio, score_first_key }.validate()?;
            let k = k_for_ratio(ratio, mined);
            let flagged: Vec<bool> = scores.iter().map(|s| s.verdict(k).anomalous).collect();
            let metrics = score_metrics(&flagged, labels)?;
            Ok(TopKRow {
                ratio,
                k,
                metrics,
                flagged,
            })
        })
        .collect()
}

/// One split per training size. The test set is fixed: the normal
/// sequences outside the largest training pool, plus every anomalous one.
/// Smaller training sets are prefixes of the same seeded pool, and the
/// vocabulary is rebuilt for each.
pub fn size_sweep_splits(
    sequences: &[KeySequence],
    sizes: &[usize],
    cfg: &ExperimentConfig,
) -> Result<Vec<(usize, CorpusSplit)>> {
    let Some(&largest) = sizes.iter().max() else {
        return Ok(Vec::new());
    };
    let mut normal: Vec<usize> = sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Normal && !s.is_empty())
        .map(|(i, _)| i)
        .collect();
    if normal.len() < largest {
        return Err(Error::InsufficientNormal {
            needed: largest,
            available: normal.len(),
        });
    }
    normal.shuffle(&mut crate::rng_from_seed(cfg.split_seed));
    let mut in_pool = alloc::vec![false; sequences.len()];
    normal[..largest].iter().for_each(|&i| in_pool[i] = true);
    let test: Vec<&KeySequence> = sequences
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_pool[*i])
        .map(|(_, s)| s)
        .collect();
    Ok(sizes
        .iter()
        .map(|&size| {
            let raw_train = normal[..size].iter().map(|&i| sequences[i].clone()).collect();
            (size, encode_split(raw_train, test.iter().copied(), cfg.max_keys))
        })
        .collect())
}

/// Pretrains on `split.train` and fine-tunes when `cfg.use_rl` is set.
pub fn train_on_split(split: &CorpusSplit, cfg: &ExperimentConfig) -> Result<GptModel> {
    let (mut model, _) = pretrained_model(split, cfg)?;
    if cfg.use_rl {
        finetune(&mut model, &split.train, &cfg.rl_config(), None)?;
    }
    Ok(model)
}

/// Pipeline metrics for each training size over [`size_sweep_splits`].
pub fn sweep_training_size(
    sequences: &[KeySequence],
    sizes: &[usize],
    cfg: &ExperimentConfig,
) -> Result<Vec<(usize, MetricsReport)>> {
    size_sweep_splits(sequences, sizes, cfg)?
        .into_iter()
        .map(|(size, split)| Ok((size, run_on_split(split, cfg)?.metrics)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub pretrained: MetricsReport,
    pub finetuned: MetricsReport,
    /// Both branches start from this pretrained model.
    pub pretrained_fingerprint: u64,
    pub finetune: Option<FinetuneReport>,
    pub pretrained_model: GptModel,
    pub finetuned_model: GptModel,
    pub split: CorpusSplit,
}

/// Pretrains once, then evaluates the model as is and after fine-tuning.
/// With `cfg.use_rl` off the second branch is the first one unchanged.
pub fn ablate_rl(sequences: &[KeySequence], cfg: &ExperimentConfig) -> Result<Ablation> {
    let split = build_split(sequences, cfg.n_train, cfg.split_seed, cfg.max_keys)?;
    let (pretrained_model, _) = pretrained_model(&split, cfg)?;
    let (seqs, labels) = labeled_test(&split);
    let (_, pretrained) = evaluate(&pretrained_model, &seqs, &labels, &cfg.detector)?;
    let mut finetuned_model = pretrained_model.clone();
    let finetune_report = if cfg.use_rl {
        Some(finetune(&mut finetuned_model, &split.train, &cfg.rl_config(), None)?)
    } else {
        None
    };
    let (_, finetuned) = evaluate(&finetuned_model, &seqs, &labels, &cfg.detector)?;
    Ok(Ablation {
        pretrained,
        finetuned,
        pretrained_fingerprint: pretrained_model.fingerprint(),
        finetune: finetune_report,
        pretrained_model,
        finetuned_model,
        split,
    })
}
