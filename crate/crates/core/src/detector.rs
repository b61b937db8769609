//! The single-violation Top-K detection rule.
//!
//! A sequence is scored once: the model sees `[BOS, k1, .., k(T-1)]` and the
//! rank of every observed key in its predictive distribution is recorded.
//! A position violates under `K` when that rank is `K` or more. Reserved ids
//! (UNSEEN in particular) rank after every mined key, so they violate for
//! every admissible `K`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{KeySequence, Provenance, RESERVED};
use crate::model::{in_top_k, rank_of, GptModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Fraction of mined training keys forming the Top-K set.
    pub top_k_ratio: f32,
    /// Also check the first key against the prediction made from BOS.
    pub score_first_key: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            top_k_ratio: 0.5,
            score_first_key: true,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_k_ratio > 0.0 && self.top_k_ratio <= 1.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "top_k_ratio {} outside (0, 1]",
                self.top_k_ratio
            )));
        }
        Ok(())
    }
}

/// `ceil(ratio × mined)` clamped to `[1, mined]`.
pub fn k_for_ratio(ratio: f32, mined: usize) -> usize {
    // An f32 ratio such as 0.3 is slightly above its decimal value; the
    // slack keeps 0.3 × 10 at 3 rather than 4.
    let raw = libm::ceil(ratio as f64 * mined as f64 - 1e-5);
    (raw.max(1.0) as usize).clamp(1, mined.max(1))
}

/// Whether observing `key` after a state with distribution `dist` is a
/// violation under Top-`k`. The RL reward is derived from the same test.
pub fn violates(dist: &[f32], key: u32, k: usize) -> Result<bool> {
    Ok(!in_top_k(dist, key, k)?)
}

/// Per-position ranks of one sequence, reusable across any `K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceScore {
    pub provenance: Provenance,
    /// Rank of the observed key at each position; `None` where the
    /// position is not scored.
    pub ranks: Vec<Option<usize>>,
}

impl SequenceScore {
    pub fn verdict(&self, k: usize) -> Verdict {
        let mut first = None;
        let mut count = 0;
        for (i, r) in self.ranks.iter().enumerate() {
            if matches!(r, Some(r) if *r >= k) {
                count += 1;
                first.get_or_insert(i);
            }
        }
        Verdict {
            provenance: self.provenance.clone(),
            anomalous: count > 0,
            first_violation: first,
            violation_count: count,
            vacuous: self.ranks.iter().all(Option::is_none),
            ranks: self.ranks.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub provenance: Provenance,
    pub anomalous: bool,
    /// 0-based index of the first violating key.
    pub first_violation: Option<usize>,
    pub violation_count: usize,
    /// No position was checked (a lone key with first-key scoring off).
    pub vacuous: bool,
    pub ranks: Vec<Option<usize>>,
}

/// Scores `seq` (already in vocabulary ids) under `model`.
pub fn score(model: &GptModel, seq: &KeySequence, score_first_key: bool) -> Result<SequenceScore> {
    if seq.is_empty() {
        return Err(Error::Empty("sequence"));
    }
    let vocab = model.vocab_size();
    if let Some(&bad) = seq.keys.iter().find(|&&k| k as usize >= vocab) {
        return Err(Error::BadId { id: bad as usize, vocab });
    }
    let pool = vocab - RESERVED;
    let mut input = Vec::with_capacity(seq.len());
    input.push(crate::corpus::BOS);
    input.extend_from_slice(&seq.keys[..seq.len() - 1]);
    let dists = model.distributions(&input)?;
    if dists.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("next-key distribution"));
    }
    let ranks = seq
        .keys
        .iter()
        .zip(&dists)
        .enumerate()
        .map(|(i, (&key, dist))| {
            if i > 0 || score_first_key {
                Some(rank_of(dist, key))
            } else if (key as usize) < RESERVED {
                Some(pool)
            } else {
                None
            }
        })
        .collect();
    Ok(SequenceScore {
        provenance: seq.provenance.clone(),
        ranks,
    })
}

/// Top-K size the detector uses for `model` under `cfg`.
pub fn k_for(model: &GptModel, cfg: &DetectorConfig) -> usize {
    k_for_ratio(cfg.top_k_ratio, model.vocab_size() - RESERVED)
}

pub fn detect(model: &GptModel, seq: &KeySequence, cfg: &DetectorConfig) -> Result<Verdict> {
    cfg.validate()?;
    Ok(score(model, seq, cfg.score_first_key)?.verdict(k_for(model, cfg)))
}

/// Sequential batch detection; output order follows input order.
pub fn detect_all(model: &GptModel, seqs: &[KeySequence], cfg: &DetectorConfig) -> Result<Vec<Verdict>> {
    cfg.validate()?;
    let k = k_for(model, cfg);
    seqs.iter()
        .map(|s| Ok(score(model, s, cfg.score_first_key)?.verdict(k)))
        .collect()
}
