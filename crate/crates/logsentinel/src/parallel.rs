//! Detection fanned out over scoped worker threads. Each worker scores a
//! contiguous slice, and results are concatenated in input order, so the
//! output does not depend on the number of workers.

use std::thread;

use logsentinel_core::corpus::KeySequence;
use logsentinel_core::detector::{self, DetectorConfig, SequenceScore, Verdict};
use logsentinel_core::model::GptModel;

use crate::error::Result;

/// Per-sequence rank traces, computed with up to `jobs` threads.
pub fn score_batch(model: &GptModel, seqs: &[KeySequence], score_first_key: bool, jobs: usize) -> Result<Vec<SequenceScore>> {
    let jobs = jobs.clamp(1, seqs.len().max(1));
    if jobs == 1 {
        return seqs
            .iter()
            .map(|s| Ok(detector::score(model, s, score_first_key)?))
            .collect();
    }
    let chunk = seqs.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<SequenceScore>>> = thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| Ok(detector::score(model, s, score_first_key)?))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("detection worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(seqs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn detect_batch(model: &GptModel, seqs: &[KeySequence], cfg: &DetectorConfig, jobs: usize) -> Result<Vec<Verdict>> {
    cfg.validate()?;
    let k = detector::k_for(model, cfg);
    Ok(score_batch(model, seqs, cfg.score_first_key, jobs)?
        .iter()
        .map(|s| s.verdict(k))
        .collect())
}
