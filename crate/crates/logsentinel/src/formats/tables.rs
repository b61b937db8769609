//! Tab-separated experiment tables: the evaluation report and the per-epoch
//! and per-episode training metrics. Each starts with a header row.

use logsentinel_core::metrics::MetricsReport;
use logsentinel_core::ppo::EpisodeStats;
use logsentinel_core::pretrain::EpochStats;

pub const REPORT_HEADER: &str = "config_hash\tratio_or_size\tprecision\trecall\tf1";
pub const PRETRAIN_HEADER: &str = "epoch\tmean_loss\ttop1_acc";
pub const RL_HEADER: &str = "episode\tmean_reward\tviolation_rate_on_validation";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config_hash: String,
    /// A Top-K ratio or a training-set size, as text.
    pub point: String,
    pub metrics: MetricsReport,
}

pub fn encode_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.config_hash, r.point, r.metrics.precision, r.metrics.recall, r.metrics.f1
        ));
    }
    out
}

/// `(point, precision, recall, f1)` rows of a report.
pub fn decode_report(text: &str) -> Result<Vec<(String, f64, f64, f64)>, crate::error::FormatError> {
    use super::{fields, parse_num};
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(crate::error::FormatError::new(1, "missing report header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let n = i + 2;
            let f = fields(l, 5, n)?;
            Ok((
                f[1].to_string(),
                parse_num(f[2], "precision", n)?,
                parse_num(f[3], "recall", n)?,
                parse_num(f[4], "f1", n)?,
            ))
        })
        .collect()
}

pub fn encode_pretrain(epochs: &[EpochStats]) -> String {
    let mut out = format!("{PRETRAIN_HEADER}\n");
    for e in epochs {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.mean_loss, e.top1_acc));
    }
    out
}

/// Validation violation rate is `-` when no validation set was given.
pub fn encode_rl(episodes: &[EpisodeStats]) -> String {
    let mut out = format!("{RL_HEADER}\n");
    for e in episodes {
        let v = e.violation_rate.map_or("-".to_string(), |v| format!("{v:.6}"));
        out.push_str(&format!("{}\t{:.6}\t{v}\n", e.episode, e.mean_reward));
    }
    out
}
