//! Detection output: one TSV line per sequence, in corpus order,
//! `provenance\tflag\tfirst_violation|-\tviolation_count`, plus an optional
//! JSON-lines trace with the rank of every observed key.

use std::path::Path;

use logsentinel_core::detector::Verdict;
use serde::{Deserialize, Serialize};

use super::{fields, parse_num};
use crate::error::{FormatError, Result};
use crate::io;

/// One verdict line as read back from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerdictLine {
    pub provenance: String,
    pub anomalous: bool,
    pub first_violation: Option<usize>,
    pub violation_count: usize,
}

impl From<&Verdict> for VerdictLine {
    fn from(v: &Verdict) -> Self {
        VerdictLine {
            provenance: v.provenance.to_string(),
            anomalous: v.anomalous,
            first_violation: v.first_violation,
            violation_count: v.violation_count,
        }
    }
}

/// One trace record; `ranks[i]` is null for an unscored position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub provenance: String,
    pub flag: u8,
    pub k: usize,
    pub keys: Vec<u32>,
    pub ranks: Vec<Option<usize>>,
}

pub fn encode(verdicts: &[Verdict]) -> String {
    let mut out = String::new();
    for v in verdicts {
        let first = v.first_violation.map_or("-".to_string(), |i| i.to_string());
        out.push_str(&format!(
            "{}\t{}\t{first}\t{}\n",
            v.provenance,
            u8::from(v.anomalous),
            v.violation_count
        ));
    }
    out
}

pub fn decode(text: &str) -> Result<Vec<VerdictLine>, FormatError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let n = i + 1;
            let f = fields(line, 4, n)?;
            let anomalous = match f[1] {
                "0" => false,
                "1" => true,
                other => return Err(FormatError::new(n, format!("invalid flag {other:?}"))),
            };
            let first_violation = match f[2] {
                "-" => None,
                s => Some(parse_num(s, "first violation", n)?),
            };
            Ok(VerdictLine {
                provenance: f[0].to_string(),
                anomalous,
                first_violation,
                violation_count: parse_num(f[3], "violation count", n)?,
            })
        })
        .collect()
}

pub fn encode_trace(verdicts: &[Verdict], keys: &[&[u32]], k: usize) -> String {
    let mut out = String::new();
    for (v, keys) in verdicts.iter().zip(keys) {
        let rec = TraceRecord {
            provenance: v.provenance.to_string(),
            flag: u8::from(v.anomalous),
            k,
            keys: keys.to_vec(),
            ranks: v.ranks.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("plain data serializes"));
        out.push('\n');
    }
    out
}

pub fn save(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    io::write_atomic(path, encode(verdicts).as_bytes())
}

pub fn load(path: &Path) -> Result<Vec<VerdictLine>> {
    decode(&io::read_text(path)?).map_err(|e| e.at(path))
}
