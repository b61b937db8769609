//! Per-line key stream written by the parse stage.
//!
//! ```text
//! KEYSTREAM v1 group=session
//! 1	0	blk_-160899	?
//! 2	1	blk_-160899	?
//! 3	4294967295	-	?
//! ```
//!
//! Columns: 1-based source line, template id (`4294967295` for a line no
//! template matches), group value (session id, epoch seconds, or `-`) and
//! the line label `0`, `1` or `?`. The header names the grouping rule:
//! `session`, `window:<secs>` or `chunk:<lines>`.

use std::path::Path;

use logsentinel_core::corpus::Label;

use super::{fields, header_value, parse_num};
use crate::error::{FormatError, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRecord {
    pub line: u64,
    pub key: u32,
    pub group: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyStream {
    pub grouping: String,
    pub records: Vec<StreamRecord>,
}

pub fn encode(stream: &KeyStream) -> String {
    let mut out = format!("KEYSTREAM v1 group={}\n", stream.grouping);
    for r in &stream.records {
        let label = match r.label {
            Label::Normal => "0",
            Label::Anomalous => "1",
            Label::Unlabeled => "?",
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{label}\n",
            r.line,
            r.key,
            r.group.as_deref().unwrap_or("-")
        ));
    }
    out
}

pub fn decode(text: &str) -> Result<KeyStream, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FormatError::new(1, "missing header"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.first() != Some(&"KEYSTREAM") || parts.get(1) != Some(&"v1") {
        return Err(FormatError::new(1, "expected KEYSTREAM v1 header"));
    }
    let grouping = header_value(&parts, "group")
        .ok_or_else(|| FormatError::new(1, "missing group"))?
        .to_string();
    if !text.ends_with('\n') {
        return Err(FormatError::new(text.lines().count(), "truncated final line"));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let f = fields(line, 4, lineno)?;
        let label = match f[3] {
            "0" => Label::Normal,
            "1" => Label::Anomalous,
            "?" => Label::Unlabeled,
            other => return Err(FormatError::new(lineno, format!("invalid label {other:?}"))),
        };
        records.push(StreamRecord {
            line: parse_num(f[0], "line number", lineno)?,
            key: parse_num(f[1], "key id", lineno)?,
            group: (f[2] != "-").then(|| f[2].to_string()),
            label,
        });
    }
    Ok(KeyStream { grouping, records })
}

pub fn save(path: &Path, stream: &KeyStream) -> Result<()> {
    io::write_atomic(path, encode(stream).as_bytes())
}

pub fn load(path: &Path) -> Result<KeyStream> {
    decode(&io::read_text(path)?).map_err(|e| e.at(path))
}
