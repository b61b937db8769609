//! Sequence corpus and vocabulary sidecar formats.
//!
//! ```text
//! LOGSEQ v1 vocab=18
//! 0	blk_1	3 4 4 7
//! 1	window:12	3 2 9
//! ?	blk_9	5
//! ```
//!
//! Labels are `0` (normal), `1` (anomalous) or `?` (unlabeled). In a
//! `vocab=<n>` corpus the ids are model ids and must be below `n`. A corpus
//! with header `LOGSEQ v1 raw` holds raw template ids instead, as produced
//! before a vocabulary exists.
//!
//! The vocabulary sidecar lists the raw template id behind each mined id:
//!
//! ```text
//! VOCAB v1 size=18
//! 3	0
//! 4	2
//! ```

use std::path::Path;

use logsentinel_core::corpus::{KeySequence, Label, Provenance, Vocabulary, RESERVED};

use super::{fields, header_value, parse_num};
use crate::error::{FormatError, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdSpace {
    /// Model ids for a vocabulary of the given size.
    Vocab(usize),
    /// Raw template ids.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    pub ids: IdSpace,
    pub sequences: Vec<KeySequence>,
}

fn label_str(l: Label) -> &'static str {
    match l {
        Label::Normal => "0",
        Label::Anomalous => "1",
        Label::Unlabeled => "?",
    }
}

pub fn encode(ids: IdSpace, sequences: &[KeySequence]) -> String {
    let mut out = match ids {
        IdSpace::Vocab(n) => format!("LOGSEQ v1 vocab={n}\n"),
        IdSpace::Raw => "LOGSEQ v1 raw\n".to_string(),
    };
    for s in sequences {
        let keys: Vec<String> = s.keys.iter().map(u32::to_string).collect();
        out.push_str(label_str(s.label));
        out.push('\t');
        out.push_str(&s.provenance.to_string());
        out.push('\t');
        out.push_str(&keys.join(" "));
        out.push('\n');
    }
    out
}

pub fn decode(text: &str) -> Result<CorpusFile, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FormatError::new(1, "missing header"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.first() != Some(&"LOGSEQ") {
        return Err(FormatError::new(1, "expected LOGSEQ header"));
    }
    if parts.get(1) != Some(&"v1") {
        return Err(FormatError::new(1, format!("unsupported version {:?}", parts.get(1))));
    }
    let ids = match (parts.get(2), header_value(&parts, "vocab")) {
        (Some(&"raw"), _) => IdSpace::Raw,
        (_, Some(n)) => {
            let n: usize = parse_num(n, "vocabulary size", 1)?;
            if n < RESERVED {
                return Err(FormatError::new(1, format!("vocabulary size {n} below {RESERVED}")));
            }
            IdSpace::Vocab(n)
        }
        _ => return Err(FormatError::new(1, "header needs vocab=<n> or raw")),
    };
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(FormatError::new(text.lines().count(), "truncated final line"));
    }
    let mut sequences = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let f = fields(line, 3, lineno)?;
        let label = match f[0] {
            "0" => Label::Normal,
            "1" => Label::Anomalous,
            "?" => Label::Unlabeled,
            other => return Err(FormatError::new(lineno, format!("invalid label {other:?}"))),
        };
        if f[1].is_empty() {
            return Err(FormatError::new(lineno, "empty provenance"));
        }
        let keys = f[2]
            .split(' ')
            .map(|k| parse_num::<u32>(k, "key id", lineno))
            .collect::<Result<Vec<u32>, _>>()?;
        if keys.is_empty() {
            return Err(FormatError::new(lineno, "empty sequence"));
        }
        if let IdSpace::Vocab(n) = ids {
            if let Some(bad) = keys.iter().find(|&&k| k as usize >= n) {
                return Err(FormatError::new(lineno, format!("key id {bad} outside vocabulary of size {n}")));
            }
        }
        let provenance: Provenance = f[1].parse().unwrap_or_else(|e| match e {});
        sequences.push(KeySequence::new(keys, label, provenance));
    }
    Ok(CorpusFile { ids, sequences })
}

pub fn save(path: &Path, ids: IdSpace, sequences: &[KeySequence]) -> Result<()> {
    io::write_atomic(path, encode(ids, sequences).as_bytes())
}

pub fn load(path: &Path) -> Result<CorpusFile> {
    decode(&io::read_text(path)?).map_err(|e| e.at(path))
}

pub fn encode_vocab(vocab: &Vocabulary) -> String {
    let mut out = format!("VOCAB v1 size={}\n", vocab.size());
    for (i, raw) in vocab.raw_keys().iter().enumerate() {
        out.push_str(&format!("{}\t{raw}\n", i + RESERVED));
    }
    out
}

pub fn decode_vocab(text: &str) -> Result<Vocabulary, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FormatError::new(1, "missing header"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.first() != Some(&"VOCAB") || parts.get(1) != Some(&"v1") {
        return Err(FormatError::new(1, "expected VOCAB v1 header"));
    }
    let size: usize = parse_num(
        header_value(&parts, "size").ok_or_else(|| FormatError::new(1, "missing size"))?,
        "size",
        1,
    )?;
    let mut raw = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let f = fields(line, 2, lineno)?;
        let id: usize = parse_num(f[0], "vocabulary id", lineno)?;
        if id != raw.len() + RESERVED {
            return Err(FormatError::new(lineno, format!("vocabulary id {id} out of order")));
        }
        let key: u32 = parse_num(f[1], "raw key", lineno)?;
        if raw.last().is_some_and(|&prev| prev >= key) {
            return Err(FormatError::new(lineno, "raw keys must be strictly ascending"));
        }
        raw.push(key);
    }
    if raw.len() + RESERVED != size {
        return Err(FormatError::new(
            raw.len() + 2,
            format!("header declares size {size}, found {} entries", raw.len() + RESERVED),
        ));
    }
    Ok(Vocabulary::from_raw_keys(raw))
}

pub fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    io::write_atomic(path, encode_vocab(vocab).as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    decode_vocab(&io::read_text(path)?).map_err(|e| e.at(path))
}
