//! Raw log lines to template ids, and key streams to labeled sequences.

use std::collections::HashMap;

use logsentinel_core::corpus::{self, KeySequence, Label, Provenance, TimedKey};
use logsentinel_core::parser::{DrainConfig, DrainParser, TemplateTable};
use regex::Regex;

use crate::error::{Error, Result};
use crate::formats::keystream::{KeyStream, StreamRecord};
use crate::presets::{Grouping, Preset};

/// Counters for lines that did not yield a key.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseCounts {
    pub lines: usize,
    pub header_mismatch: usize,
    pub empty_content: usize,
}

pub struct ParseOutput {
    pub table: TemplateTable,
    pub stream: KeyStream,
    pub counts: ParseCounts,
}

enum Mode<'a> {
    Mine(DrainParser),
    Frozen(&'a TemplateTable),
}

fn run<'a, I>(lines: I, preset: &Preset, grouping: &Grouping, mut mode: Mode<'_>) -> Result<(KeyStream, ParseCounts, Option<DrainParser>)>
where
    I: IntoIterator<Item = &'a str>,
{
    let session = match grouping {
        Grouping::Session { regex } => Some(
            Regex::new(regex).map_err(|e| Error::Usage(format!("session regex {regex:?}: {e}")))?,
        ),
        _ => None,
    };
    let mut counts = ParseCounts::default();
    let mut records = Vec::new();
    for (i, line) in lines.into_iter().enumerate() {
        counts.lines += 1;
        let Some(caps) = preset.header.captures(line) else {
            counts.header_mismatch += 1;
            continue;
        };
        let content = caps.name("content").map_or("", |m| m.as_str());
        let masked = preset.mask(content);
        let key = match &mut mode {
            Mode::Mine(p) => p.parse_content(&masked),
            Mode::Frozen(t) => t.lookup_content(&masked),
        };
        let key = match key {
            Ok(k) => k,
            Err(logsentinel_core::Error::EmptyContent) => {
                counts.empty_content += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let group = match grouping {
            Grouping::Session { .. } => session
                .as_ref()
                .and_then(|r| r.captures(line))
                .and_then(|c| c.get(1).or_else(|| c.get(0)))
                .map(|m| m.as_str().to_string()),
            Grouping::Window { .. } => caps.name("ts").map(|m| m.as_str().to_string()),
            Grouping::Chunk { .. } => None,
        };
        let label = match caps.name("label").map(|m| m.as_str()) {
            Some("-") => Label::Normal,
            Some(_) => Label::Anomalous,
            None => Label::Unlabeled,
        };
        records.push(StreamRecord {
            line: i as u64 + 1,
            key,
            group,
            label,
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no parseable lines ({} read, {} without the {} header, {} empty)",
            counts.lines, counts.header_mismatch, preset.name, counts.empty_content
        )));
    }
    let stream = KeyStream {
        grouping: grouping.tag(),
        records,
    };
    let parser = match mode {
        Mode::Mine(p) => Some(p),
        Mode::Frozen(_) => None,
    };
    Ok((stream, counts, parser))
}

/// Mines templates from `lines` and maps every line to its key.
pub fn mine<'a, I>(lines: I, preset: &Preset, grouping: &Grouping, drain: DrainConfig) -> Result<ParseOutput>
where
    I: IntoIterator<Item = &'a str>,
{
    let parser = DrainParser::new(drain)?;
    let (stream, counts, parser) = run(lines, preset, grouping, Mode::Mine(parser))?;
    let table = parser.expect("mining mode returns its parser").freeze()?;
    Ok(ParseOutput { table, stream, counts })
}

/// Maps `lines` through an existing table; unmatched lines become UNSEEN.
pub fn apply<'a, I>(lines: I, preset: &Preset, grouping: &Grouping, table: &TemplateTable) -> Result<(KeyStream, ParseCounts)>
where
    I: IntoIterator<Item = &'a str>,
{
    let (stream, counts, _) = run(lines, preset, grouping, Mode::Frozen(table))?;
    Ok((stream, counts))
}

/// Session labels from a CSV with a header row and `session,label` columns,
/// where the label is `Anomaly`/`1` or `Normal`/`0`.
pub fn read_session_labels(text: &str) -> Result<HashMap<String, Label>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("label file row {}: {e}", i + 2)))?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Data(format!("label file row {}: expected two columns", i + 2)));
        };
        let label = match label.trim() {
            "Anomaly" | "anomaly" | "1" => Label::Anomalous,
            "Normal" | "normal" | "0" => Label::Normal,
            other => return Err(Error::Data(format!("label file row {}: unknown label {other:?}", i + 2))),
        };
        out.insert(id.trim().to_string(), label);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct GroupOutput {
    pub sequences: Vec<KeySequence>,
    pub dropped: usize,
}

/// Groups a key stream according to its header tag. Session sequences take
/// their labels from `session_labels` when given, else from their lines;
/// windows and chunks are anomalous if any member line is.
pub fn group(stream: &KeyStream, session_labels: Option<&HashMap<String, Label>>) -> Result<GroupOutput> {
    let tag = stream.grouping.as_str();
    let line_label = |labels: &mut dyn Iterator<Item = Label>| -> Label {
        let mut out = Label::Normal;
        for l in labels {
            match l {
                Label::Anomalous => return Label::Anomalous,
                Label::Unlabeled => out = Label::Unlabeled,
                Label::Normal => {}
            }
        }
        out
    };
    if tag == "session" {
        let g = corpus::group_by_session(stream.records.iter().map(|r| (r.group.as_deref(), r.key)));
        let mut by_session: HashMap<&str, Vec<Label>> = HashMap::new();
        for r in &stream.records {
            if let Some(s) = &r.group {
                by_session.entry(s).or_default().push(r.label);
            }
        }
        let sequences = g
            .sequences
            .into_iter()
            .map(|mut s| {
                let name = s.provenance.to_string();
                s.label = match session_labels {
                    Some(m) => m.get(&name).copied().unwrap_or(Label::Unlabeled),
                    None => line_label(&mut by_session[name.as_str()].iter().copied()),
                };
                s
            })
            .collect();
        return Ok(GroupOutput { sequences, dropped: g.dropped });
    }
    if let Some(secs) = tag.strip_prefix("window:") {
        let secs: u64 = secs
            .parse()
            .map_err(|_| Error::Data(format!("bad window length in group tag {tag:?}")))?;
        let mut timed = Vec::with_capacity(stream.records.len());
        let mut unlabeled = false;
        for r in &stream.records {
            let ts = r
                .group
                .as_deref()
                .ok_or_else(|| Error::Data(format!("line {} has no timestamp", r.line)))?;
            let timestamp: i64 = ts
                .parse()
                .map_err(|_| Error::Data(format!("line {}: unparseable timestamp {ts:?}", r.line)))?;
            unlabeled |= r.label == Label::Unlabeled;
            timed.push(TimedKey {
                timestamp,
                key: r.key,
                anomalous: r.label == Label::Anomalous,
            });
        }
        let mut sequences = corpus::group_by_time_window(&timed, secs)?;
        if unlabeled {
            for s in sequences.iter_mut().filter(|s| s.label == Label::Normal) {
                s.label = Label::Unlabeled;
            }
        }
        return Ok(GroupOutput { sequences, dropped: 0 });
    }
    if let Some(n) = tag.strip_prefix("chunk:") {
        let n: usize = n
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Data(format!("bad chunk length in group tag {tag:?}")))?;
        let sequences = stream
            .records
            .chunks(n)
            .enumerate()
            .map(|(i, c)| {
                KeySequence::new(
                    c.iter().map(|r| r.key).collect(),
                    line_label(&mut c.iter().map(|r| r.label)),
                    Provenance::Window(i as u64),
                )
            })
            .collect();
        return Ok(GroupOutput { sequences, dropped: 0 });
    }
    Err(Error::Data(format!("unknown grouping {tag:?}")))
}
