//! Per-dataset line formats: how to find the message content, the timestamp
//! and the alert label, which spans to mask, and how lines group into
//! sequences.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 4] = ["hdfs", "bgl", "thunderbird", "generic"];

/// How parsed lines become sequences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Grouping {
    /// One sequence per value captured by the regex's first group.
    Session { regex: String },
    /// Tumbling windows over the line timestamp, in seconds.
    Window { secs: u64 },
    /// Consecutive runs of this many lines.
    Chunk { lines: usize },
}

impl Grouping {
    /// Header form used in key stream files, e.g. `window:60`.
    pub fn tag(&self) -> String {
        match self {
            Grouping::Session { .. } => "session".into(),
            Grouping::Window { secs } => format!("window:{secs}"),
            Grouping::Chunk { lines } => format!("chunk:{lines}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    /// Named groups: `content` (required), `ts` (epoch seconds) and `label`.
    pub header: Regex,
    pub masks: Vec<Regex>,
    /// Whether whitespace tokens made only of digits become wildcards.
    pub mask_numbers: bool,
    pub grouping: Grouping,
}

const BLOCK: &str = r"blk_-?[0-9]+";
const IP_PORT: &str = r"/?(?:[0-9]{1,3}\.){3}[0-9]{1,3}(?::[0-9]+)?";
const HEX: &str = r"0[xX][0-9a-fA-F]+";

fn re(s: &str) -> Regex {
    Regex::new(s).expect("built-in pattern")
}

impl Preset {
    pub fn by_name(name: &str) -> Result<Preset> {
        let common = || vec![re(BLOCK), re(IP_PORT), re(HEX)];
        let p = match name {
            "hdfs" => Preset {
                name: "hdfs",
                header: re(r"^\d{6} \d{6} \d+ \S+ [^:]+: (?P<content>.*)$"),
                masks: common(),
                mask_numbers: true,
                grouping: Grouping::Session {
                    regex: format!("({BLOCK})"),
                },
            },
            "bgl" => Preset {
                name: "bgl",
                header: re(r"^(?P<label>\S+) (?P<ts>-?\d+) \S+ \S+ \S+ \S+ \S+ \S+ \S+ (?P<content>.*)$"),
                masks: common(),
                mask_numbers: true,
                grouping: Grouping::Window { secs: 60 },
            },
            "thunderbird" => Preset {
                name: "thunderbird",
                header: re(r"^(?P<label>\S+) (?P<ts>-?\d+) \S+ \S+ \S+ +\S+ \S+ \S+ (?P<content>.*)$"),
                masks: common(),
                mask_numbers: true,
                grouping: Grouping::Window { secs: 60 },
            },
            "generic" => Preset {
                name: "generic",
                header: re(r"^(?P<content>.*)$"),
                masks: common(),
                mask_numbers: true,
                grouping: Grouping::Chunk { lines: 20 },
            },
            other => {
                return Err(Error::Usage(format!(
                    "unknown preset {other:?}; available presets: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(p)
    }

    /// Content with masked spans replaced by the wildcard marker.
    pub fn mask(&self, content: &str) -> String {
        let mut s = content.to_string();
        for m in &self.masks {
            if m.is_match(&s) {
                s = m.replace_all(&s, logsentinel_core::parser::WILDCARD).into_owned();
            }
        }
        if self.mask_numbers {
            let toks: Vec<&str> = s
                .split_whitespace()
                .map(|t| {
                    if t.bytes().all(|b| b.is_ascii_digit() || b == b'-') && t.bytes().any(|b| b.is_ascii_digit()) {
                        logsentinel_core::parser::WILDCARD
                    } else {
                        t
                    }
                })
                .collect();
            s = toks.join(" ");
        }
        s
    }
}
