//! Template table text format.
//!
//! ```text
//! DRAINTBL v1 depth=4 sim=0.5 max_children=100 templates=2
//! 0	Receiving block <*> src <*>
//! 1	PacketResponder <*> terminating
//! ```
//!
//! `max_children` and `templates` (the line count, used to detect truncation)
//! are optional on read.

use std::path::Path;

use logsentinel_core::parser::{DrainConfig, LogTemplate, TemplateTable, Token};

use super::{header_value, parse_num};
use crate::error::{FormatError, Result};
use crate::io;

const MAGIC: &str = "DRAINTBL";
const VERSION: &str = "v1";

pub fn encode(table: &TemplateTable) -> String {
    let c = table.config();
    let mut out = format!(
        "{MAGIC} {VERSION} depth={} sim={} max_children={} templates={}\n",
        c.depth,
        c.sim_threshold,
        c.max_children,
        table.len()
    );
    for t in table.templates() {
        let text: Vec<&str> = t.tokens.iter().map(Token::as_str).collect();
        out.push_str(&format!("{}\t{}\n", t.key_id, text.join(" ")));
    }
    out
}

pub fn decode(text: &str) -> Result<TemplateTable, FormatError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| FormatError::new(1, "missing header"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.first() != Some(&MAGIC) {
        return Err(FormatError::new(1, format!("expected {MAGIC} header")));
    }
    if parts.get(1) != Some(&VERSION) {
        return Err(FormatError::new(1, format!("unsupported version {:?}", parts.get(1))));
    }
    let mut config = DrainConfig::default();
    config.depth = parse_num(header_value(&parts, "depth").ok_or_else(|| FormatError::new(1, "missing depth"))?, "depth", 1)?;
    config.sim_threshold = parse_num(header_value(&parts, "sim").ok_or_else(|| FormatError::new(1, "missing sim"))?, "sim", 1)?;
    if let Some(m) = header_value(&parts, "max_children") {
        config.max_children = parse_num(m, "max_children", 1)?;
    }
    let mut templates = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| FormatError::new(lineno, "expected <key_id>\\t<tokens>"))?;
        let key_id: u32 = parse_num(id, "key id", lineno)?;
        if key_id as usize != templates.len() {
            return Err(FormatError::new(lineno, format!("key id {key_id} out of order")));
        }
        let tokens: Vec<Token> = body.split(' ').filter(|t| !t.is_empty()).map(Token::from_text).collect();
        if tokens.is_empty() {
            return Err(FormatError::new(lineno, "template has no tokens"));
        }
        templates.push(LogTemplate {
            key_id,
            tokens,
            match_count: 0,
        });
    }
    if !text.ends_with('\n') {
        return Err(FormatError::new(templates.len() + 1, "truncated final line"));
    }
    if let Some(n) = header_value(&parts, "templates") {
        let n: usize = parse_num(n, "template count", 1)?;
        if n != templates.len() {
            return Err(FormatError::new(
                templates.len() + 1,
                format!("header declares {n} templates, found {}", templates.len()),
            ));
        }
    }
    let n = templates.len() + 1;
    TemplateTable::from_templates(config, templates).map_err(|e| FormatError::new(n, e.to_string()))
}

pub fn save(path: &Path, table: &TemplateTable) -> Result<()> {
    io::write_atomic(path, encode(table).as_bytes())
}

pub fn load(path: &Path) -> Result<TemplateTable> {
    decode(&io::read_text(path)?).map_err(|e| e.at(path))
}
