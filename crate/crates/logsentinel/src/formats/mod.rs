//! On-disk artifact formats. Each format has a pure encode/decode pair over
//! strings or bytes plus path-level `save_*`/`load_*` wrappers.

pub mod checkpoint;
pub mod corpus;
pub mod keystream;
pub mod tables;
pub mod templates;
pub mod verdicts;

use crate::error::FormatError;

/// Splits `line` on tabs and demands exactly `n` fields.
pub(crate) fn fields(line: &str, n: usize, lineno: usize) -> Result<Vec<&str>, FormatError> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(FormatError::new(
            lineno,
            format!("expected {n} tab-separated fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

pub(crate) fn parse_num<T: std::str::FromStr>(s: &str, what: &str, lineno: usize) -> Result<T, FormatError> {
    s.parse()
        .map_err(|_| FormatError::new(lineno, format!("invalid {what} {s:?}")))
}

/// Parses `key=value` pairs from a header, in any order.
pub(crate) fn header_value<'a>(parts: &[&'a str], key: &str) -> Option<&'a str> {
    parts.iter().find_map(|p| p.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
}
