//! Drain-style template mining.
//!
//! Lines are routed through a fixed-depth prefix tree: the first level splits
//! on token count, the next `depth - 2` levels on leading tokens (tokens with
//! digits route to a wildcard child), and leaves hold candidate templates.
//! Within a leaf a line joins the most similar template if
//! `equal positions / token count >= sim_threshold`; otherwise it founds a
//! new one. A wildcard position counts as equal to any token.
//!
//! ```text
//!               root
//!                |
//!                5            token count
//!                |
//!           "Receiving"       leading tokens
//!                |
//!             "block"
//!                |
//!   [Receiving block <*> src <*>]
//! ```
//!
//! Masking (block ids, IPs, hex) is applied by the caller before the content
//! reaches the tree.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Template text used for a wildcard slot.
pub const WILDCARD: &str = "<*>";

/// Key returned by a frozen table for lines that match no template.
pub const UNSEEN_KEY: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Token {
    Literal(String),
    Wildcard,
}

impl Token {
    pub fn from_text(s: &str) -> Self {
        if s == WILDCARD {
            Token::Wildcard
        } else {
            Token::Literal(s.to_string())
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Token::Literal(s) => s,
            Token::Wildcard => WILDCARD,
        }
    }

    fn matches(&self, tok: &str) -> bool {
        match self {
            Token::Wildcard => true,
            Token::Literal(s) => s == tok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogTemplate {
    pub key_id: u32,
    pub tokens: Vec<Token>,
    pub match_count: u64,
}

impl LogTemplate {
    /// Fraction of positions where the template accepts `tokens`.
    pub fn similarity(&self, tokens: &[&str]) -> f32 {
        if tokens.len() != self.tokens.len() || tokens.is_empty() {
            return 0.0;
        }
        let equal = self
            .tokens
            .iter()
            .zip(tokens)
            .filter(|(t, s)| t.matches(s))
            .count();
        equal as f32 / tokens.len() as f32
    }

    fn absorb(&mut self, tokens: &[&str]) {
        for (t, s) in self.tokens.iter_mut().zip(tokens) {
            if !t.matches(s) {
                *t = Token::Wildcard;
            }
        }
        self.match_count += 1;
    }
}

impl fmt::Display for LogTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(t.as_str())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DrainConfig {
    /// Tree depth counting the root and the token-count level.
    pub depth: usize,
    pub sim_threshold: f32,
    pub max_children: usize,
}

impl Default for DrainConfig {
    fn default() -> Self {
        DrainConfig {
            depth: 4,
            sim_threshold: 0.5,
            max_children: 100,
        }
    }
}

impl DrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!("depth {} < 2", self.depth)));
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sim_threshold {} not in (0, 1]",
                self.sim_threshold
            )));
        }
        if self.max_children < 1 {
            return Err(Error::InvalidConfig("max_children must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
struct TreeNode {
    children: BTreeMap<String, TreeNode>,
    templates: Vec<u32>,
}

fn has_digit(s: &str) -> bool {
    s.bytes().any(|b| b.is_ascii_digit())
}

/// Prefix tree shared by the mining parser and the frozen table.
#[derive(Debug, Clone, Default)]
struct ParseTree {
    by_length: BTreeMap<usize, TreeNode>,
}

impl ParseTree {
    /// Finds (creating as needed) the leaf for `tokens`.
    fn leaf_mut(&mut self, tokens: &[&str], cfg: &DrainConfig) -> &mut TreeNode {
        let mut node = self.by_length.entry(tokens.len()).or_default();
        for tok in tokens.iter().take(cfg.depth - 2) {
            let key = if *tok == WILDCARD || has_digit(tok) {
                WILDCARD
            } else {
                *tok
            };
            let key = if node.children.contains_key(key) || key == WILDCARD {
                key
            } else if node.children.contains_key(WILDCARD) {
                if node.children.len() < cfg.max_children {
                    key
                } else {
                    WILDCARD
                }
            } else if node.children.len() + 1 < cfg.max_children {
                key
            } else {
                WILDCARD
            };
            node = node.children.entry(key.to_string()).or_default();
        }
        node
    }

    /// Read-only routing; `None` when no branch accepts the line.
    fn leaf(&self, tokens: &[&str], cfg: &DrainConfig) -> Option<&TreeNode> {
        let mut node = self.by_length.get(&tokens.len())?;
        for tok in tokens.iter().take(cfg.depth - 2) {
            let key = if has_digit(tok) { WILDCARD } else { *tok };
            node = node
                .children
                .get(key)
                .or_else(|| node.children.get(WILDCARD))?;
        }
        Some(node)
    }
}

/// Picks the most similar template in a leaf; ties go to the lower key id.
fn best_match(leaf: &TreeNode, templates: &[LogTemplate], tokens: &[&str], threshold: f32) -> Option<u32> {
    let mut best: Option<(f32, u32)> = None;
    for &id in &leaf.templates {
        let sim = templates[id as usize].similarity(tokens);
        if sim < threshold {
            continue;
        }
        best = match best {
            Some((s, b)) if s > sim || (s == sim && b < id) => Some((s, b)),
            _ => Some((sim, id)),
        };
    }
    best.map(|(_, id)| id)
}

fn tokenize(content: &str) -> Vec<&str> {
    content.split_whitespace().collect()
}

/// Mining parser: single writer, grows its template set as lines arrive.
#[derive(Debug, Clone)]
pub struct DrainParser {
    config: DrainConfig,
    templates: Vec<LogTemplate>,
    tree: ParseTree,
}

impl DrainParser {
    pub fn new(config: DrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(DrainParser {
            config,
            templates: Vec::new(),
            tree: ParseTree::default(),
        })
    }

    pub fn config(&self) -> &DrainConfig {
        &self.config
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    /// Assigns a key to already-masked content, mining a template if needed.
    pub fn parse_content(&mut self, content: &str) -> Result<u32> {
        let tokens = tokenize(content);
        self.parse_tokens(&tokens)
    }

    pub fn parse_tokens(&mut self, tokens: &[&str]) -> Result<u32> {
        if tokens.is_empty() {
            return Err(Error::EmptyContent);
        }
        let cfg = self.config;
        let leaf = self.tree.leaf_mut(tokens, &cfg);
        if let Some(id) = best_match(leaf, &self.templates, tokens, cfg.sim_threshold) {
            self.templates[id as usize].absorb(tokens);
            return Ok(id);
        }
        let id = self.templates.len() as u32;
        leaf.templates.push(id);
        self.templates.push(LogTemplate {
            key_id: id,
            tokens: tokens.iter().map(|t| Token::from_text(t)).collect(),
            match_count: 1,
        });
        Ok(id)
    }

    /// Snapshot of the mined templates as an immutable lookup table.
    pub fn freeze(&self) -> Result<TemplateTable> {
        TemplateTable::from_templates(self.config, self.templates.clone())
    }
}

/// Immutable template table. Lines that fit no template map to
/// [`UNSEEN_KEY`]; the table never grows.
#[derive(Debug, Clone)]
pub struct TemplateTable {
    config: DrainConfig,
    templates: Vec<LogTemplate>,
    tree: ParseTree,
}

impl TemplateTable {
    /// Rebuilds the routing tree by replaying templates in key order.
    pub fn from_templates(config: DrainConfig, templates: Vec<LogTemplate>) -> Result<Self> {
        config.validate()?;
        if templates.is_empty() {
            return Err(Error::NoTemplates);
        }
        let mut tree = ParseTree::default();
        for (i, t) in templates.iter().enumerate() {
            if t.key_id as usize != i {
                return Err(Error::InvalidConfig(format!(
                    "template key ids must be dense from 0; found {} at position {i}",
                    t.key_id
                )));
            }
            if t.tokens.is_empty() {
                return Err(Error::InvalidConfig(format!("template {i} has no tokens")));
            }
            let text: Vec<&str> = t.tokens.iter().map(Token::as_str).collect();
            tree.leaf_mut(&text, &config).templates.push(t.key_id);
        }
        Ok(TemplateTable {
            config,
            templates,
            tree,
        })
    }

    pub fn config(&self) -> &DrainConfig {
        &self.config
    }

    pub fn templates(&self) -> &[LogTemplate] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn lookup_content(&self, content: &str) -> Result<u32> {
        self.lookup_tokens(&tokenize(content))
    }

    pub fn lookup_tokens(&self, tokens: &[&str]) -> Result<u32> {
        if tokens.is_empty() {
            return Err(Error::EmptyContent);
        }
        Ok(self
            .tree
            .leaf(tokens, &self.config)
            .and_then(|leaf| best_match(leaf, &self.templates, tokens, self.config.sim_threshold))
            .unwrap_or(UNSEEN_KEY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parser() -> DrainParser {
        DrainParser::new(DrainConfig::default()).unwrap()
    }

    #[test]
    fn identical_lines_share_a_key() {
        let mut p = parser();
        let a = p.parse_content("PacketResponder terminating").unwrap();
        let b = p.parse_content("PacketResponder terminating").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn differing_parameters_become_wildcards() {
        let mut p = parser();
        let a = p.parse_content("Receiving block A src X").unwrap();
        let b = p.parse_content("Receiving block B src Y").unwrap();
        assert_eq!(a, b);
        assert_eq!(p.templates()[a as usize].to_string(), "Receiving block <*> src <*>");
    }

    #[test]
    fn token_count_splits_keys() {
        let mut p = parser();
        let a = p.parse_content("Deleting block x").unwrap();
        let b = p.parse_content("Deleting block x now").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn dissimilar_lines_found_new_templates() {
        let mut p = parser();
        let a = p.parse_content("Receiving block A src X").unwrap();
        let b = p.parse_content("Receiving block went very wrong").unwrap();
        assert_ne!(a, b);
        assert_eq!(p.templates().len(), 2);
    }

    #[test]
    fn empty_content_is_rejected() {
        assert_eq!(parser().parse_content("   "), Err(Error::EmptyContent));
    }

    #[test]
    fn key_ids_are_dense_in_discovery_order() {
        let mut p = parser();
        for (i, line) in ["a b", "c d e", "f", "a b"].iter().enumerate() {
            let k = p.parse_content(line).unwrap();
            if i < 3 {
                assert_eq!(k, i as u32);
            }
        }
    }

    #[test]
    fn frozen_table_never_grows() {
        let mut p = parser();
        for i in 0..15 {
            let line = format!("event{} happened here with code{}", ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o"][i], i);
            p.parse_content(&line).unwrap();
        }
        let table = p.freeze().unwrap();
        assert_eq!(table.len(), p.templates().len());
        assert_eq!(table.lookup_content("completely novel shape").unwrap(), UNSEEN_KEY);
        assert_eq!(table.len(), p.templates().len());
    }

    #[test]
    fn frozen_table_reproduces_mined_keys() {
        let mut p = parser();
        let lines = [
            "Receiving block blk_1 src 10.0.0.1",
            "Receiving block blk_2 src 10.0.0.2",
            "PacketResponder 1 for block blk_1 terminating",
            "Verification succeeded for blk_9",
            "PacketResponder 2 for block blk_4 terminating",
        ];
        let keys: Vec<u32> = lines.iter().map(|l| p.parse_content(l).unwrap()).collect();
        let table = p.freeze().unwrap();
        for (l, k) in lines.iter().zip(keys) {
            assert_eq!(table.lookup_content(l).unwrap(), k);
        }
    }

    #[test]
    fn ties_prefer_lower_key_id() {
        let t = |id: u32, toks: &[&str]| LogTemplate {
            key_id: id,
            tokens: toks.iter().map(|s| Token::from_text(s)).collect(),
            match_count: 1,
        };
        let templates = alloc::vec![t(0, &["a", "x", "<*>"]), t(1, &["a", "<*>", "y"])];
        let leaf = TreeNode {
            children: BTreeMap::new(),
            templates: alloc::vec![1, 0],
        };
        assert_eq!(best_match(&leaf, &templates, &["a", "x", "y"], 0.5), Some(0));
    }

    #[test]
    fn children_are_capped() {
        let cfg = DrainConfig {
            depth: 3,
            sim_threshold: 0.5,
            max_children: 3,
        };
        let mut p = DrainParser::new(cfg).unwrap();
        for w in ["alpha", "beta", "gamma", "delta", "epsilon", "zeta"] {
            p.parse_content(&format!("{w} stays put")).unwrap();
        }
        let node = &p.tree.by_length[&3];
        assert!(node.children.len() <= 3);
        assert!(node.children.contains_key(WILDCARD));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            DrainConfig { depth: 1, ..Default::default() },
            DrainConfig { sim_threshold: 0.0, ..Default::default() },
            DrainConfig { sim_threshold: 1.5, ..Default::default() },
            DrainConfig { max_children: 0, ..Default::default() },
        ] {
            assert!(DrainParser::new(cfg).is_err());
        }
    }
}
