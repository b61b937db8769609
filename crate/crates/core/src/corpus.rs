//! Key sequences, the model vocabulary and one-class train/test splits.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::parser::UNSEEN_KEY;
use crate::{Error, Result};

/// Padding id; never a prediction target.
pub const PAD: u32 = 0;
/// Begin-of-sequence id prepended to every model input.
pub const BOS: u32 = 1;
/// Id for keys that never occurred in training.
pub const UNSEEN: u32 = 2;
/// Number of reserved ids preceding the mined keys.
pub const RESERVED: usize = 3;

/// Default cap on keys per sequence: BOS plus 511 keys fills a 512-position context.
pub const DEFAULT_MAX_KEYS: usize = 511;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Anomalous,
    Unlabeled,
}

impl Label {
    pub fn from_anomalous(anomalous: bool) -> Self {
        if anomalous {
            Label::Anomalous
        } else {
            Label::Normal
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Session(String),
    Window(u64),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Session(s) => f.write_str(s),
            Provenance::Window(i) => write!(f, "window:{i}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = core::convert::Infallible;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        if let Some(idx) = s.strip_prefix("window:").and_then(|n| n.parse().ok()) {
            return Ok(Provenance::Window(idx));
        }
        Ok(Provenance::Session(s.to_string()))
    }
}

/// An ordered run of log keys with its label and origin.
///
/// Before a split the keys are raw template ids (with
/// [`UNSEEN_KEY`] for unmatched lines); after
/// [`build_split`] they are vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySequence {
    pub keys: Vec<u32>,
    pub label: Label,
    pub provenance: Provenance,
}

impl KeySequence {
    pub fn new(keys: Vec<u32>, label: Label, provenance: Provenance) -> Self {
        KeySequence {
            keys,
            label,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Keeps the earliest `max_keys` keys. The label is untouched.
    pub fn truncate(&mut self, max_keys: usize) {
        self.keys.truncate(max_keys);
    }

    pub fn contains_unseen(&self) -> bool {
        self.keys.contains(&UNSEEN)
    }
}

/// Mapping from raw template ids to model ids.
///
/// Ids `0..3` are PAD, BOS and UNSEEN; mined keys follow in ascending raw-id
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    raw_keys: Vec<u32>,
    index: BTreeMap<u32, u32>,
}

impl Vocabulary {
    pub fn from_raw_keys(mut raw_keys: Vec<u32>) -> Self {
        raw_keys.retain(|&k| k != UNSEEN_KEY);
        raw_keys.sort_unstable();
        raw_keys.dedup();
        let index = raw_keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, (i + RESERVED) as u32))
            .collect();
        Vocabulary { raw_keys, index }
    }

    /// Vocabulary built from the keys observed in `sequences`.
    pub fn from_sequences<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a KeySequence>,
    {
        let keys = sequences
            .into_iter()
            .flat_map(|s| s.keys.iter().copied())
            .collect();
        Vocabulary::from_raw_keys(keys)
    }

    /// A vocabulary of the given total size whose raw ids are `0..size-3`.
    pub fn with_size(size: usize) -> Result<Self> {
        if size < RESERVED {
            return Err(Error::InvalidConfig(alloc::format!(
                "vocabulary size {size} is smaller than the {RESERVED} reserved ids"
            )));
        }
        Ok(Vocabulary::from_raw_keys((0..(size - RESERVED) as u32).collect()))
    }

    /// Total size including reserved ids; equals the model output dimension.
    pub fn size(&self) -> usize {
        self.raw_keys.len() + RESERVED
    }

    /// Number of keys mined from training data.
    pub fn mined_len(&self) -> usize {
        self.raw_keys.len()
    }

    pub fn encode(&self, raw: u32) -> u32 {
        self.index.get(&raw).copied().unwrap_or(UNSEEN)
    }

    pub fn decode(&self, id: u32) -> Option<u32> {
        (id as usize)
            .checked_sub(RESERVED)
            .and_then(|i| self.raw_keys.get(i))
            .copied()
    }

    pub fn raw_keys(&self) -> &[u32] {
        &self.raw_keys
    }

    pub fn encode_sequence(&self, seq: &KeySequence) -> KeySequence {
        KeySequence {
            keys: seq.keys.iter().map(|&k| self.encode(k)).collect(),
            label: seq.label,
            provenance: seq.provenance.clone(),
        }
    }
}

/// One-class split. `train` holds normal sequences only; every sequence is
/// vocabulary-encoded and truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub vocab: Vocabulary,
    pub train: Vec<KeySequence>,
    pub test_normal: Vec<KeySequence>,
    pub test_anomalous: Vec<KeySequence>,
    pub test_unlabeled: Vec<KeySequence>,
}

impl CorpusSplit {
    /// Test sequences in a fixed order: normal, then anomalous, then unlabeled.
    pub fn test_sequences(&self) -> impl Iterator<Item = &KeySequence> {
        self.test_normal
            .iter()
            .chain(&self.test_anomalous)
            .chain(&self.test_unlabeled)
    }
}

/// Seeded sample of `n_train` normal sequences for training; the rest go
/// to the test partitions by label. The vocabulary comes from the training
/// sample alone, so test keys absent from it become UNSEEN.
pub fn build_split(
    sequences: &[KeySequence],
    n_train: usize,
    seed: u64,
    max_keys: usize,
) -> Result<CorpusSplit> {
    let mut normal: Vec<usize> = sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Normal && !s.is_empty())
        .map(|(i, _)| i)
        .collect();
    if normal.len() < n_train {
        return Err(Error::InsufficientNormal {
            needed: n_train,
            available: normal.len(),
        });
    }
    let mut rng = crate::rng_from_seed(seed);
    normal.shuffle(&mut rng);
    let mut chosen = normal[..n_train].to_vec();
    chosen.sort_unstable();
    let mut in_train = alloc::vec![false; sequences.len()];
    for &i in &chosen {
        in_train[i] = true;
    }

    let raw_train: Vec<KeySequence> = chosen.iter().map(|&i| sequences[i].clone()).collect();
    let rest = sequences
        .iter()
        .enumerate()
        .filter(|(i, _)| !in_train[*i])
        .map(|(_, s)| s);
    Ok(encode_split(raw_train, rest, max_keys))
}

/// Builds a split from an explicit raw training set and raw test pool.
/// Sequences are truncated to `max_keys`; the vocabulary comes from the
/// training set and empty sequences are dropped.
pub fn encode_split<'a, I>(raw_train: Vec<KeySequence>, test: I, max_keys: usize) -> CorpusSplit
where
    I: IntoIterator<Item = &'a KeySequence>,
{
    let prepare = |s: &KeySequence| {
        let mut s = s.clone();
        s.truncate(max_keys);
        s
    };
    let raw_train: Vec<KeySequence> = raw_train.iter().filter(|s| !s.is_empty()).map(prepare).collect();
    let vocab = Vocabulary::from_sequences(&raw_train);
    let train = raw_train.iter().map(|s| vocab.encode_sequence(s)).collect();
    let mut split = CorpusSplit {
        vocab,
        train,
        test_normal: Vec::new(),
        test_anomalous: Vec::new(),
        test_unlabeled: Vec::new(),
    };
    for s in test {
        if s.is_empty() {
            continue;
        }
        let enc = split.vocab.encode_sequence(&prepare(s));
        match s.label {
            Label::Normal => split.test_normal.push(enc),
            Label::Anomalous => split.test_anomalous.push(enc),
            Label::Unlabeled => split.test_unlabeled.push(enc),
        }
    }
    split
}

/// Result of grouping a key stream.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grouped {
    pub sequences: Vec<KeySequence>,
    /// Stream entries that could not be assigned to any sequence.
    pub dropped: usize,
}

/// Partitions a key stream by session id, keeping stream order within each
/// session. Sessions appear in order of first occurrence; entries with no
/// session are dropped and counted.
pub fn group_by_session<'a, I>(stream: I) -> Grouped
where
    I: IntoIterator<Item = (Option<&'a str>, u32)>,
{
    let mut order: Vec<String> = Vec::new();
    let mut slots: BTreeMap<String, usize> = BTreeMap::new();
    let mut keys: Vec<Vec<u32>> = Vec::new();
    let mut dropped = 0;
    for (session, key) in stream {
        let Some(session) = session else {
            dropped += 1;
            continue;
        };
        let slot = match slots.get(session) {
            Some(&slot) => slot,
            None => {
                let slot = keys.len();
                slots.insert(session.to_string(), slot);
                order.push(session.to_string());
                keys.push(Vec::new());
                slot
            }
        };
        keys[slot].push(key);
    }
    let sequences = order
        .into_iter()
        .zip(keys)
        .map(|(session, keys)| KeySequence::new(keys, Label::Unlabeled, Provenance::Session(session)))
        .collect();
    Grouped { sequences, dropped }
}

/// One timestamped stream entry for window grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedKey {
    pub timestamp: i64,
    pub key: u32,
    pub anomalous: bool,
}

/// Tumbling windows of `window_secs` starting at the earliest timestamp.
/// Each non-empty window becomes one sequence, anomalous if any member is.
pub fn group_by_time_window(stream: &[TimedKey], window_secs: u64) -> Result<Vec<KeySequence>> {
    if window_secs == 0 {
        return Err(Error::InvalidConfig("window length must be positive".into()));
    }
    let mut events = stream.to_vec();
    events.sort_by_key(|e| e.timestamp);
    let Some(start) = events.first().map(|e| e.timestamp) else {
        return Ok(Vec::new());
    };
    let mut out: Vec<KeySequence> = Vec::new();
    let mut current: Option<u64> = None;
    for e in events {
        let idx = ((e.timestamp - start) as u64) / window_secs;
        if current != Some(idx) {
            out.push(KeySequence::new(Vec::new(), Label::Normal, Provenance::Window(idx)));
            current = Some(idx);
        }
        let seq = out.last_mut().expect("window opened above");
        seq.keys.push(e.key);
        if e.anomalous {
            seq.label = Label::Anomalous;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn seq(keys: &[u32], label: Label, name: &str) -> KeySequence {
        KeySequence::new(keys.to_vec(), label, Provenance::Session(name.into()))
    }

    #[test]
    fn sessions_partition_the_stream() {
        let stream = [
            (Some("blk_A"), 1),
            (Some("blk_B"), 2),
            (Some("blk_A"), 3),
            (Some("blk_B"), 4),
            (Some("blk_A"), 5),
        ];
        let g = group_by_session(stream);
        assert_eq!(g.sequences.len(), 2);
        assert_eq!(g.sequences[0].keys, vec![1, 3, 5]);
        assert_eq!(g.sequences[1].keys, vec![2, 4]);
        assert_eq!(g.dropped, 0);
    }

    #[test]
    fn unmatched_entries_are_dropped() {
        let g = group_by_session([(None, 1), (None, 2), (None, 3)]);
        assert!(g.sequences.is_empty());
        assert_eq!(g.dropped, 3);
    }

    #[test]
    fn windows_split_on_boundaries() {
        let ev = |t, anomalous| TimedKey { timestamp: t, key: 7, anomalous };
        let w = group_by_time_window(&[ev(0, false), ev(30, false), ev(61, false)], 60).unwrap();
        assert_eq!(w.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![2, 1]);
        assert_eq!(w[1].provenance, Provenance::Window(1));
    }

    #[test]
    fn one_alert_taints_its_window() {
        let mut events: Vec<TimedKey> = (0..50)
            .map(|i| TimedKey { timestamp: i, key: 1, anomalous: false })
            .collect();
        events[17].anomalous = true;
        let w = group_by_time_window(&events, 60).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].label, Label::Anomalous);
    }

    #[test]
    fn empty_windows_emit_nothing() {
        let ev = |t| TimedKey { timestamp: t, key: 1, anomalous: false };
        let w = group_by_time_window(&[ev(0), ev(200)], 60).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[1].provenance, Provenance::Window(3));
    }

    #[test]
    fn split_is_seeded_and_one_class() {
        let mut all = Vec::new();
        for i in 0..20 {
            all.push(seq(&[10, 11, 12], Label::Normal, &format!("n{i}")));
        }
        for i in 0..5 {
            all.push(seq(&[10, 99], Label::Anomalous, &format!("a{i}")));
        }
        let a = build_split(&all, 8, 3, DEFAULT_MAX_KEYS).unwrap();
        let b = build_split(&all, 8, 3, DEFAULT_MAX_KEYS).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.test_normal.len(), 12);
        assert_eq!(a.test_anomalous.len(), 5);
        assert!(a.train.iter().all(|s| s.label == Label::Normal));
        assert_eq!(a.vocab.size(), 3 + RESERVED);
        // key 99 never appears in training
        assert_eq!(a.test_anomalous[0].keys[1], UNSEEN);
    }

    #[test]
    fn split_needs_enough_normals() {
        let all = vec![seq(&[1], Label::Normal, "x")];
        assert_eq!(
            build_split(&all, 2, 0, 10),
            Err(Error::InsufficientNormal { needed: 2, available: 1 })
        );
    }

    #[test]
    fn truncation_keeps_head_and_label() {
        let all = vec![seq(&[5, 6, 7, 8], Label::Anomalous, "a"), seq(&[5], Label::Normal, "n")];
        let s = build_split(&all, 1, 0, 2).unwrap();
        assert_eq!(s.test_anomalous[0].len(), 2);
        assert_eq!(s.test_anomalous[0].label, Label::Anomalous);
        assert_eq!(s.test_anomalous[0].keys[0], s.vocab.encode(5));
    }

    #[test]
    fn reserved_ids_precede_mined_keys() {
        let v = Vocabulary::from_raw_keys(vec![40, 7, 7, 12]);
        assert_eq!(v.size(), 6);
        assert_eq!(v.encode(7), 3);
        assert_eq!(v.encode(12), 4);
        assert_eq!(v.encode(40), 5);
        assert_eq!(v.encode(41), UNSEEN);
        assert_eq!(v.encode(UNSEEN_KEY), UNSEEN);
        assert_eq!(v.decode(4), Some(12));
        assert_eq!(v.decode(BOS), None);
    }

    #[test]
    fn provenance_round_trips_through_text() {
        for p in [Provenance::Window(12), Provenance::Session("blk_-42".into())] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
    }
}
