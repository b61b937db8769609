//! Seeded synthetic log-key corpora with exact anomaly labels.
//!
//! A [`Grammar`] is a weighted directed graph over raw key ids `0..n_keys`.
//! A walk starts from the start distribution, follows weighted transitions,
//! and stops at a node without successors or once it reaches a length drawn
//! uniformly from `min_len..=max_len`. Injected anomalies are checked with
//! [`Grammar::accepts`] so that none of them could have been generated.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{KeySequence, Label, Provenance};
use crate::{Error, Result, Rng};

/// Number of distinct out-of-alphabet ids used by injections.
pub const FOREIGN_KEYS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub n_keys: u32,
    /// `(key, weight)` pairs for the first key.
    pub start: Vec<(u32, f32)>,
    /// Outgoing `(key, weight)` pairs per key; an empty list ends the walk.
    pub transitions: Vec<Vec<(u32, f32)>>,
    pub min_len: usize,
    pub max_len: usize,
}

fn check_edges(edges: &[(u32, f32)], n_keys: u32, what: &str) -> Result<()> {
    for &(k, w) in edges {
        if k >= n_keys {
            return Err(Error::MalformedGrammar(format!("{what}: key {k} outside 0..{n_keys}")));
        }
        if !(w.is_finite() && w > 0.0) {
            return Err(Error::MalformedGrammar(format!("{what}: weight {w} for key {k}")));
        }
    }
    Ok(())
}

impl Grammar {
    pub fn validate(&self) -> Result<()> {
        if self.n_keys == 0 || self.transitions.len() != self.n_keys as usize {
            return Err(Error::MalformedGrammar(format!(
                "{} transition lists for {} keys",
                self.transitions.len(),
                self.n_keys
            )));
        }
        if self.start.is_empty() {
            return Err(Error::MalformedGrammar("empty start distribution".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::MalformedGrammar(format!(
                "length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        check_edges(&self.start, self.n_keys, "start")?;
        for (i, t) in self.transitions.iter().enumerate() {
            check_edges(t, self.n_keys, &format!("key {i}"))?;
        }
        Ok(())
    }

    fn has_edge(edges: &[(u32, f32)], k: u32) -> bool {
        edges.iter().any(|&(e, _)| e == k)
    }

    /// Whether `keys` is a possible output of [`Grammar::sample`].
    pub fn accepts(&self, keys: &[u32]) -> bool {
        let Some(&first) = keys.first() else {
            return false;
        };
        if keys.len() > self.max_len || !Self::has_edge(&self.start, first) {
            return false;
        }
        for w in keys.windows(2) {
            match self.transitions.get(w[0] as usize) {
                Some(t) if Self::has_edge(t, w[1]) => {}
                _ => return false,
            }
        }
        let last = *keys.last().unwrap();
        let ends_early = self
            .transitions
            .get(last as usize)
            .is_some_and(|t| t.is_empty());
        ends_early || keys.len() >= self.min_len
    }

    fn pick(edges: &[(u32, f32)], rng: &mut Rng) -> u32 {
        if edges.len() == 1 {
            return edges[0].0;
        }
        let dist = WeightedIndex::new(edges.iter().map(|e| e.1)).expect("validated weights");
        edges[dist.sample(rng)].0
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<u32> {
        let target = rng.gen_range(self.min_len..=self.max_len);
        let mut keys = vec![Self::pick(&self.start, rng)];
        while keys.len() < target {
            let edges = &self.transitions[*keys.last().unwrap() as usize];
            if edges.is_empty() {
                break;
            }
            keys.push(Self::pick(edges, rng));
        }
        keys
    }

    /// `0 → 1 → … → n-1`, always the same sequence.
    pub fn chain(n: u32) -> Self {
        let transitions = (0..n)
            .map(|i| if i + 1 < n { vec![(i + 1, 1.0)] } else { Vec::new() })
            .collect();
        Grammar {
            n_keys: n,
            start: vec![(0, 1.0)],
            transitions,
            min_len: n as usize,
            max_len: n as usize,
        }
    }

    /// A single cycle through a seeded permutation of `n` keys, always
    /// entered at the same key. Every key is determined by its predecessor.
    pub fn cycle(n: u32, min_len: usize, max_len: usize, seed: u64) -> Self {
        let order = permutation(n, seed);
        let mut transitions = vec![Vec::new(); n as usize];
        for i in 0..n as usize {
            transitions[order[i] as usize] = vec![(order[(i + 1) % n as usize], 1.0)];
        }
        Grammar {
            n_keys: n,
            start: vec![(order[0], 1.0)],
            transitions,
            min_len,
            max_len,
        }
    }

    /// [`Grammar::cycle`] where key `order[branch_at]` is followed by one of
    /// two keys with probability 1/2 each; both rejoin the cycle. Returns the
    /// grammar and the branching key.
    pub fn two_branch(n: u32, min_len: usize, max_len: usize, seed: u64) -> (Self, u32) {
        assert!(n >= 4, "two_branch needs at least 4 keys");
        let order = permutation(n, seed);
        let n_us = n as usize;
        let mut transitions = vec![Vec::new(); n_us];
        for i in 0..n_us {
            transitions[order[i] as usize] = vec![(order[(i + 1) % n_us], 1.0)];
        }
        // order[1] branches to order[2] or order[3]; order[2] skips to order[4].
        let x = order[1];
        transitions[x as usize] = vec![(order[2], 1.0), (order[3], 1.0)];
        transitions[order[2] as usize] = vec![(order[4 % n_us], 1.0)];
        let g = Grammar {
            n_keys: n,
            start: vec![(order[0], 1.0)],
            transitions,
            min_len,
            max_len,
        };
        (g, x)
    }

    /// A random grammar: up to three start keys and `1..=max_branching`
    /// successors per key with weights at least `weight_floor` before
    /// normalization. Smaller floors give more skewed branches.
    pub fn random(n: u32, max_branching: usize, weight_floor: f32, min_len: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = crate::rng_from_seed(seed);
        let pick_targets = |rng: &mut Rng, count: usize| -> Vec<(u32, f32)> {
            let mut out: Vec<(u32, f32)> = Vec::with_capacity(count);
            while out.len() < count {
                let k = rng.gen_range(0..n);
                if !Self::has_edge(&out, k) {
                    out.push((k, weight_floor + rng.gen::<f32>()));
                }
            }
            out
        };
        let n_start = 3.min(n as usize);
        let start = pick_targets(&mut rng, n_start);
        let transitions = (0..n)
            .map(|_| {
                let b = rng.gen_range(1..=max_branching.min(n as usize).max(1));
                pick_targets(&mut rng, b)
            })
            .collect();
        Grammar {
            n_keys: n,
            start,
            transitions,
            min_len,
            max_len,
        }
    }

    /// Keys sit on a seeded ring; each key moves forward by distinct odd
    /// offsets up to `max_offset`, `branching.0..=branching.1` of them, with
    /// weights at least `weight_floor`. Three keys can start a walk.
    ///
    /// Every walk step preserves or flips ring parity in lockstep, so when
    /// `n` is even and `2 × max_offset < n` there are no self loops, no
    /// two-key cycles and no shortcut `x → b` alongside `x → a → b`. Swapping
    /// two adjacent keys of a walk then breaks every transition it touches.
    pub fn ring(
        n: u32,
        branching: (usize, usize),
        max_offset: u32,
        weight_floor: f32,
        min_len: usize,
        max_len: usize,
        seed: u64,
    ) -> Self {
        let mut rng = crate::rng_from_seed(seed);
        let order = permutation(n, seed ^ 0x9e37_79b9);
        let offsets: Vec<u32> = (1..=max_offset.min(n.saturating_sub(1))).step_by(2).collect();
        let lo = branching.0.clamp(1, offsets.len().max(1));
        let hi = branching.1.clamp(lo, offsets.len().max(1));
        let mut transitions = vec![Vec::new(); n as usize];
        for p in 0..n as usize {
            let mut pool = offsets.clone();
            let b = rng.gen_range(lo..=hi);
            let mut edges = Vec::with_capacity(b);
            for _ in 0..b.min(pool.len()) {
                let d = pool.swap_remove(rng.gen_range(0..pool.len()));
                let to = order[(p + d as usize) % n as usize];
                edges.push((to, weight_floor + rng.gen::<f32>()));
            }
            transitions[order[p] as usize] = edges;
        }
        let start = (0..3.min(n as usize))
            .map(|i| (order[(i * n as usize) / 3], 1.0))
            .collect();
        Grammar {
            n_keys: n,
            start,
            transitions,
            min_len,
            max_len,
        }
    }

    /// Default benchmark grammar: 30 keys, one to three skewed branches.
    pub fn benchmark(seed: u64) -> Self {
        Grammar::ring(30, (1, 3), 7, 0.5, 8, 32, seed)
    }

    /// Three near-equiprobable branches at every key, so normal behavior is
    /// highly variable.
    pub fn high_variability(seed: u64) -> Self {
        Grammar::ring(30, (3, 3), 7, 2.0, 8, 32, seed)
    }
}

fn permutation(n: u32, seed: u64) -> Vec<u32> {
    use rand::seq::SliceRandom;
    let mut order: Vec<u32> = (0..n).collect();
    order.shuffle(&mut crate::rng_from_seed(seed));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// One key replaced by an id outside the grammar alphabet.
    ForeignKey,
    /// Two adjacent keys swapped into a non-generatable order.
    TransitionViolation,
    /// A prefix followed by one to three foreign keys.
    TruncationForeignTail,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [
        AnomalyKind::ForeignKey,
        AnomalyKind::TransitionViolation,
        AnomalyKind::TruncationForeignTail,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub grammar: Grammar,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Assigned round-robin over the anomalous sequences.
    pub kinds: Vec<AnomalyKind>,
    pub seed: u64,
}

const INJECTION_ATTEMPTS: usize = 1000;

fn foreign(grammar: &Grammar, rng: &mut Rng) -> u32 {
    grammar.n_keys + rng.gen_range(0..FOREIGN_KEYS)
}

fn inject(grammar: &Grammar, kind: AnomalyKind, rng: &mut Rng) -> Option<Vec<u32>> {
    for _ in 0..INJECTION_ATTEMPTS {
        let mut keys = grammar.sample(rng);
        match kind {
            AnomalyKind::ForeignKey => {
                let p = rng.gen_range(0..keys.len());
                keys[p] = foreign(grammar, rng);
            }
            AnomalyKind::TransitionViolation => {
                if keys.len() < 2 {
                    continue;
                }
                let p = rng.gen_range(0..keys.len() - 1);
                if keys[p] == keys[p + 1] {
                    continue;
                }
                keys.swap(p, p + 1);
            }
            AnomalyKind::TruncationForeignTail => {
                let cut = rng.gen_range(1..=keys.len());
                keys.truncate(cut);
                for _ in 0..rng.gen_range(1..=3) {
                    keys.push(foreign(grammar, rng));
                }
            }
        }
        if !grammar.accepts(&keys) {
            return Some(keys);
        }
    }
    None
}

/// Generates `n_normal` grammar walks followed by `n_anomalous` injected
/// sequences, in raw key-id space. Provenance is `syn-<index>`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<KeySequence>> {
    spec.grammar.validate()?;
    if spec.n_anomalous > 0 && spec.kinds.is_empty() {
        return Err(Error::InvalidConfig("anomalies requested without kinds".into()));
    }
    let mut rng = crate::rng_from_seed(spec.seed);
    let mut out = Vec::with_capacity(spec.n_normal + spec.n_anomalous);
    let name = |i: usize| Provenance::Session(format!("syn-{i}"));
    for i in 0..spec.n_normal {
        out.push(KeySequence::new(spec.grammar.sample(&mut rng), Label::Normal, name(i)));
    }
    for j in 0..spec.n_anomalous {
        let kind = spec.kinds[j % spec.kinds.len()];
        let keys = inject(&spec.grammar, kind, &mut rng).ok_or_else(|| {
            Error::MalformedGrammar(format!("cannot inject {kind:?}: every variant is generatable"))
        })?;
        out.push(KeySequence::new(keys, Label::Anomalous, name(spec.n_normal + j)));
    }
    Ok(out)
}

/// Human-readable grammar summary, one line per key.
pub fn describe(grammar: &Grammar) -> String {
    let mut s = format!("start {:?}\n", grammar.start);
    for (k, t) in grammar.transitions.iter().enumerate() {
        s.push_str(&format!("{k} -> {t:?}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(grammar: Grammar, n_normal: usize, n_anomalous: usize) -> SyntheticSpec {
        SyntheticSpec {
            grammar,
            n_normal,
            n_anomalous,
            kinds: AnomalyKind::ALL.to_vec(),
            seed: 11,
        }
    }

    #[test]
    fn chain_yields_identical_sequences() {
        let seqs = generate(&spec(Grammar::chain(10), 20, 0)).unwrap();
        assert!(seqs.iter().all(|s| s.keys == (0..10).collect::<Vec<u32>>()));
    }

    #[test]
    fn foreign_key_anomalies_leave_the_alphabet() {
        let g = Grammar::benchmark(3);
        let s = SyntheticSpec {
            kinds: vec![AnomalyKind::ForeignKey],
            ..spec(g.clone(), 0, 30)
        };
        for seq in generate(&s).unwrap() {
            assert!(seq.label.is_anomalous());
            assert!(seq.keys.iter().any(|&k| k >= g.n_keys));
        }
    }

    #[test]
    fn anomalies_are_never_generatable_and_normals_are() {
        let g = Grammar::benchmark(5);
        let seqs = generate(&spec(g.clone(), 200, 90)).unwrap();
        for s in &seqs {
            assert_eq!(g.accepts(&s.keys), !s.label.is_anomalous(), "{:?}", s.keys);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let s = spec(Grammar::benchmark(1), 50, 10);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let other = SyntheticSpec { seed: 12, ..s.clone() };
        assert_ne!(generate(&s).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn ring_has_no_short_cycles_or_shortcuts() {
        for g in [Grammar::benchmark(4), Grammar::high_variability(4)] {
            g.validate().unwrap();
            let edge = |a: u32, b: u32| Grammar::has_edge(&g.transitions[a as usize], b);
            for a in 0..g.n_keys {
                assert!(!edge(a, a));
                for &(b, _) in &g.transitions[a as usize] {
                    assert!(!edge(b, a));
                    for &(c, _) in &g.transitions[b as usize] {
                        assert!(!edge(a, c));
                    }
                }
            }
        }
        assert!(Grammar::high_variability(1).transitions.iter().all(|t| t.len() == 3));
    }

    #[test]
    fn cycle_is_deterministic_given_predecessor() {
        let g = Grammar::cycle(30, 5, 32, 2);
        for t in &g.transitions {
            assert_eq!(t.len(), 1);
        }
        assert_eq!(g.start.len(), 1);
        let seqs = generate(&spec(g, 100, 0)).unwrap();
        assert!(seqs.iter().all(|s| (5..=32).contains(&s.len())));
    }

    #[test]
    fn two_branch_splits_evenly() {
        let (g, x) = Grammar::two_branch(12, 10, 10, 0);
        let seqs = generate(&spec(g.clone(), 2000, 0)).unwrap();
        let succ = &g.transitions[x as usize];
        let mut first = 0usize;
        let mut total = 0usize;
        for s in &seqs {
            for w in s.keys.windows(2) {
                if w[0] == x {
                    total += 1;
                    first += usize::from(w[1] == succ[0].0);
                }
            }
        }
        let frac = first as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
    }

    #[test]
    fn malformed_grammars_are_rejected() {
        let mut g = Grammar::chain(3);
        g.transitions[0] = vec![(7, 1.0)];
        assert!(matches!(g.validate(), Err(Error::MalformedGrammar(_))));
        let mut g = Grammar::chain(3);
        g.start.clear();
        assert!(g.validate().is_err());
        let mut g = Grammar::chain(3);
        g.transitions[1] = vec![(2, -1.0)];
        assert!(g.validate().is_err());
    }

    #[test]
    fn chain_cannot_host_swaps() {
        // Every swap of a chain is rejected, so injection succeeds by retrying.
        let s = SyntheticSpec {
            kinds: vec![AnomalyKind::TransitionViolation],
            ..spec(Grammar::chain(4), 0, 5)
        };
        assert_eq!(generate(&s).unwrap().len(), 5);
    }
}
