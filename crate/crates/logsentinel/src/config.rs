//! Pipeline configuration: a TOML file whose every field has a default and
//! can be overridden from the command line with `--set section.field=value`.
//!
//! A single master `seed` derives the seed of every stochastic stage, so one
//! number fixes a whole run.

use serde::{Deserialize, Serialize};

use logsentinel_core::corpus::DEFAULT_MAX_KEYS;
use logsentinel_core::detector::DetectorConfig;
use logsentinel_core::model::ModelConfig;
use logsentinel_core::parser::DrainConfig;
use logsentinel_core::ppo::RlConfig;
use logsentinel_core::pretrain::TrainConfig;
use logsentinel_core::synthetic::{AnomalyKind, Grammar};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::presets::{Grouping, Preset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// Generate a labeled corpus from the `[synthetic]` section.
    Synthetic,
    /// Parse a raw log file with a preset.
    Log,
    /// Read a raw-id `LOGSEQ v1 raw` corpus.
    Sequences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    pub kind: InputKind,
    /// Log file or raw sequence corpus; unused for synthetic input.
    pub path: String,
    /// Optional CSV of `session,label` rows for session-grouped logs.
    pub labels: String,
}

impl Default for InputSection {
    fn default() -> Self {
        InputSection {
            kind: InputKind::Synthetic,
            path: String::new(),
            labels: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    /// `benchmark`, `high-variability`, `cycle` or `two-branch`.
    pub grammar: String,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub kinds: Vec<AnomalyKind>,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            grammar: "benchmark".into(),
            n_normal: 3000,
            n_anomalous: 200,
            kinds: AnomalyKind::ALL.to_vec(),
        }
    }
}

impl SyntheticSection {
    pub fn grammar(&self, seed: u64) -> Result<Grammar> {
        Ok(match self.grammar.as_str() {
            "benchmark" => Grammar::benchmark(seed),
            "high-variability" => Grammar::high_variability(seed),
            "cycle" => Grammar::cycle(30, 8, 32, seed),
            "two-branch" => Grammar::two_branch(30, 8, 32, seed).0,
            other => {
                return Err(Error::Usage(format!(
                    "unknown grammar {other:?}; expected benchmark, high-variability, cycle or two-branch"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParserSection {
    /// `hdfs`, `bgl`, `thunderbird` or `generic`.
    pub preset: String,
    pub depth: usize,
    pub sim_threshold: f32,
    pub max_children: usize,
    /// Overrides the preset grouping when non-empty.
    pub session_regex: String,
    /// Overrides the preset grouping when positive.
    pub window_secs: u64,
    /// Overrides the preset grouping when positive.
    pub chunk_lines: usize,
}

impl Default for ParserSection {
    fn default() -> Self {
        let d = DrainConfig::default();
        ParserSection {
            preset: "hdfs".into(),
            depth: d.depth,
            sim_threshold: d.sim_threshold,
            max_children: d.max_children,
            session_regex: String::new(),
            window_secs: 0,
            chunk_lines: 0,
        }
    }
}

impl ParserSection {
    pub fn drain(&self) -> DrainConfig {
        DrainConfig {
            depth: self.depth,
            sim_threshold: self.sim_threshold,
            max_children: self.max_children,
        }
    }

    pub fn preset(&self) -> Result<(Preset, Grouping)> {
        let p = Preset::by_name(&self.preset)?;
        let g = if !self.session_regex.is_empty() {
            Grouping::Session {
                regex: self.session_regex.clone(),
            }
        } else if self.window_secs > 0 {
            Grouping::Window { secs: self.window_secs }
        } else if self.chunk_lines > 0 {
            Grouping::Chunk { lines: self.chunk_lines }
        } else {
            p.grouping.clone()
        };
        Ok((p, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub n_train: usize,
    pub max_keys: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            n_train: 2000,
            max_keys: DEFAULT_MAX_KEYS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub dropout: f32,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            max_len: m.max_len,
            dropout: m.dropout,
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            vocab_size,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip_norm: f32,
    pub checkpoint_every: usize,
    pub score_first_key: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            grad_clip_norm: t.grad_clip_norm,
            checkpoint_every: t.checkpoint_every,
            score_first_key: t.score_first_key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub enabled: bool,
    pub lr: f32,
    pub episodes: usize,
    pub prompt_ratio: f32,
    pub ppo_epochs: usize,
    pub clip: bool,
    pub clip_epsilon: f32,
    pub early_stop_patience: usize,
    /// Top-K ratio of the reward; kept separate from the detector's so that
    /// changing the detection threshold does not retrain.
    pub top_k_ratio: f32,
    pub prompts_per_episode: usize,
    pub minibatch_size: usize,
    pub grad_clip_norm: f32,
}

impl Default for RlSection {
    fn default() -> Self {
        let r = RlConfig::default();
        RlSection {
            enabled: true,
            lr: r.lr,
            episodes: r.episodes,
            prompt_ratio: r.prompt_ratio,
            ppo_epochs: r.ppo_epochs,
            clip: r.clip_epsilon.is_some(),
            clip_epsilon: r.clip_epsilon.unwrap_or(0.2),
            early_stop_patience: r.early_stop_patience,
            top_k_ratio: r.top_k_ratio,
            prompts_per_episode: r.prompts_per_episode,
            minibatch_size: r.minibatch_size,
            grad_clip_norm: r.grad_clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub top_k_ratio: f32,
    pub score_first_key: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        let d = DetectorConfig::default();
        DetectorSection {
            top_k_ratio: d.top_k_ratio,
            score_first_key: d.score_first_key,
        }
    }
}

impl DetectorSection {
    pub fn config(&self) -> DetectorConfig {
        DetectorConfig {
            top_k_ratio: self.top_k_ratio,
            score_first_key: self.score_first_key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ratios: Vec<f32>,
    /// Training-set sizes; empty skips the size sweep in `run-all`.
    pub sizes: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            ratios: logsentinel_core::eval::default_ratios(),
            sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub out_dir: String,
    /// Worker threads for detection and sweeps.
    pub jobs: usize,
    pub input: InputSection,
    pub synthetic: SyntheticSection,
    pub parser: ParserSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub rl: RlSection,
    pub detector: DetectorSection,
    pub sweep: SweepSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            out_dir: "logsentinel-out".into(),
            jobs: 1,
            input: InputSection::default(),
            synthetic: SyntheticSection::default(),
            parser: ParserSection::default(),
            split: SplitSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            rl: RlSection::default(),
            detector: DetectorSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Stages with their own derived seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Grammar,
    Synthetic,
    Split,
    ModelInit,
    Train,
    Rl,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Grammar => "grammar",
            Stage::Synthetic => "synthetic",
            Stage::Split => "split",
            Stage::ModelInit => "model-init",
            Stage::Train => "train",
            Stage::Rl => "rl",
        }
    }
}

/// Canonical TOML of any serializable section, the input to every hash.
pub fn canonical<T: Serialize>(value: &T) -> String {
    let mut v = toml::Value::try_from(value).expect("configuration serializes");
    shorten_floats(&mut v);
    toml::to_string(&v).expect("configuration serializes")
}

/// Floats that are exact f32 values print in their shortest f32 form (`0.1`
/// rather than `0.10000000149011612`); parsing either back gives the same f32.
fn shorten_floats(v: &mut toml::Value) {
    match v {
        toml::Value::Float(f) => {
            let narrow = *f as f32;
            if narrow as f64 == *f {
                *f = narrow.to_string().parse().expect("f32 display parses");
            }
        }
        toml::Value::Array(items) => items.iter_mut().for_each(shorten_floats),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, x)| shorten_floats(x)),
        _ => {}
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        canonical(self)
    }

    /// Hash of every field that can change a result; `out_dir` and `jobs`
    /// are left out.
    pub fn hash(&self) -> String {
        let neutral = PipelineConfig {
            out_dir: String::new(),
            jobs: 1,
            ..self.clone()
        };
        sha256_hex(neutral.to_toml().as_bytes())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let h = sha256_hex(format!("{}:{}", self.seed, stage.tag()).as_bytes());
        u64::from_str_radix(&h[..16], 16).expect("hex digest")
    }

    /// Applies `section.field=value`; the value is read as a TOML literal and
    /// falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects key=value, got {assignment:?}")))?;
        let path: Vec<&str> = path.trim().split('.').collect();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).expect("configuration serializes");
        let mut node = &mut root;
        for (i, key) in path.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Usage(format!("{} is not a section", path[..i].join("."))))?;
            let slot = table
                .get_mut(*key)
                .ok_or_else(|| Error::Usage(format!("unknown config field {:?}", path.join("."))))?;
            if i + 1 == path.len() {
                if slot.is_table() {
                    return Err(Error::Usage(format!("{} is a section, not a field", path.join("."))));
                }
                *slot = coerce(slot, value.clone());
            }
            node = slot;
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("--set {assignment}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.config().validate()?;
        self.train_config().validate()?;
        self.rl_config().validate()?;
        self.parser.drain().validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Usage(format!("seed must be at most {}", i64::MAX)));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("jobs must be at least 1".into()));
        }
        if self.sweep.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::Usage("sweep ratios must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.stage_seed(Stage::Train),
            grad_clip_norm: t.grad_clip_norm,
            checkpoint_every: t.checkpoint_every,
            score_first_key: t.score_first_key,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        let r = &self.rl;
        RlConfig {
            lr: r.lr,
            episodes: r.episodes,
            prompt_ratio: r.prompt_ratio,
            ppo_epochs: r.ppo_epochs,
            clip_epsilon: r.clip.then_some(r.clip_epsilon),
            early_stop_patience: r.early_stop_patience,
            top_k_ratio: r.top_k_ratio,
            prompts_per_episode: r.prompts_per_episode,
            minibatch_size: r.minibatch_size,
            grad_clip_norm: r.grad_clip_norm,
            seed: self.stage_seed(Stage::Rl),
            score_first_key: self.detector.score_first_key,
        }
    }

    /// Every field with its default, for help text.
    pub fn defaults_listing() -> String {
        PipelineConfig::default().to_toml()
    }
}

/// Integer literals assigned to float fields stay floats, so
/// `--set train.lr=1` works.
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, &new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => new,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn set_overrides_and_rejects_unknown_fields() {
        let mut c = PipelineConfig::default();
        c.set("detector.top_k_ratio=0.3").unwrap();
        c.set("train.lr=1").unwrap();
        c.set("parser.preset=bgl").unwrap();
        c.set("input.kind=\"log\"").unwrap();
        c.set("sweep.sizes=[50, 200]").unwrap();
        assert_eq!(c.detector.top_k_ratio, 0.3);
        assert_eq!(c.train.lr, 1.0);
        assert_eq!(c.parser.preset, "bgl");
        assert_eq!(c.input.kind, InputKind::Log);
        assert_eq!(c.sweep.sizes, vec![50, 200]);
        for bad in ["detector.nope=1", "detector=1", "train.epochs=abc", "noequals"] {
            assert_eq!(c.set(bad).unwrap_err().exit_code(), 2, "{bad}");
        }
        assert!(PipelineConfig::from_toml("[detector]\nbogus = 1\n").is_err());
    }

    #[test]
    fn seeds_derive_from_master() {
        let a = PipelineConfig::default();
        let b = PipelineConfig { seed: 7, ..a.clone() };
        assert_ne!(a.stage_seed(Stage::Train), a.stage_seed(Stage::Rl));
        assert_ne!(a.stage_seed(Stage::Train), b.stage_seed(Stage::Train));
        assert_eq!(a.train_config().seed, a.stage_seed(Stage::Train));
    }

    #[test]
    fn listing_names_every_section() {
        let text = PipelineConfig::defaults_listing();
        for key in ["seed", "[input]", "[synthetic]", "[parser]", "[split]", "[model]", "[train]", "[rl]", "[detector]", "[sweep]", "top_k_ratio", "clip_epsilon"] {
            assert!(text.contains(key), "{key}");
        }
    }
}
