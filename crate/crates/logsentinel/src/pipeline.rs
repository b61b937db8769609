//! Stage implementations shared by the subcommands, and `run-all`, which
//! chains them with caching.
//!
//! Every stage writes a `<stage>.provenance.toml` sidecar holding the
//! resolved configuration, its hash, a stage hash over the configuration
//! subset and input artifacts the stage depends on, and the hashes of the
//! files it produced. A rerun skips a stage whose stage hash and outputs
//! still match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use logsentinel_core::corpus::{build_split, CorpusSplit, KeySequence, Label, Vocabulary};
use logsentinel_core::detector::Verdict;
use logsentinel_core::eval::{self, ExperimentConfig};
use logsentinel_core::metrics::{self, MetricsReport};
use logsentinel_core::model::GptModel;
use logsentinel_core::ppo::{finetune_with, FinetuneReport};
use logsentinel_core::pretrain::{pretrain_with, PretrainReport};
use logsentinel_core::synthetic::{generate, SyntheticSpec};

use crate::config::{canonical, InputKind, PipelineConfig, Stage};
use crate::error::{Error, Result};
use crate::formats::corpus::{self as corpus_fmt, IdSpace};
use crate::formats::tables::{self, ReportRow};
use crate::formats::{checkpoint, keystream, templates, verdicts as verdict_fmt};
use crate::ingest;
use crate::io::{self, file_hash, sha256_hex, write_atomic};
use crate::parallel;

/// Cap on validation sequences used for the fine-tuning violation rate.
pub const MAX_VALIDATION: usize = 256;

/// File layout of one run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
    pub fn templates(&self) -> PathBuf {
        self.path("templates.draintbl")
    }
    pub fn keystream(&self) -> PathBuf {
        self.path("keystream.tsv")
    }
    pub fn sequences(&self) -> PathBuf {
        self.path("sequences.logseq")
    }
    pub fn train(&self) -> PathBuf {
        self.path("train.logseq")
    }
    pub fn test(&self) -> PathBuf {
        self.path("test.logseq")
    }
    pub fn vocab(&self) -> PathBuf {
        self.path("vocab.tsv")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.path("pretrained.lgpt")
    }
    pub fn pretrain_metrics(&self) -> PathBuf {
        self.path("pretrain_metrics.tsv")
    }
    pub fn finetuned(&self) -> PathBuf {
        self.path("finetuned.lgpt")
    }
    pub fn rl_metrics(&self) -> PathBuf {
        self.path("rl_metrics.tsv")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.path("verdicts.tsv")
    }
    pub fn trace(&self) -> PathBuf {
        self.path("trace.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.tsv")
    }
    pub fn sweep_topk(&self) -> PathBuf {
        self.path("sweep_topk.tsv")
    }
    pub fn sweep_size(&self) -> PathBuf {
        self.path("sweep_size.tsv")
    }
    pub fn size_model(&self, size: usize) -> PathBuf {
        self.path(&format!("sweep_size_n{size}.lgpt"))
    }
    pub fn size_test(&self, size: usize) -> PathBuf {
        self.path(&format!("sweep_size_n{size}.test.logseq"))
    }
    pub fn provenance(&self, stage: &str) -> PathBuf {
        self.path(&format!("{stage}.provenance.toml"))
    }
}

/// Sidecar written next to the artifacts of each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub stage: String,
    pub stage_hash: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config: PipelineConfig,
}

impl ProvenanceRecord {
    pub fn new(stage: &str, stage_hash: &str, cfg: &PipelineConfig, inputs: &BTreeMap<String, String>, outputs: &[PathBuf]) -> Result<Self> {
        let outputs = outputs
            .iter()
            .map(|p| Ok((file_name(p), file_hash(p)?)))
            .collect::<Result<_>>()?;
        Ok(ProvenanceRecord {
            stage: stage.into(),
            stage_hash: stage_hash.into(),
            config_hash: cfg.hash(),
            inputs: inputs.clone(),
            outputs,
            config: cfg.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, canonical(self).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        toml::from_str(&io::read_text(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Writes the sidecar for a standalone artifact, `<artifact>.provenance.toml`.
pub fn write_sidecar(artifact: &Path, stage: &str, cfg: &PipelineConfig, inputs: &[&Path]) -> Result<()> {
    let inputs = hash_inputs(inputs)?;
    let stage_hash = stage_hash(stage, &toml::Value::try_from(cfg).expect("serializes"), &inputs);
    let rec = ProvenanceRecord::new(stage, &stage_hash, cfg, &inputs, &[artifact.to_path_buf()])?;
    let mut name = artifact.as_os_str().to_owned();
    name.push(".provenance.toml");
    rec.save(Path::new(&name))
}

fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((file_name(p), file_hash(p)?))).collect()
}

fn stage_hash(stage: &str, subset: &toml::Value, inputs: &BTreeMap<String, String>) -> String {
    let mut wrapped = toml::Table::new();
    wrapped.insert(stage.to_string(), subset.clone());
    let mut text = canonical(&wrapped);
    for (k, v) in inputs {
        text.push_str(&format!("{k}={v}\n"));
    }
    sha256_hex(text.as_bytes())
}

// ---------------------------------------------------------------------------
// Stage bodies
// ---------------------------------------------------------------------------

/// Raw labeled sequences from the configured synthetic grammar.
pub fn synthesize(cfg: &PipelineConfig) -> Result<Vec<KeySequence>> {
    let spec = SyntheticSpec {
        grammar: cfg.synthetic.grammar(cfg.stage_seed(Stage::Grammar))?,
        n_normal: cfg.synthetic.n_normal,
        n_anomalous: cfg.synthetic.n_anomalous,
        kinds: cfg.synthetic.kinds.clone(),
        seed: cfg.stage_seed(Stage::Synthetic),
    };
    Ok(generate(&spec)?)
}

pub fn split(cfg: &PipelineConfig, raw: &[KeySequence]) -> Result<CorpusSplit> {
    Ok(build_split(raw, cfg.split.n_train, cfg.stage_seed(Stage::Split), cfg.split.max_keys)?)
}

pub fn save_split(layout: &Layout, split: &CorpusSplit) -> Result<()> {
    let ids = IdSpace::Vocab(split.vocab.size());
    let test: Vec<KeySequence> = split.test_sequences().cloned().collect();
    corpus_fmt::save(&layout.train(), ids, &split.train)?;
    corpus_fmt::save(&layout.test(), ids, &test)?;
    corpus_fmt::save_vocab(&layout.vocab(), &split.vocab)
}

/// Loads a vocabulary-id corpus and checks it against `vocab_size` if given.
pub fn load_encoded(path: &Path) -> Result<(usize, Vec<KeySequence>)> {
    let f = corpus_fmt::load(path)?;
    match f.ids {
        IdSpace::Vocab(n) => Ok((n, f.sequences)),
        IdSpace::Raw => Err(Error::Data(format!(
            "{}: corpus holds raw template ids; build a split with `corpus` first",
            path.display()
        ))),
    }
}

pub fn new_model(cfg: &PipelineConfig, vocab_size: usize) -> Result<GptModel> {
    Ok(GptModel::new(cfg.model.config(vocab_size), cfg.stage_seed(Stage::ModelInit))?)
}

/// Pretrains a fresh model. Periodic checkpoints go to
/// `<checkpoint_stem>.epoch<N>.lgpt` when `train.checkpoint_every > 0`.
pub fn pretrain_model(
    cfg: &PipelineConfig,
    train: &[KeySequence],
    vocab: &Vocabulary,
    checkpoint_stem: Option<&Path>,
) -> Result<(GptModel, PretrainReport)> {
    let mut model = new_model(cfg, vocab.size())?;
    let tc = cfg.train_config();
    let mut ckpt_err = None;
    let report = pretrain_with(&mut model, train, vocab, &tc, |stats, m| {
        eprintln!(
            "  epoch {:>3}  loss {:.5}  top1 {:.4}",
            stats.epoch, stats.mean_loss, stats.top1_acc
        );
        if let (Some(stem), true) = (checkpoint_stem, tc.checkpoint_every > 0) {
            if (stats.epoch + 1) % tc.checkpoint_every == 0 && ckpt_err.is_none() {
                let p = PathBuf::from(format!("{}.epoch{}.lgpt", stem.display(), stats.epoch + 1));
                ckpt_err = checkpoint::save(&p, m).err();
            }
        }
    })?;
    if let Some(e) = ckpt_err {
        return Err(e);
    }
    Ok((model, report))
}

pub fn finetune_model(cfg: &PipelineConfig, model: &mut GptModel, train: &[KeySequence], validation: &[KeySequence]) -> Result<FinetuneReport> {
    let rc = cfg.rl_config();
    let val = (!validation.is_empty()).then_some(validation);
    Ok(finetune_with(model, train, &rc, val, |e, _| {
        eprintln!(
            "  episode {:>3}  reward {:.4}  violation rate {}",
            e.episode,
            e.mean_reward,
            e.violation_rate.map_or("-".into(), |v| format!("{v:.4}"))
        );
    })?)
}

/// Normal sequences reserved for the fine-tuning violation-rate readout.
pub fn validation_set(test: &[KeySequence]) -> Vec<KeySequence> {
    test.iter()
        .filter(|s| s.label == Label::Normal)
        .take(MAX_VALIDATION)
        .cloned()
        .collect()
}

pub fn check_vocab(model: &GptModel, corpus_vocab: usize) -> Result<()> {
    if model.vocab_size() != corpus_vocab {
        return Err(Error::Data(format!(
            "model/corpus vocabulary mismatch: model has {} outputs, corpus declares vocab={} (difference {})",
            model.vocab_size(),
            corpus_vocab,
            model.vocab_size() as i64 - corpus_vocab as i64
        )));
    }
    Ok(())
}

pub fn labeled(seqs: &[KeySequence]) -> (Vec<usize>, Vec<bool>) {
    seqs.iter()
        .enumerate()
        .filter(|(_, s)| s.label != Label::Unlabeled)
        .map(|(i, s)| (i, s.label == Label::Anomalous))
        .unzip()
}

/// Precision/recall/F1 of verdicts over the labeled part of `seqs`.
pub fn score_verdicts(verdicts: &[Verdict], seqs: &[KeySequence]) -> Result<MetricsReport> {
    let (idx, labels) = labeled(seqs);
    let flags: Vec<bool> = idx.iter().map(|&i| verdicts[i].anomalous).collect();
    Ok(metrics::score(&flags, &labels)?)
}

pub fn short_hash(cfg: &PipelineConfig) -> String {
    cfg.hash()[..16].to_string()
}

fn fmt_ratio(r: f32) -> String {
    format!("{}", (r as f64 * 1e6).round() / 1e6)
}

/// Top-K sweep rows over the labeled part of `seqs`, scoring each sequence
/// once with up to `jobs` threads.
pub fn sweep_ratios(cfg: &PipelineConfig, model: &GptModel, seqs: &[KeySequence], jobs: usize) -> Result<Vec<ReportRow>> {
    let (idx, labels) = labeled(seqs);
    let chosen: Vec<KeySequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
    let scores = parallel::score_batch(model, &chosen, cfg.detector.score_first_key, jobs)?;
    let mined = model.vocab_size() - logsentinel_core::corpus::RESERVED;
    let hash = short_hash(cfg);
    cfg.sweep
        .ratios
        .iter()
        .map(|&r| {
            let k = logsentinel_core::detector::k_for_ratio(r, mined);
            let flags: Vec<bool> = scores.iter().map(|s| s.verdict(k).anomalous).collect();
            Ok(ReportRow {
                config_hash: hash.clone(),
                point: fmt_ratio(r),
                metrics: metrics::score(&flags, &labels)?,
            })
        })
        .collect()
}

pub fn experiment_config(cfg: &PipelineConfig) -> ExperimentConfig {
    ExperimentConfig {
        n_train: cfg.split.n_train,
        split_seed: cfg.stage_seed(Stage::Split),
        max_keys: cfg.split.max_keys,
        model: cfg.model.config(0),
        model_seed: cfg.stage_seed(Stage::ModelInit),
        train: cfg.train_config(),
        rl: cfg.rl_config(),
        use_rl: cfg.rl.enabled,
        detector: cfg.detector.config(),
    }
}

/// Training-size sweep over raw sequences. Each size trains its own model,
/// so sizes run one after another.
/// Trains one model per `sweep.sizes` entry and saves it with its test corpus.
pub fn train_size_models(cfg: &PipelineConfig, raw: &[KeySequence], layout: &Layout) -> Result<()> {
    let ec = experiment_config(cfg);
    for (size, split) in eval::size_sweep_splits(raw, &cfg.sweep.sizes, &ec)? {
        eprintln!("  size {size}: vocab {}", split.vocab.size());
        let model = eval::train_on_split(&split, &ec)?;
        checkpoint::save(&layout.size_model(size), &model)?;
        let test: Vec<KeySequence> = split.test_sequences().cloned().collect();
        corpus_fmt::save(&layout.size_test(size), IdSpace::Vocab(split.vocab.size()), &test)?;
    }
    Ok(())
}

/// Detection metrics of the models written by [`train_size_models`].
pub fn eval_size_models(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<ReportRow>> {
    let hash = short_hash(cfg);
    let dc = cfg.detector.config();
    cfg.sweep
        .sizes
        .iter()
        .map(|&size| {
            let model = checkpoint::load(&layout.size_model(size))?;
            let (n, test) = load_encoded(&layout.size_test(size))?;
            check_vocab(&model, n)?;
            let verdicts = parallel::detect_batch(&model, &test, &dc, cfg.jobs)?;
            Ok(ReportRow {
                config_hash: hash.clone(),
                point: size.to_string(),
                metrics: score_verdicts(&verdicts, &test)?,
            })
        })
        .collect()
}

/// Training-size sweep in one go: trains into `layout`, then evaluates.
pub fn sweep_sizes(cfg: &PipelineConfig, raw: &[KeySequence], layout: &Layout) -> Result<Vec<ReportRow>> {
    train_size_models(cfg, raw, layout)?;
    eval_size_models(cfg, layout)
}

// ---------------------------------------------------------------------------
// run-all
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
    Skipped,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub stages: Vec<(&'static str, StageStatus)>,
    pub report: Option<MetricsReport>,
}

impl RunSummary {
    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| *s == stage).map(|(_, st)| *st)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub trace: bool,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    layout: Layout,
    summary: RunSummary,
}

impl Runner<'_> {
    /// Runs `body` unless the stage's sidecar shows identical inputs and
    /// intact outputs.
    fn stage<F>(&mut self, name: &'static str, subset: toml::Value, inputs: &[PathBuf], outputs: &[PathBuf], body: F) -> Result<()>
    where
        F: FnOnce(&Layout) -> Result<()>,
    {
        let wrap = |e: Error, artifact: &Path| Error::Stage {
            stage: name,
            artifact: artifact.to_path_buf(),
            source: Box::new(e),
        };
        let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        let input_hashes = hash_inputs(&input_refs).map_err(|e| wrap(e, &self.layout.dir))?;
        let hash = stage_hash(name, &subset, &input_hashes);
        let sidecar = self.layout.provenance(name);
        if let Ok(prev) = ProvenanceRecord::load(&sidecar) {
            let intact = prev.stage_hash == hash
                && outputs.iter().all(|p| {
                    prev.outputs.get(&file_name(p)).is_some_and(|h| file_hash(p).ok().as_ref() == Some(h))
                });
            if intact {
                eprintln!("stage {name}: cached");
                self.summary.stages.push((name, StageStatus::Cached));
                return Ok(());
            }
        }
        eprintln!("stage {name}: running");
        let start = Instant::now();
        let first_output = outputs.first().cloned().unwrap_or_else(|| self.layout.dir.clone());
        body(&self.layout).map_err(|e| wrap(e, &first_output))?;
        ProvenanceRecord::new(name, &hash, self.cfg, &input_hashes, outputs)
            .and_then(|r| r.save(&sidecar))
            .map_err(|e| wrap(e, &sidecar))?;
        eprintln!("stage {name}: done in {:.1}s", start.elapsed().as_secs_f64());
        self.summary.stages.push((name, StageStatus::Ran));
        Ok(())
    }

    fn skip(&mut self, name: &'static str) {
        let _ = std::fs::remove_file(self.layout.provenance(name));
        self.summary.stages.push((name, StageStatus::Skipped));
    }
}

fn subset<T: Serialize>(value: &T) -> toml::Value {
    toml::Value::try_from(value).expect("configuration serializes")
}

fn raw_sequences_from_input(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<KeySequence>> {
    match cfg.input.kind {
        InputKind::Synthetic => synthesize(cfg),
        InputKind::Sequences => Ok(corpus_fmt::load(Path::new(&cfg.input.path))?.sequences),
        InputKind::Log => {
            let (preset, grouping) = cfg.parser.preset()?;
            let text = io::read_text(Path::new(&cfg.input.path))?;
            let out = ingest::mine(text.lines(), &preset, &grouping, cfg.parser.drain())?;
            eprintln!(
                "  {} lines, {} templates, {} without header, {} empty",
                out.counts.lines,
                out.table.len(),
                out.counts.header_mismatch,
                out.counts.empty_content
            );
            templates::save(&layout.templates(), &out.table)?;
            keystream::save(&layout.keystream(), &out.stream)?;
            let labels = if cfg.input.labels.is_empty() {
                None
            } else {
                Some(ingest::read_session_labels(&io::read_text(Path::new(&cfg.input.labels))?)?)
            };
            let g = ingest::group(&out.stream, labels.as_ref())?;
            if g.dropped > 0 {
                eprintln!("  {} lines matched no session and were dropped", g.dropped);
            }
            Ok(g.sequences)
        }
    }
}

/// Runs every stage, skipping those whose inputs are unchanged.
pub fn run_all(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    std::fs::create_dir_all(&layout.dir).map_err(|e| Error::io(&layout.dir, e))?;
    write_atomic(&layout.path("config.resolved.toml"), cfg.to_toml().as_bytes())?;
    let mut r = Runner {
        cfg,
        layout: layout.clone(),
        summary: RunSummary::default(),
    };

    // data
    let mut external: Vec<PathBuf> = Vec::new();
    if cfg.input.kind != InputKind::Synthetic {
        external.push(PathBuf::from(&cfg.input.path));
        if !cfg.input.labels.is_empty() {
            external.push(PathBuf::from(&cfg.input.labels));
        }
    }
    let mut data_outputs = vec![layout.sequences(), layout.train(), layout.test(), layout.vocab()];
    if cfg.input.kind == InputKind::Log {
        data_outputs.extend([layout.templates(), layout.keystream()]);
    }
    let data_subset = subset(&(
        &cfg.input,
        &cfg.synthetic,
        &cfg.parser,
        &cfg.split,
        cfg.seed,
    ));
    r.stage("data", data_subset, &external, &data_outputs, |l| {
        let raw = raw_sequences_from_input(cfg, l)?;
        corpus_fmt::save(&l.sequences(), IdSpace::Raw, &raw)?;
        let sp = split(cfg, &raw)?;
        eprintln!(
            "  vocab {} ({} mined), train {}, test {} normal / {} anomalous / {} unlabeled",
            sp.vocab.size(),
            sp.vocab.mined_len(),
            sp.train.len(),
            sp.test_normal.len(),
            sp.test_anomalous.len(),
            sp.test_unlabeled.len()
        );
        save_split(l, &sp)
    })?;

    // pretrain
    let pre_subset = subset(&(&cfg.model, &cfg.train, cfg.seed));
    r.stage(
        "pretrain",
        pre_subset,
        &[layout.train(), layout.vocab()],
        &[layout.pretrained(), layout.pretrain_metrics()],
        |l| {
            let (_, train) = load_encoded(&l.train())?;
            let vocab = corpus_fmt::load_vocab(&l.vocab())?;
            let stem = l.path("pretrained");
            let (model, report) = pretrain_model(cfg, &train, &vocab, Some(&stem))?;
            checkpoint::save(&l.pretrained(), &model)?;
            write_atomic(&l.pretrain_metrics(), tables::encode_pretrain(&report.epochs).as_bytes())
        },
    )?;

    // finetune
    let final_model = if cfg.rl.enabled {
        let rl_subset = subset(&(&cfg.rl, cfg.detector.score_first_key, cfg.seed));
        r.stage(
            "finetune",
            rl_subset,
            &[layout.pretrained(), layout.train(), layout.test()],
            &[layout.finetuned(), layout.rl_metrics()],
            |l| {
                let mut model = checkpoint::load(&l.pretrained())?;
                let (_, train) = load_encoded(&l.train())?;
                let (_, test) = load_encoded(&l.test())?;
                let report = finetune_model(cfg, &mut model, &train, &validation_set(&test))?;
                checkpoint::save(&l.finetuned(), &model)?;
                write_atomic(&l.rl_metrics(), tables::encode_rl(&report.episodes).as_bytes())
            },
        )?;
        layout.finetuned()
    } else {
        r.skip("finetune");
        layout.pretrained()
    };

    // detect
    let mut detect_outputs = vec![layout.verdicts()];
    if opts.trace {
        detect_outputs.push(layout.trace());
    }
    r.stage(
        "detect",
        subset(&(&cfg.detector, opts.trace)),
        &[final_model.clone(), layout.test()],
        &detect_outputs,
        |l| {
            let model = checkpoint::load(&final_model)?;
            let (n, test) = load_encoded(&l.test())?;
            check_vocab(&model, n)?;
            let vs = parallel::detect_batch(&model, &test, &cfg.detector.config(), cfg.jobs)?;
            verdict_fmt::save(&l.verdicts(), &vs)?;
            if opts.trace {
                let k = logsentinel_core::detector::k_for(&model, &cfg.detector.config());
                let keys: Vec<&[u32]> = test.iter().map(|s| s.keys.as_slice()).collect();
                write_atomic(&l.trace(), verdict_fmt::encode_trace(&vs, &keys, k).as_bytes())?;
            }
            Ok(())
        },
    )?;

    // eval
    r.stage(
        "eval",
        subset(&cfg.detector),
        &[layout.verdicts(), layout.test()],
        &[layout.report()],
        |l| {
            let lines = verdict_fmt::load(&l.verdicts())?;
            let (_, test) = load_encoded(&l.test())?;
            let m = score_lines(&lines, &test)?;
            let row = ReportRow {
                config_hash: short_hash(cfg),
                point: fmt_ratio(cfg.detector.top_k_ratio),
                metrics: m,
            };
            write_atomic(&l.report(), tables::encode_report(&[row]).as_bytes())
        },
    )?;

    // sweeps
    r.stage(
        "sweep-topk",
        subset(&(&cfg.sweep.ratios, cfg.detector.score_first_key)),
        &[final_model.clone(), layout.test()],
        &[layout.sweep_topk()],
        |l| {
            let model = checkpoint::load(&final_model)?;
            let (n, test) = load_encoded(&l.test())?;
            check_vocab(&model, n)?;
            let rows = sweep_ratios(cfg, &model, &test, cfg.jobs)?;
            write_atomic(&l.sweep_topk(), tables::encode_report(&rows).as_bytes())
        },
    )?;
    if cfg.sweep.sizes.is_empty() {
        r.skip("sweep-size-train");
        r.skip("sweep-size");
    } else {
        let train_subset = subset(&(&cfg.sweep.sizes, &cfg.model, &cfg.train, &cfg.rl, cfg.detector.score_first_key, &cfg.split, cfg.seed));
        let sizes = &cfg.sweep.sizes;
        let trained: Vec<PathBuf> = sizes.iter().flat_map(|&n| [layout.size_model(n), layout.size_test(n)]).collect();
        r.stage("sweep-size-train", train_subset, &[layout.sequences()], &trained, |l| {
            let raw = corpus_fmt::load(&l.sequences())?.sequences;
            train_size_models(cfg, &raw, l)
        })?;
        let eval_subset = subset(&(sizes, &cfg.detector, cfg.seed));
        r.stage("sweep-size", eval_subset, &trained, &[layout.sweep_size()], |l| {
            let rows = eval_size_models(cfg, l)?;
            write_atomic(&l.sweep_size(), tables::encode_report(&rows).as_bytes())
        })?;
    }

    let mut summary = r.summary;
    let lines = verdict_fmt::load(&layout.verdicts())?;
    let (_, test) = load_encoded(&layout.test())?;
    summary.report = Some(score_lines(&lines, &test)?);
    Ok(summary)
}

/// Metrics of verdict lines against the labels of the corpus they came from.
pub fn score_lines(lines: &[verdict_fmt::VerdictLine], seqs: &[KeySequence]) -> Result<MetricsReport> {
    if lines.len() != seqs.len() {
        return Err(Error::Data(format!(
            "{} verdicts for {} sequences",
            lines.len(),
            seqs.len()
        )));
    }
    let (idx, labels) = labeled(seqs);
    let flags: Vec<bool> = idx.iter().map(|&i| lines[i].anomalous).collect();
    Ok(metrics::score(&flags, &labels)?)
}

