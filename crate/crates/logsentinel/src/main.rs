use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use logsentinel::config::PipelineConfig;
use logsentinel::error::{Error, Result};
use logsentinel::formats::corpus::{self as corpus_fmt, IdSpace};
use logsentinel::formats::tables::{self, ReportRow};
use logsentinel::formats::{checkpoint, keystream, templates, verdicts};
use logsentinel::pipeline::{self, Layout, RunOptions};
use logsentinel::{ingest, io};
use logsentinel_core::corpus::{Label, Vocabulary};

const SEED_ENV: &str = "LOGSENTINEL_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "logsentinel",
    version,
    about = "Log-key language modeling and Top-K anomaly detection",
    long_about = "Parses logs into key sequences, pretrains a small decoder-only transformer on \
                  normal sequences, optionally fine-tunes it with a Top-K reward, and flags \
                  sequences whose observed keys fall outside the model's Top-K predictions.\n\n\
                  Exit codes: 0 success, 2 usage error, 3 data/format/IO error, 4 numerical failure."
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML pipeline configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed; falls back to the config file, then $LOGSENTINEL_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip fine-tuning (rl.enabled = false).
    #[arg(long, global = true)]
    no_rl: bool,
    /// Optimize the unclipped ratio objective (rl.clip = false).
    #[arg(long, global = true)]
    no_clip: bool,
    /// Detector Top-K ratio (detector.top_k_ratio).
    #[arg(long, global = true)]
    top_k_ratio: Option<f32>,
    /// Worker threads for detection and sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory (out_dir).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine templates from a raw log and write the template table and key stream.
    Parse {
        #[arg(long)]
        input: PathBuf,
        /// hdfs, bgl, thunderbird or generic (default: parser.preset).
        #[arg(long)]
        preset: Option<String>,
        /// Map lines through this existing table instead of mining; unmatched
        /// lines become UNSEEN.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Group a key stream (or read raw sequences) and build the train/test split.
    Corpus {
        #[arg(long, conflicts_with = "sequences")]
        keystream: Option<PathBuf>,
        /// Raw-id corpus, e.g. from `synth`.
        #[arg(long)]
        sequences: Option<PathBuf>,
        /// Session label CSV (`session,label` with Normal/Anomaly).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Encode everything with this vocabulary into corpus.logseq instead of splitting.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Generate a labeled synthetic raw corpus from the [synthetic] section.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a model on a training corpus.
    Pretrain {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Fine-tune a pretrained model with the Top-K reward.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Corpus whose normal sequences give the validation violation rate.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Flag anomalous sequences; one verdict line per corpus sequence.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a JSON-lines rank trace next to the verdicts.
        #[arg(long)]
        trace: bool,
        /// Trace path (implies --trace).
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Precision, recall and F1 of a model on a labeled corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-K ratio sweep of a model, or a training-size sweep over raw sequences.
    Sweep {
        /// Model for the ratio sweep.
        #[arg(long, requires = "corpus")]
        model: Option<PathBuf>,
        /// Labeled corpus for the ratio sweep.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Raw-id corpus for the training-size sweep.
        #[arg(long, conflicts_with = "model")]
        sequences: Option<PathBuf>,
        /// Comma-separated ratios (default: sweep.ratios).
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f32>,
        /// Comma-separated training sizes (default: sweep.sizes).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Report path (default: the sweep table under the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage, reusing stages whose inputs are unchanged.
    RunAll {
        /// Write the detection rank trace too.
        #[arg(long)]
        trace: bool,
    },
    /// Print the default configuration.
    Defaults,
}

fn resolve(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    let mut file_has_seed = false;
    if let Some(path) = &common.config {
        let text = io::read_text(path)?;
        cfg = PipelineConfig::from_toml(&text)?;
        file_has_seed = toml::from_str::<toml::Table>(&text).is_ok_and(|t| t.contains_key("seed"));
    }
    if !file_has_seed {
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
    }
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.no_rl {
        cfg.rl.enabled = false;
    }
    if common.no_clip {
        cfg.rl.clip = false;
    }
    if let Some(r) = common.top_k_ratio {
        cfg.detector.top_k_ratio = r;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(p: &Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    p.clone().filter(|p| !p.as_os_str().is_empty()).unwrap_or(fallback)
}

fn load_vocab_or_sized(vocab: &Option<PathBuf>, declared: usize) -> Result<Vocabulary> {
    match vocab {
        Some(p) => {
            let v = corpus_fmt::load_vocab(p)?;
            if v.size() != declared {
                return Err(Error::Data(format!(
                    "{} has size {}, corpus declares vocab={declared}",
                    p.display(),
                    v.size()
                )));
            }
            Ok(v)
        }
        None => Ok(Vocabulary::with_size(declared)?),
    }
}

fn write_report(path: &Path, rows: &[ReportRow], cfg: &PipelineConfig, inputs: &[&Path]) -> Result<()> {
    io::write_atomic(path, tables::encode_report(rows).as_bytes())?;
    pipeline::write_sidecar(path, "report", cfg, inputs)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let layout = Layout::new(&cfg.out_dir);
    match cli.cmd {
        Command::Defaults => {
            print!("{}", PipelineConfig::defaults_listing());
        }
        Command::Parse { input, preset, templates: existing } => {
            let mut pcfg = cfg.parser.clone();
            if let Some(p) = preset {
                pcfg.preset = p;
            }
            let (preset, grouping) = pcfg.preset()?;
            let text = io::read_text(&input)?;
            let (stream, counts, table) = match existing {
                Some(t) => {
                    let table = templates::load(&t)?;
                    let (s, c) = ingest::apply(text.lines(), &preset, &grouping, &table)?;
                    (s, c, None)
                }
                None => {
                    let out = ingest::mine(text.lines(), &preset, &grouping, pcfg.drain())?;
                    (out.stream, out.counts, Some(out.table))
                }
            };
            if let Some(table) = &table {
                templates::save(&layout.templates(), table)?;
                pipeline::write_sidecar(&layout.templates(), "parse", &cfg, &[&input])?;
                eprintln!("{} templates -> {}", table.len(), layout.templates().display());
            }
            keystream::save(&layout.keystream(), &stream)?;
            pipeline::write_sidecar(&layout.keystream(), "parse", &cfg, &[&input])?;
            eprintln!(
                "{} keyed lines ({} without header, {} empty) -> {}",
                stream.records.len(),
                counts.header_mismatch,
                counts.empty_content,
                layout.keystream().display()
            );
        }
        Command::Corpus { keystream: ks, sequences, labels, vocab } => {
            let (raw, input) = match (ks, sequences) {
                (Some(k), _) => {
                    let stream = keystream::load(&k)?;
                    let labels = match &labels {
                        Some(p) => Some(ingest::read_session_labels(&io::read_text(p)?)?),
                        None => None,
                    };
                    let g = ingest::group(&stream, labels.as_ref())?;
                    if g.dropped > 0 {
                        eprintln!("{} lines matched no session and were dropped", g.dropped);
                    }
                    (g.sequences, k)
                }
                (None, Some(s)) => (corpus_fmt::load(&s)?.sequences, s),
                (None, None) => return Err(Error::Usage("corpus needs --keystream or --sequences".into())),
            };
            match vocab {
                Some(vp) => {
                    let v = corpus_fmt::load_vocab(&vp)?;
                    let out = layout.path("corpus.logseq");
                    let enc: Vec<_> = raw
                        .iter()
                        .map(|s| {
                            let mut s = v.encode_sequence(s);
                            s.truncate(cfg.split.max_keys);
                            s
                        })
                        .collect();
                    corpus_fmt::save(&out, IdSpace::Vocab(v.size()), &enc)?;
                    pipeline::write_sidecar(&out, "corpus", &cfg, &[&input, &vp])?;
                    eprintln!("{} sequences -> {}", enc.len(), out.display());
                }
                None => {
                    if !raw.iter().any(|s| s.label == Label::Normal) {
                        return Err(Error::Data(
                            "no sequence is labeled normal; pass --labels or use a labeled log preset".into(),
                        ));
                    }
                    let split = pipeline::split(&cfg, &raw)?;
                    corpus_fmt::save(&layout.sequences(), IdSpace::Raw, &raw)?;
                    pipeline::save_split(&layout, &split)?;
                    for p in [layout.sequences(), layout.train(), layout.test(), layout.vocab()] {
                        pipeline::write_sidecar(&p, "corpus", &cfg, &[&input])?;
                    }
                    eprintln!(
                        "vocab {}, train {}, test {} -> {}",
                        split.vocab.size(),
                        split.train.len(),
                        split.test_sequences().count(),
                        layout.dir.display()
                    );
                }
            }
        }
        Command::Synth { out } => {
            let out = or_default(&out, layout.sequences());
            let raw = pipeline::synthesize(&cfg)?;
            corpus_fmt::save(&out, IdSpace::Raw, &raw)?;
            pipeline::write_sidecar(&out, "synth", &cfg, &[])?;
            eprintln!("{} sequences -> {}", raw.len(), out.display());
        }
        Command::Pretrain { train, vocab, out, metrics } => {
            let out = or_default(&out, layout.pretrained());
            let (n, seqs) = pipeline::load_encoded(&train)?;
            let v = load_vocab_or_sized(&vocab, n)?;
            let stem = out.with_extension("");
            let (model, report) = pipeline::pretrain_model(&cfg, &seqs, &v, Some(&stem))?;
            checkpoint::save(&out, &model)?;
            pipeline::write_sidecar(&out, "pretrain", &cfg, &[&train])?;
            let mpath = or_default(&metrics, out.with_extension("metrics.tsv"));
            io::write_atomic(&mpath, tables::encode_pretrain(&report.epochs).as_bytes())?;
            eprintln!("model -> {}, metrics -> {}", out.display(), mpath.display());
        }
        Command::Finetune { model, train, validation, out, metrics } => {
            let out = or_default(&out, layout.finetuned());
            let mut m = checkpoint::load(&model)?;
            let (n, seqs) = pipeline::load_encoded(&train)?;
            pipeline::check_vocab(&m, n)?;
            let val = match &validation {
                Some(p) => {
                    let (vn, vs) = pipeline::load_encoded(p)?;
                    pipeline::check_vocab(&m, vn)?;
                    pipeline::validation_set(&vs)
                }
                None => Vec::new(),
            };
            let report = pipeline::finetune_model(&cfg, &mut m, &seqs, &val)?;
            checkpoint::save(&out, &m)?;
            pipeline::write_sidecar(&out, "finetune", &cfg, &[&model, &train])?;
            let mpath = or_default(&metrics, out.with_extension("metrics.tsv"));
            io::write_atomic(&mpath, tables::encode_rl(&report.episodes).as_bytes())?;
            eprintln!(
                "best episode {:?}{} -> {}",
                report.best_episode,
                if report.early_stopped { " (early stop)" } else { "" },
                out.display()
            );
        }
        Command::Detect { model, corpus, out, trace, trace_out } => {
            let out = or_default(&out, layout.verdicts());
            let m = checkpoint::load(&model)?;
            let (n, seqs) = pipeline::load_encoded(&corpus)?;
            pipeline::check_vocab(&m, n)?;
            let dc = cfg.detector.config();
            let vs = logsentinel::parallel::detect_batch(&m, &seqs, &dc, cfg.jobs)?;
            let vacuous = vs.iter().filter(|v| v.vacuous).count();
            verdicts::save(&out, &vs)?;
            if trace || trace_out.is_some() {
                let t = or_default(&trace_out, out.with_file_name("trace.jsonl"));
                let keys: Vec<&[u32]> = seqs.iter().map(|s| s.keys.as_slice()).collect();
                let k = logsentinel_core::detector::k_for(&m, &dc);
                io::write_atomic(&t, verdicts::encode_trace(&vs, &keys, k).as_bytes())?;
            }
            pipeline::write_sidecar(&out, "detect", &cfg, &[&model, &corpus])?;
            eprintln!(
                "{} of {} sequences flagged ({} vacuous) -> {}",
                vs.iter().filter(|v| v.anomalous).count(),
                vs.len(),
                vacuous,
                out.display()
            );
        }
        Command::Eval { model, corpus, out } => {
            let out = or_default(&out, layout.report());
            let m = checkpoint::load(&model)?;
            let (n, seqs) = pipeline::load_encoded(&corpus)?;
            pipeline::check_vocab(&m, n)?;
            let vs = logsentinel::parallel::detect_batch(&m, &seqs, &cfg.detector.config(), cfg.jobs)?;
            let metrics = pipeline::score_verdicts(&vs, &seqs)?;
            let row = ReportRow {
                config_hash: pipeline::short_hash(&cfg),
                point: format!("{}", cfg.detector.top_k_ratio),
                metrics,
            };
            write_report(&out, &[row], &cfg, &[&model, &corpus])?;
            println!("precision {:.4}  recall {:.4}  f1 {:.4}", metrics.precision, metrics.recall, metrics.f1);
        }
        Command::Sweep { model, corpus, sequences, ratios, sizes, out } => {
            let mut cfg = cfg;
            if !ratios.is_empty() {
                cfg.sweep.ratios = ratios;
            }
            if !sizes.is_empty() {
                cfg.sweep.sizes = sizes;
            }
            cfg.validate()?;
            match (model, corpus, sequences) {
                (Some(mp), Some(cp), None) => {
                    let out = or_default(&out, layout.sweep_topk());
                    let m = checkpoint::load(&mp)?;
                    let (n, seqs) = pipeline::load_encoded(&cp)?;
                    pipeline::check_vocab(&m, n)?;
                    let rows = pipeline::sweep_ratios(&cfg, &m, &seqs, cfg.jobs)?;
                    write_report(&out, &rows, &cfg, &[&mp, &cp])?;
                    print!("{}", tables::encode_report(&rows));
                }
                (None, None, Some(sp)) => {
                    if cfg.sweep.sizes.is_empty() {
                        return Err(Error::Usage("training-size sweep needs --sizes or sweep.sizes".into()));
                    }
                    let out = or_default(&out, layout.sweep_size());
                    let raw = corpus_fmt::load(&sp)?.sequences;
                    let rows = pipeline::sweep_sizes(&cfg, &raw, &layout)?;
                    write_report(&out, &rows, &cfg, &[&sp])?;
                    print!("{}", tables::encode_report(&rows));
                }
                _ => {
                    return Err(Error::Usage(
                        "sweep needs either --model with --corpus (Top-K ratios) or --sequences (training sizes)".into(),
                    ))
                }
            }
        }
        Command::RunAll { trace } => {
            let summary = pipeline::run_all(&cfg, RunOptions { trace })?;
            if let Some(m) = summary.report {
                println!(
                    "precision {:.4}  recall {:.4}  f1 {:.4}  ({})",
                    m.precision,
                    m.recall,
                    m.f1,
                    layout.report().display()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = format!(
        "Configuration fields and defaults (set with --config FILE or --set KEY=VALUE):\n\n{}",
        PipelineConfig::defaults_listing()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
