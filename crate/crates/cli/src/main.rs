//! Command-line front end for protolex: feature extraction, unsupervised
//! pattern discovery, and query-by-example spoken term detection.
//!
//! Every subcommand reads its inputs, writes its outputs atomically
//! (temporary sibling file, then rename), and never mutates an input file.
//! Exit codes: 0 on success, 1 on runtime failure, 2 on bad usage or
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use protolex::corpus::{extract_corpus, load_corpus, load_wav, save_corpus, FeatureConfig};
use protolex::decode::decode_corpus;
use protolex::detect::{
    build_distance_table, evaluate, fuse_and_rank, search_all, select_query_model, Query,
    RankedList, Relevance,
};
use protolex::eval::{map_patterns, pattern_accuracy};
use protolex::hmm::train::{init_hmms_from_labels, train_hmms};
use protolex::hmm::HMMSet;
use protolex::init::{build_initial_labels, InitMode};
use protolex::labels::CorpusLabels;
use protolex::lexicon::{harvest_lexicon, Lexicon};
use protolex::ngram::{estimate_ngram, NGramLM};
use protolex::pattree::{build_pat_tree, mine_candidates};
use protolex::pipeline::{run_full, StageConfig};
use protolex::synth::{generate, GroundTruth, SynthSpec};
use protolex::{Error, Result};

#[derive(Parser)]
#[command(
    name = "protolex",
    version,
    about = "Unsupervised two-level acoustic pattern discovery and spoken term detection"
)]
struct Cli {
    /// Print reports as JSON instead of plain text.
    #[arg(long, global = true)]
    json: bool,

    /// Cap the worker thread count. Results do not depend on this value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    TwoLevel,
    OneLevel,
    RandomIds,
}

impl From<ModeArg> for InitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TwoLevel => InitMode::TwoLevel,
            ModeArg::OneLevel => InitMode::OneLevel,
            ModeArg::RandomIds => InitMode::RandomIds,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Extract acoustic features from a directory of mono WAV files.
    Features {
        /// Directory scanned (non-recursively) for *.wav files.
        #[arg(long)]
        wav_dir: PathBuf,
        /// Output feature archive.
        #[arg(long)]
        out: PathBuf,
        /// TOML file with feature extraction settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with known structure.
    Synth {
        /// Output feature archive.
        #[arg(long)]
        out: PathBuf,
        /// Output ground-truth JSON.
        #[arg(long)]
        truth: PathBuf,
        /// TOML file with generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Random seed (overrides the spec file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce initial token labels and a first lexicon from features alone.
    Init {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_lexicon: PathBuf,
        /// TOML pipeline configuration (its [init] table applies here).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Initialization flavor (overrides the config file).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Train subword HMMs on a labelled corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Output model set.
        #[arg(long)]
        out: PathBuf,
        /// Warm-start model set; omitted means flat initialization.
        #[arg(long)]
        hmms: Option<PathBuf>,
        /// TOML pipeline configuration (its [train] table applies here).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Subword inventory size; default is the largest id in the labels + 1.
        #[arg(long)]
        inventory: Option<u32>,
    },
    /// Decode a corpus into word tokens with the current models.
    Decode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        hmms: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// ARPA language model; when given, decoding is LM-guided.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Output labels.
        #[arg(long)]
        out: PathBuf,
        /// TOML pipeline configuration (its [decode] table applies here).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Harvest a word lexicon from labels and rewrite tokens onto it.
    Lexicon {
        #[arg(long)]
        labels: PathBuf,
        /// Output lexicon.
        #[arg(long)]
        out: PathBuf,
        /// Optional output for the rewritten labels.
        #[arg(long)]
        out_labels: Option<PathBuf>,
        /// Keep multi-subword patterns occurring at least this often.
        #[arg(long, default_value_t = 2)]
        min_count: u64,
        /// Subword inventory size; default is the largest id in the labels + 1.
        #[arg(long)]
        inventory: Option<u32>,
    },
    /// Estimate an N-gram language model over word tokens.
    Lm {
        #[arg(long)]
        labels: PathBuf,
        /// Output ARPA file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: usize,
    },
    /// Mine frequent, context-diverse subword segments as word candidates.
    Mine {
        #[arg(long)]
        labels: PathBuf,
        /// Output candidate list (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_count: u64,
        /// Minimum left and right branching entropy in bits.
        #[arg(long, default_value_t = 0.3)]
        min_entropy: f64,
        #[arg(long, default_value_t = 2)]
        min_len: usize,
        #[arg(long, default_value_t = 8)]
        max_len: usize,
    },
    /// Run the full discovery pipeline: initialization and stages I-III.
    Run {
        /// Input feature archive.
        #[arg(long)]
        features: PathBuf,
        /// Working directory for checkpoints, the ledger, and final outputs.
        #[arg(long)]
        workdir: PathBuf,
        /// TOML pipeline configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random seed for initialization.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score discovered labels against synthetic ground truth.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Optional JSON report output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank utterances for query terms (spoken term detection).
    Std {
        #[arg(long)]
        hmms: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// JSON array of query terms with example occurrences.
        #[arg(long)]
        queries: PathBuf,
        /// Output ranked lists (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional output for the model distance table.
        #[arg(long)]
        save_table: Option<PathBuf>,
        /// Ranked lists from another system to fuse with (JSON).
        #[arg(long)]
        fuse_with: Option<PathBuf>,
        /// Fusion weight on the other system's distances, in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        /// Relevance judgments (TSV) for retrieval scoring.
        #[arg(long)]
        relevance: Option<PathBuf>,
        /// Optional JSON report output for the retrieval scores.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        // Errors only if a global pool already exists; results are identical
        // either way, so that is safe to ignore.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match dispatch(cli.cmd) {
        Ok(report) => {
            emit(&report, cli.json);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. } => 2,
        _ => 1,
    }
}

fn emit(report: &Value, as_json: bool) {
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(report).expect("report serializes")
        );
    } else if let Value::Object(map) = report {
        for (k, v) in map {
            match v {
                Value::String(s) => println!("{k}: {s}"),
                other => println!("{k}: {other}"),
            }
        }
    } else {
        println!("{report}");
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary sibling and renames it into place, so readers
/// never observe a half-written file.
fn atomic_save(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = path.with_file_name(format!("{name}.tmp"));
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_save(path, |tmp| fs::write(tmp, &text).map_err(|e| io_err(tmp, e)))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses a TOML config file; a missing `--config` means defaults.
fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str(&text).map_err(|e| Error::InvalidConfig {
                reason: format!("{}: {e}", p.display()),
            })
        }
    }
}

/// Largest subword id in the labels + 1, the natural inventory bound.
fn derived_inventory(labels: &CorpusLabels) -> u32 {
    labels
        .utterances
        .iter()
        .flat_map(|u| u.tokens.iter())
        .flat_map(|t| t.subword_ids.iter())
        .map(|&s| s + 1)
        .max()
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn dispatch(cmd: Cmd) -> Result<Value> {
    match cmd {
        Cmd::Features { wav_dir, out, config } => cmd_features(&wav_dir, &out, config.as_deref()),
        Cmd::Synth { out, truth, spec, seed } => cmd_synth(&out, &truth, spec.as_deref(), seed),
        Cmd::Init {
            corpus,
            out_labels,
            out_lexicon,
            config,
            seed,
            mode,
        } => cmd_init(&corpus, &out_labels, &out_lexicon, config.as_deref(), seed, mode),
        Cmd::Train {
            corpus,
            labels,
            out,
            hmms,
            config,
            inventory,
        } => cmd_train(&corpus, &labels, &out, hmms.as_deref(), config.as_deref(), inventory),
        Cmd::Decode {
            corpus,
            hmms,
            lexicon,
            lm,
            out,
            config,
        } => cmd_decode(&corpus, &hmms, &lexicon, lm.as_deref(), &out, config.as_deref()),
        Cmd::Lexicon {
            labels,
            out,
            out_labels,
            min_count,
            inventory,
        } => cmd_lexicon(&labels, &out, out_labels.as_deref(), min_count, inventory),
        Cmd::Lm { labels, out, order } => cmd_lm(&labels, &out, order),
        Cmd::Mine {
            labels,
            out,
            min_count,
            min_entropy,
            min_len,
            max_len,
        } => cmd_mine(&labels, &out, min_count, min_entropy, min_len, max_len),
        Cmd::Run {
            features,
            workdir,
            config,
            seed,
        } => cmd_run(&features, &workdir, config.as_deref(), seed),
        Cmd::Eval { labels, truth, out } => cmd_eval(&labels, &truth, out.as_deref()),
        Cmd::Std {
            hmms,
            labels,
            queries,
            out,
            save_table,
            fuse_with,
            lambda,
            relevance,
            report_out,
        } => cmd_std(
            &hmms,
            &labels,
            &queries,
            &out,
            save_table.as_deref(),
            fuse_with.as_deref(),
            lambda,
            relevance.as_deref(),
            report_out.as_deref(),
        ),
    }
}

fn cmd_features(wav_dir: &Path, out: &Path, config: Option<&Path>) -> Result<Value> {
    let cfg: FeatureConfig = read_toml(config)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(wav_dir)
        .map_err(|e| io_err(wav_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidConfig {
            reason: format!("no .wav files found in {}", wav_dir.display()),
        });
    }
    let waveforms = paths
        .iter()
        .map(|p| load_wav(p))
        .collect::<Result<Vec<_>>>()?;
    let corpus = extract_corpus(&waveforms, &cfg)?;
    atomic_save(out, |tmp| save_corpus(&corpus, tmp))?;
    let frames: usize = corpus.utterances.iter().map(|u| u.n_frames()).sum();
    Ok(json!({
        "utterances": corpus.utterances.len(),
        "feature_dim": corpus.utterances.first().map(|u| u.dim).unwrap_or(0),
        "total_frames": frames,
        "out": out.display().to_string(),
    }))
}

fn cmd_synth(out: &Path, truth_path: &Path, spec: Option<&Path>, seed: Option<u64>) -> Result<Value> {
    let mut spec: SynthSpec = read_toml(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let (corpus, truth) = generate(&spec)?;
    atomic_save(out, |tmp| save_corpus(&corpus, tmp))?;
    atomic_save(truth_path, |tmp| truth.save(tmp))?;
    Ok(json!({
        "utterances": corpus.utterances.len(),
        "units": spec.n_units,
        "words": spec.n_words,
        "feature_dim": spec.feature_dim,
        "seed": spec.seed,
        "out": out.display().to_string(),
        "truth": truth_path.display().to_string(),
    }))
}

fn cmd_init(
    corpus: &Path,
    out_labels: &Path,
    out_lexicon: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<ModeArg>,
) -> Result<Value> {
    let mut cfg: StageConfig = read_toml(config)?;
    cfg.validate()?;
    let corpus = load_corpus(corpus)?;
    if let Some(s) = seed {
        cfg.init.seed = s;
    }
    if let Some(m) = mode {
        cfg.init.mode = m.into();
    }
    let init = build_initial_labels(&corpus, &cfg.init)?;
    atomic_save(out_labels, |tmp| init.labels.save(tmp))?;
    atomic_save(out_lexicon, |tmp| init.initial_lexicon.save(tmp))?;
    Ok(json!({
        "subword_patterns": init.n_subword_patterns,
        "lexicon_size": init.initial_lexicon.len(),
        "out_labels": out_labels.display().to_string(),
        "out_lexicon": out_lexicon.display().to_string(),
    }))
}

fn cmd_train(
    corpus: &Path,
    labels: &Path,
    out: &Path,
    warm: Option<&Path>,
    config: Option<&Path>,
    inventory: Option<u32>,
) -> Result<Value> {
    let cfg: StageConfig = read_toml(config)?;
    cfg.validate()?;
    let corpus = load_corpus(corpus)?;
    let labels = CorpusLabels::load(labels)?;
    let start = match warm {
        Some(p) => HMMSet::load(p)?,
        None => {
            let inventory = inventory.unwrap_or_else(|| derived_inventory(&labels));
            init_hmms_from_labels(&corpus, &labels, inventory, &cfg.train)?.0
        }
    };
    let report = train_hmms(&corpus, &labels, start, &cfg.train)?;
    atomic_save(out, |tmp| report.hmms.save(tmp))?;
    Ok(json!({
        "models": report.hmms.models.len(),
        "round_log_likelihoods": report.round_log_likelihoods,
        "skipped_utterances": report.skipped_utterances.len(),
        "out": out.display().to_string(),
    }))
}

fn cmd_decode(
    corpus: &Path,
    hmms: &Path,
    lexicon: &Path,
    lm: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
) -> Result<Value> {
    let mut cfg: StageConfig = read_toml(config)?;
    cfg.validate()?;
    let corpus = load_corpus(corpus)?;
    let hmms = HMMSet::load(hmms)?;
    let lexicon = Lexicon::load(lexicon)?;
    let lm = lm.map(NGramLM::load).transpose()?;
    cfg.decode.use_lm = lm.is_some();
    let report = decode_corpus(&corpus, &hmms, &lexicon, lm.as_ref(), &cfg.decode)?;
    atomic_save(out, |tmp| report.labels.save(tmp))?;
    Ok(json!({
        "decoded": report.labels.utterances.len(),
        "failed": report.failures.len(),
        "failures": report
            .failures
            .iter()
            .map(|(id, why)| json!({ "utterance": id, "reason": why }))
            .collect::<Vec<_>>(),
        "total_log_score": report.total_log_score,
        "out": out.display().to_string(),
    }))
}

fn cmd_lexicon(
    labels_path: &Path,
    out: &Path,
    out_labels: Option<&Path>,
    min_count: u64,
    inventory: Option<u32>,
) -> Result<Value> {
    let mut labels = CorpusLabels::load(labels_path)?;
    let inventory = inventory.unwrap_or_else(|| derived_inventory(&labels));
    let lexicon = harvest_lexicon(&mut labels, min_count, inventory)?;
    atomic_save(out, |tmp| lexicon.save(tmp))?;
    if let Some(p) = out_labels {
        atomic_save(p, |tmp| labels.save(tmp))?;
    }
    Ok(json!({
        "entries": lexicon.len(),
        "subword_inventory": lexicon.subword_inventory_size(),
        "out": out.display().to_string(),
    }))
}

fn cmd_lm(labels: &Path, out: &Path, order: usize) -> Result<Value> {
    let labels = CorpusLabels::load(labels)?;
    let lm = estimate_ngram(&labels, order)?;
    atomic_save(out, |tmp| lm.save(tmp))?;
    Ok(json!({
        "order": order,
        "vocab": lm.vocab().len(),
        "out": out.display().to_string(),
    }))
}

fn cmd_mine(
    labels: &Path,
    out: &Path,
    min_count: u64,
    min_entropy: f64,
    min_len: usize,
    max_len: usize,
) -> Result<Value> {
    let labels = CorpusLabels::load(labels)?;
    let streams: Vec<Vec<u32>> = labels
        .utterances
        .iter()
        .map(|u| u.subword_stream())
        .collect();
    let tree = build_pat_tree(&streams);
    let cands = mine_candidates(&tree, min_count, min_entropy, min_len, max_len)?;
    write_json(out, &cands)?;
    Ok(json!({
        "candidates": cands.len(),
        "tree_nodes": tree.n_nodes(),
        "out": out.display().to_string(),
    }))
}

fn cmd_run(features: &Path, workdir: &Path, config: Option<&Path>, seed: u64) -> Result<Value> {
    let cfg: StageConfig = read_toml(config)?;
    cfg.validate()?;
    let corpus = load_corpus(features)?;
    let state = run_full(&corpus, &cfg, seed, Some(workdir))?;
    let last = state.ledger.last();
    Ok(json!({
        "iterations": state.ledger.len(),
        "subword_patterns": state.subword_inventory,
        "lexicon_size": state.lexicon.len(),
        "word_consistency": last.map(|r| r.word_consistency).unwrap_or(f64::NAN),
        "utterance_consistency": last.map(|r| r.utt_consistency).unwrap_or(f64::NAN),
        "workdir": workdir.display().to_string(),
    }))
}

fn cmd_eval(labels: &Path, truth: &Path, out: Option<&Path>) -> Result<Value> {
    let labels = CorpusLabels::load(labels)?;
    let truth = GroundTruth::load(truth)?;
    let mapping = map_patterns(&labels, &truth)?;
    let acc = pattern_accuracy(&labels, &truth, &mapping)?;
    let report = json!({
        "frame_purity": acc.frame_purity,
        "unit_accuracy": acc.unit_accuracy,
        "discovered_patterns": mapping.assignment().len(),
        "true_units": truth.models.models.len(),
    });
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(report)
}

/// Subword ids of the labelled span overlapping `[start, end)` in frames.
fn span_subwords(labels: &CorpusLabels, utt: &str, start: u32, end: u32) -> Vec<u32> {
    labels
        .utterances
        .iter()
        .find(|u| u.utterance_id == utt)
        .map(|u| {
            u.subword_spans()
                .into_iter()
                .filter(|&(_, s, e)| s < end && e > start)
                .map(|(id, _, _)| id)
                .collect()
        })
        .unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
fn cmd_std(
    hmms: &Path,
    labels: &Path,
    queries: &Path,
    out: &Path,
    save_table: Option<&Path>,
    fuse_with: Option<&Path>,
    lambda: f64,
    relevance: Option<&Path>,
    report_out: Option<&Path>,
) -> Result<Value> {
    let hmms = HMMSet::load(hmms)?;
    let labels = CorpusLabels::load(labels)?;
    let mut queries: Vec<Query> = read_json(queries)?;

    let table = build_distance_table(&hmms)?;
    if let Some(p) = save_table {
        atomic_save(p, |tmp| table.save(tmp))?;
    }

    for q in &mut queries {
        if q.model_sequence.is_empty() {
            let occurrences: Vec<Vec<u32>> = q
                .examples
                .iter()
                .map(|ex| span_subwords(&labels, &ex.utterance_id, ex.start_frame, ex.end_frame))
                .collect();
            q.model_sequence =
                select_query_model(&occurrences).map_err(|_| Error::InvalidConfig {
                    reason: format!(
                        "query {} has no usable example occurrences in the labels",
                        q.term_id
                    ),
                })?;
        }
    }

    let ranked = search_all(&queries, &labels, &table)?;
    let final_lists: Vec<RankedList> = match fuse_with {
        Some(p) => {
            let other: Vec<RankedList> = read_json(p)?;
            fuse_and_rank(&other, &ranked, lambda)?
        }
        None => ranked,
    };
    write_json(out, &final_lists)?;

    let mut report = json!({
        "queries": final_lists.len(),
        "out": out.display().to_string(),
    });
    if let Some(p) = relevance {
        let rel = Relevance::load(p)?;
        let scores = evaluate(&final_lists, &rel)?;
        // The file variant omits paths so identical inputs give identical bytes.
        let score_json = json!({
            "mean_average_precision": scores.mean_average_precision,
            "precision_at_5": scores.precision_at_5,
            "precision_at_10": scores.precision_at_10,
            "evaluated_queries": scores.evaluated_queries,
            "skipped_queries": scores.skipped_queries,
        });
        if let Some(rp) = report_out {
            write_json(rp, &score_json)?;
        }
        let obj = report.as_object_mut().expect("report is an object");
        for (k, v) in score_json.as_object().expect("scores are an object") {
            obj.insert(k.clone(), v.clone());
        }
    }
    Ok(report)
}
