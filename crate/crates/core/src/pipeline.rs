//! Orchestration of the initialization step and the three cascaded
//! refinement stages: (I) acoustic model re-estimation, (II) the same loop
//! with an N-gram language model in the decoder, (III) lexical
//! reconstruction from recurring subword strings. Tracks per-iteration
//! consistency, writes atomic checkpoints, and keeps a run ledger.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::FeatureCorpus;
use crate::decode::{decode_corpus, DecodeConfig};
use crate::error::{Error, Result};
use crate::hmm::train::{init_hmms_from_labels, train_hmms, TrainConfig};
use crate::hmm::HMMSet;
use crate::init::{build_initial_labels, InitConfig};
use crate::labels::CorpusLabels;
use crate::lexicon::{harvest_lexicon, Lexicon};
use crate::ngram::{estimate_ngram, NGramLM};
use crate::pattree::{build_pat_tree, mine_candidates};

/// Thresholds for word-candidate mining in stage III.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub min_count: u64,
    /// Minimum of the left/right branching entropies, in bits.
    pub min_entropy: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            min_count: 3,
            min_entropy: 0.3,
            min_len: 2,
            max_len: 8,
        }
    }
}

/// Full pipeline configuration: per-stage iteration caps, the early-stop
/// threshold, and the knobs of every module the stages invoke.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage_i_iters: u32,
    pub stage_ii_iters: u32,
    pub stage_iii_iters: u32,
    /// Stop a stage once utterance-level consistency reaches this value.
    pub consistency_stop: f64,
    /// Word patterns observed fewer times than this are dropped when the
    /// lexicon is harvested.
    pub min_count: u64,
    pub lm_order: usize,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub mining: MiningConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage_i_iters: 30,
            stage_ii_iters: 30,
            stage_iii_iters: 30,
            consistency_stop: 0.995,
            min_count: 2,
            lm_order: 2,
            init: InitConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            mining: MiningConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.consistency_stop) {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "consistency_stop must lie in [0,1], got {}",
                    self.consistency_stop
                ),
            });
        }
        Ok(())
    }
}

/// Which refinement stage an iteration belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
    III,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        })
    }
}

/// One ledger row per completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub iteration: u32,
    pub stage: Stage,
    pub lexicon_size: usize,
    pub subword_count: usize,
    pub word_consistency: f64,
    pub utt_consistency: f64,
}

/// Everything the pipeline carries between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub labels: CorpusLabels,
    pub hmms: HMMSet,
    pub lexicon: Lexicon,
    pub lm: Option<NGramLM>,
    pub subword_inventory: u32,
    pub ledger: Vec<LedgerRow>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    subword_inventory: u32,
    has_lm: bool,
    ledger: Vec<LedgerRow>,
}

impl PipelineState {
    /// Checks that labels, lexicon and models agree: every token's pattern
    /// exists in the lexicon with the same subwords, and every subword has
    /// a model.
    pub fn validate(&self) -> Result<()> {
        for u in &self.labels.utterances {
            for t in &u.tokens {
                let entry = self.lexicon.get(t.word_pattern_id).ok_or_else(|| {
                    Error::InvalidConfig {
                        reason: format!(
                            "utterance {}: token pattern {} missing from lexicon",
                            u.utterance_id, t.word_pattern_id
                        ),
                    }
                })?;
                if entry.subwords != t.subword_ids {
                    return Err(Error::InvalidConfig {
                        reason: format!(
                            "utterance {}: token pattern {} disagrees with lexicon entry",
                            u.utterance_id, t.word_pattern_id
                        ),
                    });
                }
                for &s in &t.subword_ids {
                    if s >= self.subword_inventory || self.hmms.get(s).is_err() {
                        return Err(Error::UnknownSubword {
                            id: s,
                            inventory: self.subword_inventory,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the state into `dir` atomically: everything goes to a
    /// sibling temp directory which is then swapped into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::InvalidConfig {
                reason: format!("bad checkpoint path {}", dir.display()),
            })?;
        let parent = dir.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let tmp = parent.join(format!("{name}.tmp"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

        self.labels.save(&tmp.join("labels.json"))?;
        self.hmms.save(&tmp.join("hmms.json"))?;
        self.lexicon.save(&tmp.join("lexicon.json"))?;
        if let Some(lm) = &self.lm {
            lm.save(&tmp.join("lm.arpa"))?;
        }
        let meta = StateMeta {
            subword_inventory: self.subword_inventory,
            has_lm: self.lm.is_some(),
            ledger: self.ledger.clone(),
        };
        let meta_path = tmp.join("state.json");
        let text = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

        if dir.exists() {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("state.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: StateMeta = serde_json::from_str(&text)?;
        Ok(PipelineState {
            labels: CorpusLabels::load(&dir.join("labels.json"))?,
            hmms: HMMSet::load(&dir.join("hmms.json"))?,
            lexicon: Lexicon::load(&dir.join("lexicon.json"))?,
            lm: if meta.has_lm {
                Some(NGramLM::load(&dir.join("lm.arpa"))?)
            } else {
                None
            },
            subword_inventory: meta.subword_inventory,
            ledger: meta.ledger,
        })
    }
}

/// Agreement between two labelings of the same corpus. Tokens count as the
/// same word when their subword sequences are identical, so the measure is
/// insensitive to how lexicon ids happen to be numbered.
///
/// Returns `(word_level, utterance_level)`: the fraction of tokens matched
/// under a per-utterance minimum-edit-distance alignment (normalized by the
/// larger token count, averaged over utterances), and the fraction of
/// utterances whose token sequences are identical.
pub fn consistency(prev: &CorpusLabels, next: &CorpusLabels) -> Result<(f64, f64)> {
    if prev.utterances.len() != next.utterances.len() {
        return Err(Error::UtteranceSetMismatch {
            reason: format!(
                "consistency over {} vs {} utterances",
                prev.utterances.len(),
                next.utterances.len()
            ),
        });
    }
    if prev.utterances.is_empty() {
        return Err(Error::EmptyLabels {
            reason: "consistency of empty label sets".to_string(),
        });
    }
    let mut word_sum = 0.0;
    let mut identical = 0usize;
    for (a, b) in prev.utterances.iter().zip(&next.utterances) {
        if a.utterance_id != b.utterance_id {
            return Err(Error::UtteranceSetMismatch {
                reason: format!(
                    "consistency pairs utterance {} with {}",
                    a.utterance_id, b.utterance_id
                ),
            });
        }
        let seqs_a: Vec<&[u32]> = a.tokens.iter().map(|t| t.subword_ids.as_slice()).collect();
        let seqs_b: Vec<&[u32]> = b.tokens.iter().map(|t| t.subword_ids.as_slice()).collect();
        let mut interner: BTreeMap<&[u32], u32> = BTreeMap::new();
        for &s in seqs_a.iter().chain(seqs_b.iter()) {
            let n = interner.len() as u32;
            interner.entry(s).or_insert(n);
        }
        let pa: Vec<u32> = seqs_a.iter().map(|s| interner[s]).collect();
        let pb: Vec<u32> = seqs_b.iter().map(|s| interner[s]).collect();
        if pa == pb {
            identical += 1;
        }
        word_sum += if pa.is_empty() && pb.is_empty() {
            1.0
        } else if pa.is_empty() || pb.is_empty() {
            0.0
        } else {
            f64::from(matched_tokens(&pa, &pb)) / pa.len().max(pb.len()) as f64
        };
    }
    let n = prev.utterances.len() as f64;
    Ok((word_sum / n, identical as f64 / n))
}

/// Number of equal aligned pairs in a minimum-edit-distance alignment,
/// maximized over all cost-optimal alignments.
fn matched_tokens(a: &[u32], b: &[u32]) -> u32 {
    #[derive(Clone, Copy)]
    struct Cell {
        edit: u32,
        matches: u32,
    }
    fn better(x: Cell, y: Cell) -> Cell {
        if x.edit < y.edit || (x.edit == y.edit && x.matches > y.matches) {
            x
        } else {
            y
        }
    }
    let n = b.len();
    let mut prev: Vec<Cell> = (0..=n as u32).map(|j| Cell { edit: j, matches: 0 }).collect();
    let mut cur = prev.clone();
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = Cell {
            edit: i as u32 + 1,
            matches: 0,
        };
        for (j, &bj) in b.iter().enumerate() {
            let diag = if ai == bj {
                Cell {
                    edit: prev[j].edit,
                    matches: prev[j].matches + 1,
                }
            } else {
                Cell {
                    edit: prev[j].edit + 1,
                    matches: prev[j].matches,
                }
            };
            let del = Cell {
                edit: prev[j + 1].edit + 1,
                matches: prev[j + 1].matches,
            };
            let ins = Cell {
                edit: cur[j].edit + 1,
                matches: cur[j].matches,
            };
            cur[j + 1] = better(diag, better(del, ins));
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n].matches
}

fn checkpoint(state: &PipelineState, dir: Option<&Path>) -> Result<()> {
    match dir {
        Some(d) => state.save(d),
        None => Ok(()),
    }
}

fn abort_on_failures(corpus: &FeatureCorpus, failures: &[(String, String)]) -> Result<()> {
    if let Some((id, _)) = failures.first() {
        let frames = corpus
            .utterances
            .iter()
            .find(|u| &u.utterance_id == id)
            .map_or(0, |u| u.n_frames());
        return Err(Error::NoDecodePath {
            utterance_id: id.clone(),
            frames,
        });
    }
    Ok(())
}

/// One acoustic (stage I) or linguistic (stage II) iteration: retrain the
/// models on the current labels, harvest the lexicon, decode (with the
/// freshly estimated LM in stage II), and measure consistency against the
/// labels the iteration started from. Returns the utterance-level
/// consistency.
fn refinement_iteration(
    corpus: &FeatureCorpus,
    state: &mut PipelineState,
    cfg: &StageConfig,
    stage: Stage,
) -> Result<f64> {
    let trained = train_hmms(corpus, &state.labels, state.hmms.clone(), &cfg.train)?;
    state.hmms = trained.hmms;

    let prev = state.labels.clone();
    state.lexicon = harvest_lexicon(&mut state.labels, cfg.min_count, state.subword_inventory)?;

    let lm = match stage {
        Stage::I => None,
        _ => Some(estimate_ngram(&state.labels, cfg.lm_order)?),
    };
    let mut dec = cfg.decode.clone();
    dec.use_lm = lm.is_some();
    let report = decode_corpus(corpus, &state.hmms, &state.lexicon, lm.as_ref(), &dec)?;
    abort_on_failures(corpus, &report.failures)?;

    let (word_c, utt_c) = consistency(&prev, &report.labels)?;
    state.labels = report.labels;
    if lm.is_some() {
        state.lm = lm;
    }
    push_ledger(state, stage, word_c, utt_c);
    state.validate()?;
    Ok(utt_c)
}

/// One lexical iteration: rebuild word candidates from recurring subword
/// strings, relabel, retrain models and LM on the reconstruction, decode,
/// and measure consistency against the iteration's starting labels.
fn lexical_iteration(
    corpus: &FeatureCorpus,
    state: &mut PipelineState,
    cfg: &StageConfig,
) -> Result<f64> {
    let prev = state.labels.clone();

    let streams: Vec<Vec<u32>> = state
        .labels
        .utterances
        .iter()
        .map(|u| u.subword_stream())
        .collect();
    let tree = build_pat_tree(&streams);
    let cands = mine_candidates(
        &tree,
        cfg.mining.min_count,
        cfg.mining.min_entropy,
        cfg.mining.min_len,
        cfg.mining.max_len,
    )?;
    let (relabeled, lexicon) =
        crate::pattree::relabel_with_candidates(&state.labels, &cands, &state.lexicon)?;
    state.labels = relabeled;
    state.lexicon = lexicon;

    let trained = train_hmms(corpus, &state.labels, state.hmms.clone(), &cfg.train)?;
    state.hmms = trained.hmms;
    let lm = estimate_ngram(&state.labels, cfg.lm_order)?;
    let mut dec = cfg.decode.clone();
    dec.use_lm = true;
    let report = decode_corpus(corpus, &state.hmms, &state.lexicon, Some(&lm), &dec)?;
    abort_on_failures(corpus, &report.failures)?;

    let (word_c, utt_c) = consistency(&prev, &report.labels)?;
    state.labels = report.labels;
    state.lm = Some(lm);
    push_ledger(state, Stage::III, word_c, utt_c);
    state.validate()?;
    Ok(utt_c)
}

fn push_ledger(state: &mut PipelineState, stage: Stage, word_c: f64, utt_c: f64) {
    let iteration = state.ledger.len() as u32 + 1;
    state.ledger.push(LedgerRow {
        iteration,
        stage,
        lexicon_size: state.lexicon.len(),
        subword_count: state.hmms.models.len(),
        word_consistency: word_c,
        utt_consistency: utt_c,
    });
}

/// Stage I: up to `stage_i_iters` acoustic iterations, stopping early once
/// utterance-level consistency reaches `consistency_stop`. The state is
/// checkpointed before every iteration.
pub fn run_stage_i(
    corpus: &FeatureCorpus,
    mut state: PipelineState,
    cfg: &StageConfig,
    ckpt: Option<&Path>,
) -> Result<PipelineState> {
    for _ in 0..cfg.stage_i_iters {
        checkpoint(&state, ckpt)?;
        let utt_c = refinement_iteration(corpus, &mut state, cfg, Stage::I)?;
        if utt_c >= cfg.consistency_stop {
            break;
        }
    }
    Ok(state)
}

/// Stage II: as stage I, but an N-gram LM is estimated each iteration and
/// used in decoding.
pub fn run_stage_ii(
    corpus: &FeatureCorpus,
    mut state: PipelineState,
    cfg: &StageConfig,
    ckpt: Option<&Path>,
) -> Result<PipelineState> {
    for _ in 0..cfg.stage_ii_iters {
        checkpoint(&state, ckpt)?;
        let utt_c = refinement_iteration(corpus, &mut state, cfg, Stage::II)?;
        if utt_c >= cfg.consistency_stop {
            break;
        }
    }
    Ok(state)
}

/// Stage III: up to `stage_iii_iters` lexical reconstructions; afterwards
/// the LM is re-estimated from the final labels.
pub fn run_stage_iii(
    corpus: &FeatureCorpus,
    mut state: PipelineState,
    cfg: &StageConfig,
    ckpt: Option<&Path>,
) -> Result<PipelineState> {
    if cfg.stage_iii_iters == 0 {
        return Ok(state);
    }
    for _ in 0..cfg.stage_iii_iters {
        checkpoint(&state, ckpt)?;
        let utt_c = lexical_iteration(corpus, &mut state, cfg)?;
        if utt_c >= cfg.consistency_stop {
            break;
        }
    }
    state.lm = Some(estimate_ngram(&state.labels, cfg.lm_order)?);
    Ok(state)
}

/// Builds the initial structure discovery from raw features: word-like
/// segmentation, subword clustering, and flat-start models.
pub fn initialize(corpus: &FeatureCorpus, cfg: &StageConfig, seed: u64) -> Result<PipelineState> {
    let mut init_cfg = cfg.init.clone();
    init_cfg.seed = seed;
    let init = build_initial_labels(corpus, &init_cfg)?;
    let inventory = init.n_subword_patterns;
    let (hmms, _flat_started) = init_hmms_from_labels(corpus, &init.labels, inventory, &cfg.train)?;
    let state = PipelineState {
        labels: init.labels,
        hmms,
        lexicon: init.initial_lexicon,
        lm: None,
        subword_inventory: inventory,
        ledger: Vec::new(),
    };
    state.validate()?;
    Ok(state)
}

/// The whole pipeline: initialization, then stages I, II and III. Fully
/// deterministic for a fixed seed. When `workdir` is given, a checkpoint is
/// kept current before every iteration (so a failed run retains the last
/// good state), and the final state plus the ledger CSV are written there.
pub fn run_full(
    corpus: &FeatureCorpus,
    cfg: &StageConfig,
    seed: u64,
    workdir: Option<&Path>,
) -> Result<PipelineState> {
    cfg.validate()?;
    let mut state = initialize(corpus, cfg, seed)?;
    let ckpt = workdir.map(|w| w.join("checkpoint"));
    state = run_stage_i(corpus, state, cfg, ckpt.as_deref())?;
    state = run_stage_ii(corpus, state, cfg, ckpt.as_deref())?;
    state = run_stage_iii(corpus, state, cfg, ckpt.as_deref())?;
    if let Some(w) = workdir {
        state.save(&w.join("final"))?;
        write_ledger_csv(&state.ledger, &w.join("ledger.csv"))?;
    }
    Ok(state)
}

/// Serializes the iteration ledger, one row per iteration (the data behind
/// the consistency-over-iterations curves).
pub fn write_ledger_csv(rows: &[LedgerRow], path: &Path) -> Result<()> {
    let mut out =
        String::from("iteration,stage,lexicon_size,subword_count,word_consistency,utt_consistency\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.stage, r.lexicon_size, r.subword_count, r.word_consistency,
            r.utt_consistency
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
