//! Lexicon-constrained free-word Viterbi decoding of utterances, with
//! optional N-gram scoring applied at word boundaries.
//!
//! Each lexicon entry is a left-to-right chain of its subword HMMs. Decoding
//! is token-passing over the flat lexicon graph: hypotheses advance through
//! word chains frame by frame, and a word exit at frame `t` may enter any
//! word at frame `t + 1`, paying the (scaled) language-model transition and a
//! per-word insertion penalty. With `beam = 0` the search is exhaustive and
//! the result is the exact constrained argmax.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureCorpus, FeatureSequence};
use crate::error::{Error, Result};
use crate::hmm::align::{force_align_range, Alignment, AlignmentEntry};
use crate::hmm::HMMSet;
use crate::labels::{CorpusLabels, Token, UtteranceLabels};
use crate::lexicon::Lexicon;
use crate::ngram::{NGramLM, END, START};

/// Decoding configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Multiplier on language-model log probabilities.
    pub lm_scale: f64,
    /// Log-domain penalty added once per emitted word token.
    pub word_insertion_penalty: f64,
    /// Per-frame log-probability band; hypotheses more than `beam` below the
    /// frame's best are dropped. `0` disables pruning (exact search).
    pub beam: f64,
    /// Apply the language model and insertion penalty. When off the score is
    /// the pure acoustic log-likelihood.
    pub use_lm: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            lm_scale: 5.0,
            word_insertion_penalty: -2.0,
            beam: 200.0,
            use_lm: false,
        }
    }
}

/// Result of decoding one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    /// Word tokens tiling the utterance.
    pub tokens: UtteranceLabels,
    /// Viterbi score: acoustic log-likelihood plus, when the LM is in use,
    /// scaled LM log probability and per-word insertion penalties.
    pub total_log_score: f64,
    /// Per-frame state alignment of the decoded token sequence.
    pub alignment: Alignment,
}

/// Result of decoding a whole corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeReport {
    /// Labels for every utterance that decoded successfully, input order.
    pub labels: CorpusLabels,
    /// Sum of per-utterance scores over `labels`.
    pub total_log_score: f64,
    /// `(utterance_id, reason)` for utterances that failed to decode.
    pub failures: Vec<(String, String)>,
}

/// One state of a word chain, with its emission-cache slot.
struct ChainState {
    emis_idx: usize,
    log_self: f64,
    log_next: f64,
}

/// A lexicon entry compiled to a concatenated state chain.
struct WordNode<'a> {
    id: u32,
    subwords: &'a [u32],
    chain: Vec<ChainState>,
    /// Offset of this word's first cell in the flat DP row.
    first: usize,
}

/// The compiled lexicon graph, shared read-only across utterances.
struct LexGraph<'a> {
    words: Vec<WordNode<'a>>,
    n_cells: usize,
    /// Emission-cache base slot for each subword model.
    emis_bases: std::collections::BTreeMap<u32, usize>,
    n_emis: usize,
    min_chain: usize,
}

fn build_graph<'a>(hmms: &'a HMMSet, lex: &'a Lexicon) -> Result<LexGraph<'a>> {
    if lex.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "cannot decode with an empty lexicon".into(),
        });
    }
    let mut emis_bases = std::collections::BTreeMap::new();
    let mut n_emis = 0usize;
    for (&id, model) in &hmms.models {
        emis_bases.insert(id, n_emis);
        n_emis += model.n_states();
    }
    let mut words = Vec::with_capacity(lex.len());
    let mut n_cells = 0usize;
    for entry in lex.iter() {
        let mut chain = Vec::new();
        for &sid in &entry.subwords {
            let model = hmms.get(sid)?;
            let base = emis_bases[&sid];
            for s in 0..model.n_states() {
                chain.push(ChainState {
                    emis_idx: base + s,
                    log_self: model.log_self[s],
                    log_next: model.log_next[s],
                });
            }
        }
        let first = n_cells;
        n_cells += chain.len();
        words.push(WordNode {
            id: entry.id,
            subwords: &entry.subwords,
            chain,
            first,
        });
    }
    let min_chain = words.iter().map(|w| w.chain.len()).min().unwrap_or(0);
    Ok(LexGraph {
        words,
        n_cells,
        emis_bases,
        n_emis,
        min_chain,
    })
}

const NO_REC: u32 = u32::MAX;

/// One DP cell: best score reaching this chain state at the current frame,
/// plus the record of the word hypothesis it belongs to.
#[derive(Debug, Clone, Copy)]
struct Cell {
    score: f64,
    rec: u32,
}

impl Default for Cell {
    fn default() -> Self {
        Cell {
            score: f64::NEG_INFINITY,
            rec: NO_REC,
        }
    }
}

/// Traceback record: one per word entry, grow-only.
#[derive(Debug, Clone, Copy)]
struct Record {
    /// Index into `LexGraph::words`.
    word: u32,
    start: u32,
    prev: u32,
    n_tokens: u32,
}

/// Score ties prefer fewer word tokens, then the lower word-pattern id, then
/// the incumbent (first candidate in the fixed transition order).
fn beats(score: f64, n_tokens: u32, word_id: u32, cur: &Cell, arena: &[Record], words: &[WordNode]) -> bool {
    if cur.rec == NO_REC {
        return score > f64::NEG_INFINITY;
    }
    if score != cur.score {
        return score > cur.score;
    }
    let cr = &arena[cur.rec as usize];
    if n_tokens != cr.n_tokens {
        return n_tokens < cr.n_tokens;
    }
    word_id < words[cr.word as usize].id
}

fn validate_config(cfg: &DecodeConfig, lm: Option<&NGramLM>) -> Result<()> {
    if !(cfg.beam >= 0.0) || !(cfg.lm_scale >= 0.0) || !cfg.word_insertion_penalty.is_finite() {
        return Err(Error::InvalidConfig {
            reason: format!(
                "decode config requires beam >= 0, lm_scale >= 0 and a finite penalty \
                 (got beam {}, lm_scale {}, penalty {})",
                cfg.beam, cfg.lm_scale, cfg.word_insertion_penalty
            ),
        });
    }
    if cfg.use_lm && lm.is_none() {
        return Err(Error::InvalidConfig {
            reason: "use_lm is set but no language model was supplied".into(),
        });
    }
    Ok(())
}

fn prune(cells: &mut [Cell], beam: f64) {
    if beam <= 0.0 {
        return;
    }
    let best = cells
        .iter()
        .map(|c| c.score)
        .fold(f64::NEG_INFINITY, f64::max);
    if best == f64::NEG_INFINITY {
        return;
    }
    let floor = best - beam;
    for c in cells.iter_mut() {
        if c.score < floor {
            *c = Cell::default();
        }
    }
}

fn decode_with_graph(
    f: &FeatureSequence,
    hmms: &HMMSet,
    lm: Option<&NGramLM>,
    cfg: &DecodeConfig,
    graph: &LexGraph,
) -> Result<DecodeResult> {
    let n_frames = f.n_frames();
    if n_frames < graph.min_chain || graph.min_chain == 0 {
        return Err(Error::NoDecodePath {
            utterance_id: f.utterance_id.clone(),
            frames: n_frames,
        });
    }

    let lm_in_use: Option<&NGramLM> = if cfg.use_lm { lm } else { None };
    let entry_bonus = |prev: u32, word_id: u32| -> f64 {
        match lm_in_use {
            Some(m) => cfg.lm_scale * m.log_cond(prev, word_id) + cfg.word_insertion_penalty,
            None => 0.0,
        }
    };
    let end_bonus = |prev: u32| -> f64 {
        match lm_in_use {
            Some(m) => cfg.lm_scale * m.log_cond(prev, END),
            None => 0.0,
        }
    };

    let mut emis = vec![0.0f64; graph.n_emis];
    let fill_emissions = |emis: &mut [f64], t: usize| {
        let x = f.frame(t);
        for (&sid, model) in &hmms.models {
            let base = graph.emis_bases[&sid];
            for (s, state) in model.states.iter().enumerate() {
                emis[base + s] = state.log_pdf(x);
            }
        }
    };

    let mut arena: Vec<Record> = Vec::new();
    let mut prev_row = vec![Cell::default(); graph.n_cells];
    let mut cur_row = vec![Cell::default(); graph.n_cells];

    fill_emissions(&mut emis, 0);
    for (wi, w) in graph.words.iter().enumerate() {
        let score = entry_bonus(START, w.id) + emis[w.chain[0].emis_idx];
        arena.push(Record {
            word: wi as u32,
            start: 0,
            prev: NO_REC,
            n_tokens: 1,
        });
        prev_row[w.first] = Cell {
            score,
            rec: (arena.len() - 1) as u32,
        };
    }
    prune(&mut prev_row, cfg.beam);

    for t in 1..n_frames {
        fill_emissions(&mut emis, t);
        for c in cur_row.iter_mut() {
            *c = Cell::default();
        }

        // Word-end scores at frame t-1: last chain state plus its exit arc.
        let ends: Vec<Cell> = graph
            .words
            .iter()
            .map(|w| {
                let c = prev_row[w.first + w.chain.len() - 1];
                if c.rec == NO_REC {
                    c
                } else {
                    Cell {
                        score: c.score + w.chain.last().unwrap().log_next,
                        rec: c.rec,
                    }
                }
            })
            .collect();

        for (wi, w) in graph.words.iter().enumerate() {
            // Within-word transitions: stay first, then advance, so a full
            // tie keeps the stay (matching forced alignment).
            for s in 0..w.chain.len() {
                let e = emis[w.chain[s].emis_idx];
                let idx = w.first + s;
                let stay = prev_row[idx];
                if stay.rec != NO_REC {
                    let cand = stay.score + w.chain[s].log_self + e;
                    let r = &arena[stay.rec as usize];
                    if beats(cand, r.n_tokens, w.id, &cur_row[idx], &arena, &graph.words) {
                        cur_row[idx] = Cell {
                            score: cand,
                            rec: stay.rec,
                        };
                    }
                }
                if s > 0 {
                    let adv = prev_row[idx - 1];
                    if adv.rec != NO_REC {
                        let cand = adv.score + w.chain[s - 1].log_next + e;
                        let r = &arena[adv.rec as usize];
                        if beats(cand, r.n_tokens, w.id, &cur_row[idx], &arena, &graph.words) {
                            cur_row[idx] = Cell {
                                score: cand,
                                rec: adv.rec,
                            };
                        }
                    }
                }
            }

            // Word entry: best predecessor word end, ties toward fewer
            // tokens then the lower predecessor id (ascending scan).
            let mut best_pred_score = f64::NEG_INFINITY;
            let mut best_pred_rec = NO_REC;
            for (pw, end_cell) in graph.words.iter().zip(ends.iter()) {
                if end_cell.rec == NO_REC {
                    continue;
                }
                let cand = end_cell.score + entry_bonus(pw.id, w.id);
                let take = if best_pred_rec == NO_REC {
                    cand > f64::NEG_INFINITY
                } else if cand != best_pred_score {
                    cand > best_pred_score
                } else {
                    arena[end_cell.rec as usize].n_tokens < arena[best_pred_rec as usize].n_tokens
                };
                if take {
                    best_pred_score = cand;
                    best_pred_rec = end_cell.rec;
                }
            }
            if best_pred_rec != NO_REC {
                let cand = best_pred_score + emis[w.chain[0].emis_idx];
                let n_tokens = arena[best_pred_rec as usize].n_tokens + 1;
                let idx = w.first;
                if beats(cand, n_tokens, w.id, &cur_row[idx], &arena, &graph.words) {
                    arena.push(Record {
                        word: wi as u32,
                        start: t as u32,
                        prev: best_pred_rec,
                        n_tokens,
                    });
                    cur_row[idx] = Cell {
                        score: cand,
                        rec: (arena.len() - 1) as u32,
                    };
                }
            }
        }

        prune(&mut cur_row, cfg.beam);
        std::mem::swap(&mut prev_row, &mut cur_row);
    }

    // Final selection over word ends at the last frame.
    let mut best: Option<(f64, u32, u32, u32)> = None; // (score, n_tokens, word_id, rec)
    for w in graph.words.iter() {
        let c = prev_row[w.first + w.chain.len() - 1];
        if c.rec == NO_REC {
            continue;
        }
        let score = c.score + w.chain.last().unwrap().log_next + end_bonus(w.id);
        let n_tokens = arena[c.rec as usize].n_tokens;
        let replace = match best {
            None => true,
            Some((bs, bt, bw, _)) => {
                if score != bs {
                    score > bs
                } else if n_tokens != bt {
                    n_tokens < bt
                } else {
                    w.id < bw
                }
            }
        };
        if replace {
            best = Some((score, n_tokens, w.id, c.rec));
        }
    }
    let Some((total_log_score, _, _, final_rec)) = best else {
        return Err(Error::NoDecodePath {
            utterance_id: f.utterance_id.clone(),
            frames: n_frames,
        });
    };

    // Traceback the record chain, then re-align each token span to recover
    // state-level timing (the span-local optimum equals the global one).
    let mut rec_ids = Vec::new();
    let mut r = final_rec;
    while r != NO_REC {
        rec_ids.push(r);
        r = arena[r as usize].prev;
    }
    rec_ids.reverse();

    let mut tokens = Vec::with_capacity(rec_ids.len());
    let mut entries: Vec<AlignmentEntry> = Vec::with_capacity(n_frames);
    for (ti, &ri) in rec_ids.iter().enumerate() {
        let rec = &arena[ri as usize];
        let w = &graph.words[rec.word as usize];
        let start = rec.start as usize;
        let end = if ti + 1 < rec_ids.len() {
            arena[rec_ids[ti + 1] as usize].start as usize
        } else {
            n_frames
        };
        let patterns: Vec<&[u32]> = w.subwords.iter().map(std::slice::from_ref).collect();
        let (span_align, _) = force_align_range(f, start, end, &patterns, hmms)?;
        let mut spans: Vec<(u32, u32)> = Vec::with_capacity(w.subwords.len());
        let mut span_tok = 0u32;
        let mut span_start = start;
        for (off, e) in span_align.entries.iter().enumerate() {
            if e.token_idx != span_tok {
                spans.push((span_start as u32, (start + off) as u32));
                span_tok = e.token_idx;
                span_start = start + off;
            }
            entries.push(AlignmentEntry {
                token_idx: ti as u32,
                subword_id: e.subword_id,
                state_idx: e.state_idx,
            });
        }
        spans.push((span_start as u32, end as u32));
        tokens.push(Token {
            word_pattern_id: w.id,
            subword_ids: w.subwords.to_vec(),
            start_frame: start as u32,
            end_frame: end as u32,
            subword_spans: spans,
        });
    }

    Ok(DecodeResult {
        tokens: UtteranceLabels {
            utterance_id: f.utterance_id.clone(),
            tokens,
        },
        total_log_score,
        alignment: Alignment { entries },
    })
}

/// Decodes one utterance into the best-scoring word-token sequence.
pub fn decode_utterance(
    f: &FeatureSequence,
    hmms: &HMMSet,
    lex: &Lexicon,
    lm: Option<&NGramLM>,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    validate_config(cfg, lm)?;
    let graph = build_graph(hmms, lex)?;
    decode_with_graph(f, hmms, lm, cfg, &graph)
}

/// Decodes every utterance, in parallel, gathering results in input order.
/// Per-utterance failures are collected in the report rather than aborting
/// the run; configuration and lexicon errors are fatal.
pub fn decode_corpus(
    corpus: &FeatureCorpus,
    hmms: &HMMSet,
    lex: &Lexicon,
    lm: Option<&NGramLM>,
    cfg: &DecodeConfig,
) -> Result<DecodeReport> {
    validate_config(cfg, lm)?;
    let graph = build_graph(hmms, lex)?;
    let results: Vec<Result<DecodeResult>> = corpus
        .utterances
        .par_iter()
        .map(|f| decode_with_graph(f, hmms, lm, cfg, &graph))
        .collect();

    let mut labels = CorpusLabels::default();
    let mut total_log_score = 0.0;
    let mut failures = Vec::new();
    for (f, res) in corpus.utterances.iter().zip(results) {
        match res {
            Ok(dr) => {
                total_log_score += dr.total_log_score;
                labels.utterances.push(dr.tokens);
            }
            Err(e) => failures.push((f.utterance_id.clone(), e.to_string())),
        }
    }
    Ok(DecodeReport {
        labels,
        total_log_score,
        failures,
    })
}
