//! Flat-start initialization and Viterbi-style EM re-estimation of the
//! subword HMM set from labeled (or self-labeled) corpora.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::align::force_align;
use super::{transition_logs, GaussianState, HMMSet, SubwordHMM};
use crate::corpus::FeatureCorpus;
use crate::error::{Error, Result};
use crate::labels::CorpusLabels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub states: usize,
    pub em_iters: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            states: 13,
            em_iters: 5,
            var_floor_scale: 1e-3,
        }
    }
}

/// Outcome of a training run: the models, the total aligned log-likelihood
/// after each EM round, and utterances that could not be aligned.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub hmms: HMMSet,
    pub round_log_likelihoods: Vec<f64>,
    pub skipped_utterances: Vec<String>,
}

/// Per-(pattern, state) sufficient statistics.
#[derive(Clone)]
struct StateAccum {
    count: f64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    self_count: f64,
    next_count: f64,
}

impl StateAccum {
    fn new(dim: usize) -> Self {
        StateAccum {
            count: 0.0,
            sum: vec![0.0; dim],
            sumsq: vec![0.0; dim],
            self_count: 0.0,
            next_count: 0.0,
        }
    }

    fn add_frame(&mut self, x: &[f32]) {
        self.count += 1.0;
        for (d, &v) in x.iter().enumerate() {
            let v = v as f64;
            self.sum[d] += v;
            self.sumsq[d] += v * v;
        }
    }

}

/// Global per-dimension mean/variance over every frame in the corpus; the
/// variance is floored away from zero so derived floors stay positive.
fn global_stats(corpus: &FeatureCorpus) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = corpus.dim().ok_or(Error::InvalidConfig {
        reason: "cannot train on an empty corpus".to_string(),
    })?;
    let mut sum = vec![0.0f64; dim];
    let mut sumsq = vec![0.0f64; dim];
    let mut n = 0.0f64;
    for u in &corpus.utterances {
        for f in u.frames() {
            n += 1.0;
            for (d, &v) in f.iter().enumerate() {
                let v = v as f64;
                sum[d] += v;
                sumsq[d] += v * v;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var: Vec<f64> = sumsq
        .iter()
        .zip(mean.iter())
        .map(|(sq, m)| (sq / n - m * m).max(1e-8))
        .collect();
    Ok((mean, var))
}

fn finish_state(acc: &StateAccum, floor: &[f64]) -> GaussianState {
    let dim = acc.sum.len();
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for d in 0..dim {
        mean[d] = acc.sum[d] / acc.count;
        var[d] = (acc.sumsq[d] / acc.count - mean[d] * mean[d]).max(floor[d]);
    }
    GaussianState::new(mean, var)
}

/// Flat-start: every subword segment is split uniformly across the states,
/// state Gaussians are pooled over all segments of the pattern, and the
/// stay probability comes from the pattern's average frames-per-state.
/// Patterns in 0..inventory with no occurrences at all are initialized from
/// the global statistics and returned in the flagged list.
pub fn init_hmms_from_labels(
    corpus: &FeatureCorpus,
    labels: &CorpusLabels,
    inventory: u32,
    cfg: &TrainConfig,
) -> Result<(HMMSet, Vec<u32>)> {
    let (gmean, gvar) = global_stats(corpus)?;
    let dim = gmean.len();
    let floor: Vec<f64> = gvar.iter().map(|v| cfg.var_floor_scale * v).collect();
    let s_count = cfg.states;

    let mut accums: BTreeMap<u32, Vec<StateAccum>> = BTreeMap::new();
    let mut durations: BTreeMap<u32, (u64, u64)> = BTreeMap::new(); // (frames, segments)
    let by_id: BTreeMap<&str, &crate::corpus::FeatureSequence> = corpus
        .utterances
        .iter()
        .map(|u| (u.utterance_id.as_str(), u))
        .collect();
    for u in &labels.utterances {
        let f = by_id
            .get(u.utterance_id.as_str())
            .ok_or_else(|| Error::UtteranceSetMismatch {
                reason: format!("labels reference unknown utterance {}", u.utterance_id),
            })?;
        for (sid, a, b) in u.subword_spans() {
            if sid >= inventory {
                return Err(Error::UnknownSubword {
                    id: sid,
                    inventory,
                });
            }
            let len = (b - a) as usize;
            let acc = accums
                .entry(sid)
                .or_insert_with(|| vec![StateAccum::new(dim); s_count]);
            for j in 0..s_count {
                let from = a as usize + j * len / s_count;
                let to = a as usize + (j + 1) * len / s_count;
                for t in from..to {
                    acc[j].add_frame(f.frame(t));
                }
            }
            let d = durations.entry(sid).or_insert((0, 0));
            d.0 += len as u64;
            d.1 += 1;
        }
    }

    let mut models = BTreeMap::new();
    let mut flagged = Vec::new();
    for id in 0..inventory {
        let model = match accums.get(&id) {
            Some(acc) => {
                let states: Vec<GaussianState> = acc
                    .iter()
                    .map(|a| {
                        if a.count > 0.0 {
                            finish_state(a, &floor)
                        } else {
                            // A segment shorter than the state count leaves
                            // trailing states empty; fall back to global stats.
                            GaussianState::new(gmean.clone(), gvar.clone())
                        }
                    })
                    .collect();
                let (frames, segs) = durations[&id];
                let avg_state_dur = frames as f64 / (segs as f64 * s_count as f64);
                let (ls, ln) = transition_logs(1.0 - 1.0 / avg_state_dur.max(1.0));
                SubwordHMM {
                    id,
                    states,
                    log_self: vec![ls; s_count],
                    log_next: vec![ln; s_count],
                }
            }
            None => {
                flagged.push(id);
                let (ls, ln) = transition_logs(0.5);
                SubwordHMM {
                    id,
                    states: (0..s_count)
                        .map(|_| GaussianState::new(gmean.clone(), gvar.clone()))
                        .collect(),
                    log_self: vec![ls; s_count],
                    log_next: vec![ln; s_count],
                }
            }
        };
        models.insert(id, model);
    }
    Ok((HMMSet {
        models,
        feature_dim: dim,
    }, flagged))
}

/// Viterbi-style EM: align every utterance to its label sequence, pool
/// state statistics, re-estimate. States that captured no frames keep
/// their previous parameters. Infeasible utterances are skipped and
/// reported once.
pub fn train_hmms(
    corpus: &FeatureCorpus,
    labels: &CorpusLabels,
    hmms: HMMSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let (_, gvar) = global_stats(corpus)?;
    let dim = gvar.len();
    let floor: Vec<f64> = gvar.iter().map(|v| cfg.var_floor_scale * v).collect();
    let by_id: BTreeMap<&str, &crate::corpus::FeatureSequence> = corpus
        .utterances
        .iter()
        .map(|u| (u.utterance_id.as_str(), u))
        .collect();
    for u in &labels.utterances {
        if !by_id.contains_key(u.utterance_id.as_str()) {
            return Err(Error::UtteranceSetMismatch {
                reason: format!("labels reference unknown utterance {}", u.utterance_id),
            });
        }
    }

    let mut current = hmms;
    let mut round_lls = Vec::with_capacity(cfg.em_iters);
    let mut skipped: Vec<String> = Vec::new();

    for round in 0..cfg.em_iters {
        // E-step: per-utterance alignments in parallel, merged in fixed order.
        let results: Vec<_> = labels
            .utterances
            .par_iter()
            .map(|u| {
                let f = by_id[u.utterance_id.as_str()];
                let patterns: Vec<&[u32]> =
                    u.tokens.iter().map(|t| t.subword_ids.as_slice()).collect();
                (u, force_align(f, &patterns, &current))
            })
            .collect();

        let mut accums: BTreeMap<u32, Vec<StateAccum>> = BTreeMap::new();
        let mut total_ll = 0.0;
        for (u, res) in results {
            let f = by_id[u.utterance_id.as_str()];
            match res {
                Ok((alignment, ll)) => {
                    total_ll += ll;
                    let entries = &alignment.entries;
                    for (t, e) in entries.iter().enumerate() {
                        let acc = accums
                            .entry(e.subword_id)
                            .or_insert_with(|| vec![StateAccum::new(dim); cfg.states]);
                        let slot = &mut acc[e.state_idx as usize];
                        slot.add_frame(f.frame(t));
                        if t + 1 < entries.len() {
                            let n = &entries[t + 1];
                            let same_pos = n.token_idx == e.token_idx
                                && n.subword_id == e.subword_id
                                && n.state_idx == e.state_idx;
                            if same_pos {
                                slot.self_count += 1.0;
                            } else {
                                slot.next_count += 1.0;
                            }
                        } else {
                            // Final exit arc, consistent with the score.
                            slot.next_count += 1.0;
                        }
                    }
                }
                Err(Error::InfeasibleAlignment { .. }) => {
                    if round == 0 {
                        skipped.push(u.utterance_id.clone());
                    }
                }
                Err(e) => return Err(e),
            }
        }
        round_lls.push(total_ll);

        // M-step.
        let mut new_models = BTreeMap::new();
        for (id, model) in &current.models {
            let new_model = match accums.get(id) {
                Some(acc) => {
                    let states: Vec<GaussianState> = model
                        .states
                        .iter()
                        .enumerate()
                        .map(|(j, prev)| {
                            if acc[j].count > 0.0 {
                                finish_state(&acc[j], &floor)
                            } else {
                                prev.clone()
                            }
                        })
                        .collect();
                    let mut log_self = model.log_self.clone();
                    let mut log_next = model.log_next.clone();
                    for j in 0..cfg.states {
                        let total = acc[j].self_count + acc[j].next_count;
                        if total > 0.0 {
                            let (ls, ln) = transition_logs(acc[j].self_count / total);
                            log_self[j] = ls;
                            log_next[j] = ln;
                        }
                    }
                    SubwordHMM {
                        id: *id,
                        states,
                        log_self,
                        log_next,
                    }
                }
                None => model.clone(),
            };
            new_models.insert(*id, new_model);
        }
        current = HMMSet {
            models: new_models,
            feature_dim: dim,
        };

        let _ = round;
    }

    Ok(TrainReport {
        hmms: current,
        round_log_likelihoods: round_lls,
        skipped_utterances: skipped,
    })
}
