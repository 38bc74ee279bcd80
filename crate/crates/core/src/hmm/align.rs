//! Viterbi forced alignment of an utterance against a fixed sequence of
//! word tokens (each a sequence of subword HMMs).

use super::HMMSet;
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};

/// Per-frame alignment entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentEntry {
    pub token_idx: u32,
    pub subword_id: u32,
    pub state_idx: u32,
}

/// One entry per frame; state indices never decrease within a subword span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub entries: Vec<AlignmentEntry>,
}

/// A flattened position in the concatenated state chain.
#[derive(Debug, Clone, Copy)]
struct ChainPos {
    token_idx: u32,
    subword_id: u32,
    state_idx: u32,
    log_self: f64,
    log_next: f64,
}

fn build_chain(token_patterns: &[&[u32]], hmms: &HMMSet) -> Result<Vec<ChainPos>> {
    let mut chain = Vec::new();
    for (ti, pattern) in token_patterns.iter().enumerate() {
        for &sid in pattern.iter() {
            let model = hmms.get(sid)?;
            for s in 0..model.n_states() {
                chain.push(ChainPos {
                    token_idx: ti as u32,
                    subword_id: sid,
                    state_idx: s as u32,
                    log_self: model.log_self[s],
                    log_next: model.log_next[s],
                });
            }
        }
    }
    Ok(chain)
}

/// Best monotone path of the frames through the concatenated left-to-right
/// chain. Every chain state must absorb at least one frame; the final exit
/// arc (log_next of the last state) is included in the returned score.
/// Score ties prefer staying in a state over advancing.
pub fn force_align(
    f: &FeatureSequence,
    token_patterns: &[&[u32]],
    hmms: &HMMSet,
) -> Result<(Alignment, f64)> {
    force_align_range(f, 0, f.n_frames(), token_patterns, hmms)
}

/// Same as [`force_align`] but restricted to the frame window `[start, end)`.
/// Alignment entries are indexed relative to the window (entry 0 aligns frame
/// `start`).
pub(crate) fn force_align_range(
    f: &FeatureSequence,
    start: usize,
    end: usize,
    token_patterns: &[&[u32]],
    hmms: &HMMSet,
) -> Result<(Alignment, f64)> {
    let chain = build_chain(token_patterns, hmms)?;
    let n_frames = end - start;
    let n_states = chain.len();
    if n_states == 0 || n_states > n_frames {
        return Err(Error::InfeasibleAlignment {
            utterance_id: f.utterance_id.clone(),
            chain_len: n_states,
            frames: n_frames,
        });
    }

    let emit = |s: usize, t: usize| -> f64 {
        let pos = &chain[s];
        hmms.models[&pos.subword_id].states[pos.state_idx as usize].log_pdf(f.frame(start + t))
    };

    let mut dp = vec![f64::NEG_INFINITY; n_frames * n_states];
    let mut from_prev = vec![false; n_frames * n_states];
    // Band limits: state s reachable at frame t iff s <= t and
    // (n_states - 1 - s) <= (n_frames - 1 - t).
    let lo = |t: usize| n_states.saturating_sub(n_frames - t);
    let hi = |t: usize| t.min(n_states - 1);

    dp[0] = emit(0, 0);
    for t in 1..n_frames {
        for s in lo(t)..=hi(t) {
            let idx = t * n_states + s;
            let stay = if s >= lo(t - 1) && s <= hi(t - 1) {
                dp[(t - 1) * n_states + s] + chain[s].log_self
            } else {
                f64::NEG_INFINITY
            };
            let advance = if s >= 1 && s - 1 >= lo(t - 1) && s - 1 <= hi(t - 1) {
                dp[(t - 1) * n_states + (s - 1)] + chain[s - 1].log_next
            } else {
                f64::NEG_INFINITY
            };
            if advance > stay {
                dp[idx] = advance + emit(s, t);
                from_prev[idx] = true;
            } else {
                dp[idx] = stay + emit(s, t);
            }
        }
    }

    let last = (n_frames - 1) * n_states + (n_states - 1);
    let score = dp[last] + chain[n_states - 1].log_next;

    let mut entries = vec![
        AlignmentEntry {
            token_idx: 0,
            subword_id: 0,
            state_idx: 0,
        };
        n_frames
    ];
    let mut s = n_states - 1;
    for t in (0..n_frames).rev() {
        let pos = &chain[s];
        entries[t] = AlignmentEntry {
            token_idx: pos.token_idx,
            subword_id: pos.subword_id,
            state_idx: pos.state_idx,
        };
        if t > 0 && from_prev[t * n_states + s] {
            s -= 1;
        }
    }
    Ok((Alignment { entries }, score))
}
