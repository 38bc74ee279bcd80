//! Evaluation of discovered patterns against synthetic ground truth:
//! pattern-to-unit co-occurrence mapping, frame purity, and unit accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::CorpusLabels;
use crate::synth::GroundTruth;

/// Co-occurrence counts between discovered subword patterns and true units,
/// under both the per-frame and the central-frame conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingMatrix {
    /// Row labels: discovered subword pattern ids, ascending.
    pub patterns: Vec<u32>,
    /// Column labels: true unit ids, ascending.
    pub units: Vec<u32>,
    /// `frame_counts[r][c]`: frames labelled pattern `r` inside unit `c`.
    pub frame_counts: Vec<Vec<u64>>,
    /// Central-frame convention: one count per discovered subword segment,
    /// attributed to the unit under the segment's central frame.
    pub central_counts: Vec<Vec<u64>>,
}

impl MappingMatrix {
    /// Most-probable true unit per discovered pattern (per-frame counts;
    /// ties resolve to the lowest unit id).
    pub fn assignment(&self) -> BTreeMap<u32, u32> {
        self.argmax_rows(&self.frame_counts)
    }

    /// Most-probable assignment under the central-frame convention.
    pub fn central_assignment(&self) -> BTreeMap<u32, u32> {
        self.argmax_rows(&self.central_counts)
    }

    fn argmax_rows(&self, counts: &[Vec<u64>]) -> BTreeMap<u32, u32> {
        self.patterns
            .iter()
            .zip(counts.iter())
            .map(|(&p, row)| {
                let mut best = (0u64, self.units[0]);
                for (&u, &c) in self.units.iter().zip(row.iter()) {
                    if c > best.0 {
                        best = (c, u);
                    }
                }
                (p, best.1)
            })
            .collect()
    }

    pub fn total_frames(&self) -> u64 {
        self.frame_counts.iter().flatten().sum()
    }
}

/// The two accuracy-style summary metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Correctly mapped frames over total frames.
    pub frame_purity: f64,
    /// 1 − (edit distance of mapped unit strings ÷ true unit count),
    /// clamped at 0.
    pub unit_accuracy: f64,
}

/// Pairs each labelled utterance with its truth, yielding the per-frame
/// pattern and unit streams.
fn paired_streams<'a>(
    labels: &'a CorpusLabels,
    truth: &'a GroundTruth,
) -> Result<Vec<(Vec<(u32, u32, u32)>, &'a crate::synth::UtteranceTruth)>> {
    if labels.len() != truth.utterances.len() {
        return Err(Error::UtteranceSetMismatch {
            reason: format!(
                "labels cover {} utterances, truth {}",
                labels.len(),
                truth.utterances.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(labels.len());
    for (lu, tu) in labels.utterances.iter().zip(truth.utterances.iter()) {
        if lu.utterance_id != tu.utterance_id {
            return Err(Error::UtteranceSetMismatch {
                reason: format!(
                    "labels utterance {} paired with truth {}",
                    lu.utterance_id, tu.utterance_id
                ),
            });
        }
        out.push((lu.subword_spans(), tu));
    }
    Ok(out)
}

/// Tallies discovered-pattern vs true-unit co-occurrence over all frames and
/// over segment central frames.
pub fn map_patterns(labels: &CorpusLabels, truth: &GroundTruth) -> Result<MappingMatrix> {
    let pairs = paired_streams(labels, truth)?;

    let mut patterns: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
    let mut units: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
    for (spans, tu) in &pairs {
        for &(p, _, _) in spans {
            patterns.insert(p);
        }
        for t in &tu.tokens {
            for &u in &t.unit_ids {
                units.insert(u);
            }
        }
    }
    let patterns: Vec<u32> = patterns.into_iter().collect();
    let units: Vec<u32> = units.into_iter().collect();
    let prow: BTreeMap<u32, usize> = patterns.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let ucol: BTreeMap<u32, usize> = units.iter().enumerate().map(|(i, &u)| (u, i)).collect();

    let mut frame_counts = vec![vec![0u64; units.len()]; patterns.len()];
    let mut central_counts = vec![vec![0u64; units.len()]; patterns.len()];
    for (spans, tu) in &pairs {
        let frame_units = tu.frame_units();
        for &(p, s, e) in spans {
            if e as usize > frame_units.len() {
                return Err(Error::UtteranceSetMismatch {
                    reason: format!(
                        "utterance {}: labels cover frame {} beyond truth extent {}",
                        tu.utterance_id,
                        e,
                        frame_units.len()
                    ),
                });
            }
            let r = prow[&p];
            for t in s..e {
                frame_counts[r][ucol[&frame_units[t as usize]]] += 1;
            }
            let central = (s + (e - s) / 2) as usize;
            central_counts[r][ucol[&frame_units[central]]] += 1;
        }
    }
    Ok(MappingMatrix {
        patterns,
        units,
        frame_counts,
        central_counts,
    })
}

fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Frame purity and unit accuracy of `labels` against `truth`, after
/// translating every discovered pattern by the mapping's most-probable
/// assignment (per-frame convention).
pub fn pattern_accuracy(
    labels: &CorpusLabels,
    truth: &GroundTruth,
    mapping: &MappingMatrix,
) -> Result<Accuracy> {
    if mapping.total_frames() == 0 {
        return Err(Error::EmptyLabels {
            reason: "mapping matrix has no frames".to_string(),
        });
    }
    let assignment = mapping.assignment();
    let pairs = paired_streams(labels, truth)?;

    let mut correct = 0u64;
    let mut total = 0u64;
    let mut edits = 0usize;
    let mut true_tokens = 0usize;
    for (spans, tu) in &pairs {
        let frame_units = tu.frame_units();
        let mut mapped_string = Vec::with_capacity(spans.len());
        for &(p, s, e) in spans {
            let mapped = assignment[&p];
            mapped_string.push(mapped);
            for t in s..e {
                total += 1;
                if mapped == frame_units[t as usize] {
                    correct += 1;
                }
            }
        }
        let true_string = tu.unit_string();
        edits += edit_distance(&mapped_string, &true_string);
        true_tokens += true_string.len();
    }
    let frame_purity = correct as f64 / total as f64;
    let unit_accuracy = (1.0 - edits as f64 / true_tokens as f64).max(0.0);
    Ok(Accuracy {
        frame_purity,
        unit_accuracy,
    })
}
