//! Query-by-example spoken term detection: offline HMM-to-HMM distances via
//! state-sequence DTW with symmetrized KL-divergence costs, subsequence
//! matching of query model sequences against utterance label sequences, and
//! supervised/unsupervised distance fusion with retrieval metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read as _, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{GaussianState, HMMSet, SubwordHMM};
use crate::labels::CorpusLabels;

/// Symmetrized KL divergence between two diagonal Gaussians,
/// KL(a‖b) + KL(b‖a), in nats.
pub fn kl_gaussian(a: &GaussianState, b: &GaussianState) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: a.mean.len(),
            got: b.mean.len(),
        });
    }
    // The log-variance terms of the two directions cancel, leaving
    // 0.5 Σ [(va + Δ²)/vb + (vb + Δ²)/va − 2].
    let mut total = 0.0;
    for d in 0..a.mean.len() {
        let delta2 = (a.mean[d] - b.mean[d]).powi(2);
        total += (a.var[d] + delta2) / b.var[d] + (b.var[d] + delta2) / a.var[d] - 2.0;
    }
    // Analytically ≥ 0; clamp away the tiny negative rounding residue that
    // near-identical variances can leave.
    Ok((0.5 * total).max(0.0))
}

/// DTW distance between the state sequences of two HMMs: the minimum over
/// all anchored monotone alignments (steps (1,0), (0,1), (1,1), so one state
/// may match several in the other model and vice versa) of the mean
/// per-step KL cost. Computed exactly with a path-length-indexed DP.
pub fn hmm_distance(h1: &SubwordHMM, h2: &SubwordHMM) -> Result<f64> {
    let m = h1.states.len();
    let n = h2.states.len();
    let mut cost = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            cost[i * n + j] = kl_gaussian(&h1.states[i], &h2.states[j])?;
        }
    }
    let inf = f64::INFINITY;
    // prev[l-1], cur[l]: min path sum of exactly l cells ending at (i,j).
    let mut prev = vec![inf; m * n];
    let mut cur = vec![inf; m * n];
    prev[0] = cost[0];
    let mut best = if m == 1 && n == 1 { cost[0] } else { inf };
    for l in 2..=(m + n - 1) {
        for c in cur.iter_mut() {
            *c = inf;
        }
        for i in 0..m {
            for j in 0..n {
                let mut from = inf;
                if i > 0 {
                    from = from.min(prev[(i - 1) * n + j]);
                }
                if j > 0 {
                    from = from.min(prev[i * n + (j - 1)]);
                }
                if i > 0 && j > 0 {
                    from = from.min(prev[(i - 1) * n + (j - 1)]);
                }
                if from < inf {
                    cur[i * n + j] = from + cost[i * n + j];
                }
            }
        }
        let end = cur[(m - 1) * n + (n - 1)];
        if end < inf {
            best = best.min(end / l as f64);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(best)
}

/// Precomputed symmetric distances between every pair of subword HMMs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDistanceTable {
    ids: Vec<u32>,
    index: BTreeMap<u32, usize>,
    /// Row-major n×n distances.
    dist: Vec<f32>,
}

const TABLE_MAGIC: &[u8; 4] = b"PDT1";

/// Computes all pairwise model distances, in parallel over pairs.
pub fn build_distance_table(hmms: &HMMSet) -> Result<ModelDistanceTable> {
    let ids: Vec<u32> = hmms.models.keys().copied().collect();
    let n = ids.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    let computed: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| hmm_distance(&hmms.models[&ids[i]], &hmms.models[&ids[j]]))
        .collect();
    let mut dist = vec![0.0f32; n * n];
    for (&(i, j), d) in pairs.iter().zip(computed) {
        let d = d? as f32;
        dist[i * n + j] = d;
        dist[j * n + i] = d;
    }
    let index = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    Ok(ModelDistanceTable { ids, index, dist })
}

impl ModelDistanceTable {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn get(&self, a: u32, b: u32) -> Result<f64> {
        let n = self.ids.len() as u32;
        let ia = *self.index.get(&a).ok_or(Error::UnknownSubword {
            id: a,
            inventory: n,
        })?;
        let ib = *self.index.get(&b).ok_or(Error::UnknownSubword {
            id: b,
            inventory: n,
        })?;
        Ok(f64::from(self.dist[ia * self.ids.len() + ib]))
    }

    /// Binary format: magic, model count, ids, then the f32 matrix, all
    /// little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + self.ids.len() * 4 + self.dist.len() * 4);
        buf.extend_from_slice(TABLE_MAGIC);
        buf.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        for &id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for &d in &self.dist {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let need = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(Error::Truncated {
                    reason: format!(
                        "distance table {} has {} bytes, needs {n}",
                        path.display(),
                        bytes.len()
                    ),
                })
            } else {
                Ok(())
            }
        };
        need(8)?;
        if &bytes[0..4] != TABLE_MAGIC {
            return Err(Error::Malformed {
                what: "distance table",
                path: path.to_path_buf(),
                reason: "bad magic".to_string(),
            });
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let total = 8 + n * 4 + n * n * 4;
        need(total)?;
        if bytes.len() != total {
            return Err(Error::Malformed {
                what: "distance table",
                path: path.to_path_buf(),
                reason: format!("expected {total} bytes, found {}", bytes.len()),
            });
        }
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            let o = 8 + i * 4;
            ids.push(u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
        }
        let mut dist = Vec::with_capacity(n * n);
        for i in 0..n * n {
            let o = 8 + n * 4 + i * 4;
            dist.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
        }
        let index: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if index.len() != ids.len() {
            return Err(Error::Malformed {
                what: "distance table",
                path: path.to_path_buf(),
                reason: "duplicate model ids".to_string(),
            });
        }
        Ok(ModelDistanceTable { ids, index, dist })
    }
}

/// Best matched-pair distance sum aligning the whole query sequence against
/// any contiguous subsequence of the utterance (subsequence DTW with free
/// start and end, steps (1,0), (0,1), (1,1)).
pub fn sequence_distance(q: &[u32], u: &[u32], table: &ModelDistanceTable) -> Result<f64> {
    if q.is_empty() || u.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "sequence distance requires non-empty sequences".to_string(),
        });
    }
    let m = q.len();
    let n = u.len();
    let mut dp = vec![f64::INFINITY; m * n];
    for j in 0..n {
        dp[j] = table.get(q[0], u[j])?;
        if j > 0 {
            dp[j] = dp[j].min(dp[j - 1] + table.get(q[0], u[j])?);
        }
    }
    for i in 1..m {
        for j in 0..n {
            let c = table.get(q[i], u[j])?;
            let mut from = dp[(i - 1) * n + j];
            if j > 0 {
                from = from.min(dp[i * n + (j - 1)]);
                from = from.min(dp[(i - 1) * n + (j - 1)]);
            }
            dp[i * n + j] = c + from;
        }
    }
    Ok(dp[(m - 1) * n..]
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b)))
}

/// A query term: its example occurrences and the representative model
/// sequence chosen from them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub term_id: String,
    #[serde(default)]
    pub examples: Vec<QueryExample>,
    /// Representative sequence; when empty it is derived from the examples.
    #[serde(default)]
    pub model_sequence: Vec<u32>,
}

/// One example occurrence of the term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryExample {
    pub utterance_id: String,
    pub start_frame: u32,
    pub end_frame: u32,
}

/// Picks the modal subword sequence over the example occurrences; ties go
/// to the shortest sequence, then lexicographically smallest.
pub fn select_query_model(occurrences: &[Vec<u32>]) -> Result<Vec<u32>> {
    let mut counts: BTreeMap<&Vec<u32>, usize> = BTreeMap::new();
    for occ in occurrences.iter().filter(|o| !o.is_empty()) {
        *counts.entry(occ).or_insert(0) += 1;
    }
    let mut best: Option<(&Vec<u32>, usize)> = None;
    for (seq, count) in counts {
        let replace = match best {
            None => true,
            Some((bs, bc)) => {
                count > bc
                    || (count == bc
                        && (seq.len() < bs.len() || (seq.len() == bs.len() && seq < bs)))
            }
        };
        if replace {
            best = Some((seq, count));
        }
    }
    best.map(|(seq, _)| seq.clone()).ok_or(Error::InvalidConfig {
        reason: "cannot select a query model from zero non-empty occurrences".to_string(),
    })
}

/// One query's utterances ranked by ascending distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub term_id: String,
    /// `(utterance_id, distance)`, non-decreasing distance; ties ordered by
    /// utterance id.
    pub entries: Vec<(String, f64)>,
}

/// Ranks every utterance for one query. Utterances with empty label
/// sequences rank last with infinite distance.
pub fn search(q: &Query, labels: &CorpusLabels, table: &ModelDistanceTable) -> Result<RankedList> {
    if q.model_sequence.is_empty() {
        return Err(Error::InvalidConfig {
            reason: format!("query {} has an empty model sequence", q.term_id),
        });
    }
    let mut entries = Vec::with_capacity(labels.len());
    for u in &labels.utterances {
        let stream = u.subword_stream();
        let d = if stream.is_empty() {
            f64::INFINITY
        } else {
            sequence_distance(&q.model_sequence, &stream, table)?
        };
        entries.push((u.utterance_id.clone(), d));
    }
    entries.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedList {
        term_id: q.term_id.clone(),
        entries,
    })
}

/// Searches all queries in parallel, preserving query order.
pub fn search_all(
    queries: &[Query],
    labels: &CorpusLabels,
    table: &ModelDistanceTable,
) -> Result<Vec<RankedList>> {
    queries
        .par_iter()
        .map(|q| search(q, labels, table))
        .collect()
}

/// Fuses supervised and unsupervised distances, d_λ = λ·d_s + (1−λ)·d_u,
/// and re-ranks. The two inputs must cover identical (query, utterance)
/// key sets.
pub fn fuse_and_rank(
    d_s: &[RankedList],
    d_u: &[RankedList],
    lambda: f64,
) -> Result<Vec<RankedList>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig {
            reason: format!("lambda must lie in [0,1], got {lambda}"),
        });
    }
    let supervised = to_maps(d_s);
    let unsupervised = to_maps(d_u);
    if supervised.keys().ne(unsupervised.keys()) {
        return Err(Error::FusionKeyMismatch {
            reason: format!(
                "query sets differ: supervised {:?}, unsupervised {:?}",
                supervised.keys().collect::<Vec<_>>(),
                unsupervised.keys().collect::<Vec<_>>()
            ),
        });
    }
    let mut out = Vec::with_capacity(d_u.len());
    // Preserve the unsupervised input's query order.
    for list in d_u {
        let term = &list.term_id;
        let s = &supervised[term];
        let u = &unsupervised[term];
        if s.keys().ne(u.keys()) {
            return Err(Error::FusionKeyMismatch {
                reason: format!("utterance sets differ for query {term}"),
            });
        }
        let mut entries: Vec<(String, f64)> = u
            .iter()
            .map(|(utt, &du)| (utt.clone(), lambda * s[utt] + (1.0 - lambda) * du))
            .collect();
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        out.push(RankedList {
            term_id: term.clone(),
            entries,
        });
    }
    Ok(out)
}

fn to_maps(lists: &[RankedList]) -> BTreeMap<String, BTreeMap<String, f64>> {
    lists
        .iter()
        .map(|l| {
            (
                l.term_id.clone(),
                l.entries
                    .iter()
                    .map(|(u, d)| (u.clone(), *d))
                    .collect::<BTreeMap<_, _>>(),
            )
        })
        .collect()
}

/// Positive relevance judgments per query.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Relevance {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

impl Relevance {
    /// TSV lines `query_id \t utterance_id \t {0,1}`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (term, utts) in &self.relevant {
            for u in utts {
                out.push_str(term);
                out.push('\t');
                out.push_str(u);
                out.push_str("\t1\n");
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut relevant: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Malformed {
                what: "relevance judgments",
                path: path.to_path_buf(),
                reason: format!("line {}: expected `query\\tutterance\\t0|1`", i + 1),
            };
            if parts.len() != 3 {
                return Err(bad());
            }
            match parts[2] {
                "1" => {
                    relevant
                        .entry(parts[0].to_string())
                        .or_default()
                        .insert(parts[1].to_string());
                }
                "0" => {}
                _ => return Err(bad()),
            }
        }
        Ok(Relevance { relevant })
    }
}

/// Retrieval quality summary over a set of ranked lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub mean_average_precision: f64,
    pub precision_at_5: f64,
    pub precision_at_10: f64,
    pub evaluated_queries: usize,
    /// Queries skipped because they had no relevant utterances.
    pub skipped_queries: Vec<String>,
}

/// MAP, P@5 and P@10 against relevance judgments. Queries without any
/// relevant utterance are excluded from the averages and reported; it is an
/// error if no query can be evaluated.
pub fn evaluate(ranked: &[RankedList], relevance: &Relevance) -> Result<RetrievalReport> {
    let mut ap_sum = 0.0;
    let mut p5_sum = 0.0;
    let mut p10_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = Vec::new();
    for list in ranked {
        let Some(rel) = relevance.relevant.get(&list.term_id).filter(|r| !r.is_empty()) else {
            skipped.push(list.term_id.clone());
            continue;
        };
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut rel_at_5 = 0usize;
        let mut rel_at_10 = 0usize;
        for (rank0, (utt, _)) in list.entries.iter().enumerate() {
            if rel.contains(utt) {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if rank0 < 5 {
                    rel_at_5 += 1;
                }
                if rank0 < 10 {
                    rel_at_10 += 1;
                }
            }
        }
        ap_sum += ap / rel.len() as f64;
        p5_sum += rel_at_5 as f64 / 5.0;
        p10_sum += rel_at_10 as f64 / 10.0;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::InvalidConfig {
            reason: "no ranked query has any relevant utterance".to_string(),
        });
    }
    Ok(RetrievalReport {
        mean_average_precision: ap_sum / evaluated as f64,
        precision_at_5: p5_sum / evaluated as f64,
        precision_at_10: p10_sum / evaluated as f64,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
    })
}
