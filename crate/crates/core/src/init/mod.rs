//! Initialization: produce the first label set W0 by top-down word-like
//! segmentation, watershed subword segmentation on self-similarity dotplots,
//! and global k-means over segment representative vectors.

pub mod dotplot;
pub mod kmeans;
pub mod watershed;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureCorpus, FeatureSequence};
use crate::error::Result;
use crate::labels::{CorpusLabels, Token, UtteranceLabels};
use crate::lexicon::{harvest_lexicon, Lexicon};
use dotplot::build_dotplot;
use kmeans::{select_k_and_cluster, KRange};
use watershed::watershed_subword_boundaries;

/// Minimum spacing between detected word-boundary peaks, in frames.
const MIN_PEAK_GAP: usize = 10;
/// Frames averaged on each side when scoring spectral discontinuity.
const DISCONTINUITY_WINDOW: usize = 5;

/// How the initial labels are produced. `TwoLevel` is the full scheme;
/// the other two exist for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Word-like segments first, watershed subwords within each.
    #[default]
    TwoLevel,
    /// Watershed subwords over the whole utterance; every subword segment
    /// stands alone as a single-subword word token.
    OneLevel,
    /// One-level segmentation, but subword IDs drawn uniformly at random
    /// (seeded) instead of k-means assignments; k is whatever the one-level
    /// clustering would have chosen.
    RandomIds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub min_word_frames: usize,
    pub min_subword_frames: usize,
    /// Leading feature coefficients used for dotplots and merge decisions
    /// (the static cepstra; deltas blur block structure).
    pub static_dim: usize,
    pub k_min: usize,
    /// Hard cap on the top of the scanned k range; the effective top is
    /// min(cap, n_vectors/10) and never exceeds the vector count.
    pub k_max_cap: usize,
    pub scatter_threshold: f64,
    pub seed: u64,
    pub mode: InitMode,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            min_word_frames: 20,
            min_subword_frames: 13,
            static_dim: 13,
            k_min: 2,
            k_max_cap: 300,
            scatter_threshold: 0.5,
            seed: 0,
            mode: InitMode::TwoLevel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentBoundary {
    pub utterance_id: String,
    pub start_frame: u32,
    pub end_frame: u32,
}

#[derive(Debug, Clone)]
pub struct InitialLabels {
    pub labels: CorpusLabels,
    pub n_subword_patterns: u32,
    pub initial_lexicon: Lexicon,
}

/// Splits an utterance into word-like segments at discontinuity peaks.
///
/// The per-frame discontinuity score mixes the jump in log energy
/// (coefficient 0) with the distance between mean static-feature windows on
/// either side, weighted half and half. Peaks must clear mean + one standard
/// deviation, be the earliest maximum within ±10 frames, and leave every
/// resulting segment at least `min_word_frames` long (shorter segments are
/// merged across their weaker boundary).
pub fn detect_word_segments(f: &FeatureSequence, cfg: &InitConfig) -> Vec<SegmentBoundary> {
    let n = f.n_frames() as usize;
    if n == 0 {
        return Vec::new();
    }
    let score = discontinuity_scores(f, cfg);
    let peaks = pick_peaks(&score);
    let kept = enforce_min_segment(peaks, &score, n, cfg.min_word_frames);

    let mut out = Vec::with_capacity(kept.len() + 1);
    let mut start = 0usize;
    for &b in &kept {
        out.push(SegmentBoundary {
            utterance_id: f.utterance_id.clone(),
            start_frame: start as u32,
            end_frame: b as u32,
        });
        start = b;
    }
    out.push(SegmentBoundary {
        utterance_id: f.utterance_id.clone(),
        start_frame: start as u32,
        end_frame: n as u32,
    });
    out
}

fn discontinuity_scores(f: &FeatureSequence, cfg: &InitConfig) -> Vec<f64> {
    let n = f.n_frames() as usize;
    let dim = f.dim as usize;
    let hi = cfg.static_dim.min(dim);
    let mut score = vec![0.0f64; n];
    for t in 1..n {
        let de = (f.frame(t)[0] as f64 - f.frame(t - 1)[0] as f64).abs();
        let left = window_mean(f, t.saturating_sub(DISCONTINUITY_WINDOW), t, hi);
        let right = window_mean(f, t, (t + DISCONTINUITY_WINDOW).min(n), hi);
        let dist: f64 = left
            .iter()
            .zip(right.iter())
            .skip(1) // energy already covered by the delta term
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        score[t] = 0.5 * de + 0.5 * dist;
    }
    score
}

fn window_mean(f: &FeatureSequence, from: usize, to: usize, hi: usize) -> Vec<f64> {
    let mut mean = vec![0.0f64; hi];
    for t in from..to {
        for (m, &x) in mean.iter_mut().zip(f.frame(t)[..hi].iter()) {
            *m += x as f64;
        }
    }
    let inv = 1.0 / (to - from).max(1) as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    mean
}

fn pick_peaks(score: &[f64]) -> Vec<usize> {
    let n = score.len();
    if n < 2 {
        return Vec::new();
    }
    let vals = &score[1..];
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / vals.len() as f64;
    let threshold = mean + var.sqrt() + 1e-12;
    let mut peaks = Vec::new();
    for t in 1..n {
        if score[t] <= threshold {
            continue;
        }
        let lo = t.saturating_sub(MIN_PEAK_GAP);
        let hi = (t + MIN_PEAK_GAP + 1).min(n);
        let win_max = score[lo..hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if score[t] == win_max && (lo..t).all(|s| score[s] < win_max) {
            peaks.push(t);
        }
    }
    peaks
}

/// Removes boundaries until every segment is at least `min_len` long (or no
/// boundaries remain), always dissolving the weaker boundary beside the
/// currently shortest offending segment.
fn enforce_min_segment(
    mut bounds: Vec<usize>,
    score: &[f64],
    n: usize,
    min_len: usize,
) -> Vec<usize> {
    loop {
        if bounds.is_empty() {
            return bounds;
        }
        let mut edges = Vec::with_capacity(bounds.len() + 2);
        edges.push(0);
        edges.extend_from_slice(&bounds);
        edges.push(n);
        let mut worst: Option<(usize, usize)> = None; // (length, segment idx)
        for s in 0..edges.len() - 1 {
            let len = edges[s + 1] - edges[s];
            if len < min_len && worst.map_or(true, |(wl, _)| len < wl) {
                worst = Some((len, s));
            }
        }
        let Some((_, s)) = worst else {
            return bounds;
        };
        // Candidate boundaries flanking segment s in `bounds` indices.
        let left = s.checked_sub(1);
        let right = if s < bounds.len() { Some(s) } else { None };
        let drop_idx = match (left, right) {
            (Some(l), Some(r)) => {
                if score[bounds[l]] <= score[bounds[r]] {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => return bounds,
        };
        bounds.remove(drop_idx);
    }
}

/// Arithmetic mean of the segment's frames, in f64.
pub fn representative_vector(seg_frames: &[&[f32]]) -> Vec<f64> {
    assert!(!seg_frames.is_empty());
    let dim = seg_frames[0].len();
    let mut mean = vec![0.0f64; dim];
    for f in seg_frames {
        for (m, &x) in mean.iter_mut().zip(f.iter()) {
            *m += x as f64;
        }
    }
    let inv = 1.0 / seg_frames.len() as f64;
    for m in mean.iter_mut() {
        *m *= inv;
    }
    mean
}

/// Subword spans (relative to the slice) for one word-like segment:
/// watershed boundaries on the filtered dotplot, then a merge pass that
/// folds every span shorter than `min_subword_frames` into whichever
/// neighbor its representative vector is more cosine-similar to.
fn subword_spans(frames: &[&[f32]], cfg: &InitConfig) -> Vec<(usize, usize)> {
    let n = frames.len();
    if n < 2 {
        return vec![(0, n)];
    }
    let hi = cfg.static_dim.min(frames[0].len());
    let m = build_dotplot(frames, hi);
    let bounds = watershed_subword_boundaries(&m);
    let mut spans = Vec::with_capacity(bounds.len() + 1);
    let mut start = 0usize;
    for &b in &bounds {
        spans.push((start, b));
        start = b;
    }
    spans.push((start, n));

    loop {
        if spans.len() <= 1 {
            return spans;
        }
        let mut worst: Option<(usize, usize)> = None;
        for (i, &(s, e)) in spans.iter().enumerate() {
            let len = e - s;
            if len < cfg.min_subword_frames && worst.map_or(true, |(wl, _)| len < wl) {
                worst = Some((len, i));
            }
        }
        let Some((_, i)) = worst else {
            return spans;
        };
        let rep = |&(s, e): &(usize, usize)| representative_vector(&frames[s..e]);
        let merge_left = if i == 0 {
            false
        } else if i + 1 == spans.len() {
            true
        } else {
            let me = rep(&spans[i]);
            cosine(&me, &rep(&spans[i - 1]), hi) >= cosine(&me, &rep(&spans[i + 1]), hi)
        };
        if merge_left {
            spans[i - 1].1 = spans[i].1;
            spans.remove(i);
        } else {
            spans[i + 1].0 = spans[i].0;
            spans.remove(i);
        }
    }
}

fn cosine(a: &[f64], b: &[f64], hi: usize) -> f64 {
    let hi = hi.min(a.len());
    let dot: f64 = a[..hi].iter().zip(b[..hi].iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a[..hi].iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b[..hi].iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One utterance's segmentation: word spans, each with its subword spans
/// (absolute frame indices).
struct UtteranceSegmentation {
    words: Vec<(u32, u32, Vec<(u32, u32)>)>,
}

fn segment_utterance(f: &FeatureSequence, cfg: &InitConfig) -> UtteranceSegmentation {
    let frames: Vec<&[f32]> = f.frames().collect();
    let mut words = Vec::new();
    match cfg.mode {
        InitMode::TwoLevel => {
            for w in detect_word_segments(f, cfg) {
                let (s, e) = (w.start_frame as usize, w.end_frame as usize);
                let subs: Vec<(u32, u32)> = subword_spans(&frames[s..e], cfg)
                    .into_iter()
                    .map(|(a, b)| ((s + a) as u32, (s + b) as u32))
                    .collect();
                words.push((w.start_frame, w.end_frame, subs));
            }
        }
        InitMode::OneLevel | InitMode::RandomIds => {
            for (a, b) in subword_spans(&frames, cfg) {
                words.push((a as u32, b as u32, vec![(a as u32, b as u32)]));
            }
        }
    }
    UtteranceSegmentation { words }
}

/// Runs the whole initialization chain over the corpus and returns W0.
pub fn build_initial_labels(corpus: &FeatureCorpus, cfg: &InitConfig) -> Result<InitialLabels> {
    let segmentations: Vec<UtteranceSegmentation> = corpus
        .utterances
        .par_iter()
        .map(|f| segment_utterance(f, cfg))
        .collect();

    // Representative vectors for every subword segment, in corpus order.
    let mut reps: Vec<Vec<f64>> = Vec::new();
    for (f, seg) in corpus.utterances.iter().zip(segmentations.iter()) {
        let frames: Vec<&[f32]> = f.frames().collect();
        for (_, _, subs) in &seg.words {
            for &(a, b) in subs {
                reps.push(representative_vector(&frames[a as usize..b as usize]));
            }
        }
    }

    let (k, mut assignments) = if reps.len() < 2 {
        (1u32, vec![0usize; reps.len()])
    } else {
        let k_min = cfg.k_min.clamp(1, reps.len());
        let k_max = cfg
            .k_max_cap
            .min((reps.len() / 10).max(k_min))
            .clamp(k_min, reps.len());
        let res = select_k_and_cluster(
            &reps,
            KRange::new(k_min, k_max),
            cfg.scatter_threshold,
            cfg.seed,
        )?;
        (res.k as u32, res.assignments)
    };

    if cfg.mode == InitMode::RandomIds {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1d5);
        for a in assignments.iter_mut() {
            *a = rng.random_range(0..k) as usize;
        }
    }

    // Stitch assignments back into per-utterance tokens.
    let mut labels = CorpusLabels {
        utterances: Vec::with_capacity(corpus.utterances.len()),
    };
    let mut next = 0usize;
    for (f, seg) in corpus.utterances.iter().zip(segmentations.iter()) {
        let mut tokens = Vec::with_capacity(seg.words.len());
        for (ws, we, subs) in &seg.words {
            let mut subword_ids = Vec::with_capacity(subs.len());
            let mut spans = Vec::with_capacity(subs.len());
            for &(a, b) in subs {
                subword_ids.push(assignments[next] as u32);
                spans.push((a, b));
                next += 1;
            }
            tokens.push(Token {
                word_pattern_id: 0,
                subword_ids,
                start_frame: *ws,
                end_frame: *we,
                subword_spans: spans,
            });
        }
        labels.utterances.push(UtteranceLabels {
            utterance_id: f.utterance_id.clone(),
            tokens,
        });
    }

    let initial_lexicon = harvest_lexicon(&mut labels, 1, k)?;
    Ok(InitialLabels {
        labels,
        n_subword_patterns: k,
        initial_lexicon,
    })
}
