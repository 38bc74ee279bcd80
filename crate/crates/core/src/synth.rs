//! Synthetic corpus generation with known two-level ground truth.
//!
//! Units are left-to-right Gaussian trajectory HMMs whose state means follow
//! distinct axis-aligned paths in feature space; words are fixed unit
//! sequences drawn once; utterances sample words from a Zipf-like
//! distribution. Everything is deterministic under the seed, with
//! per-utterance derived RNG streams so the worker count never changes the
//! output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::corpus::{FeatureCorpus, FeatureSequence};
use crate::error::{Error, Result};
use crate::hmm::{transition_logs, GaussianState, HMMSet, SubwordHMM};

/// Frames each generator state emits, drawn uniformly per occurrence.
const STATE_DUR_RANGE: (u32, u32) = (5, 7);
/// Feature frame shift stamped on generated corpora.
const SHIFT_MS: f32 = 10.0;

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_units: usize,
    pub n_words: usize,
    pub n_utterances: usize,
    /// States per generator unit HMM.
    pub unit_state_count: usize,
    /// Word length in units, inclusive range.
    pub word_len_range: (usize, usize),
    /// Utterance length in words, inclusive range.
    pub utt_len_range: (usize, usize),
    /// Emission noise standard deviation around the state means.
    pub noise_sigma: f64,
    /// Distance between different units' base means in feature space.
    pub separation: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_units: 5,
            n_words: 8,
            n_utterances: 200,
            unit_state_count: 3,
            word_len_range: (2, 4),
            utt_len_range: (3, 8),
            noise_sigma: 0.1,
            separation: 4.0,
            feature_dim: 12,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_units >= 2
            && self.n_words >= 1
            && self.n_utterances >= 1
            && self.unit_state_count >= 1
            && self.word_len_range.0 >= 1
            && self.word_len_range.0 <= self.word_len_range.1
            && self.utt_len_range.0 >= 1
            && self.utt_len_range.0 <= self.utt_len_range.1
            && self.noise_sigma >= 0.0
            && self.separation > 0.0
            && self.feature_dim >= self.n_units
            && self.n_words * self.word_len_range.1 >= self.n_units;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                reason: format!("invalid synthesis spec: {self:?}"),
            })
        }
    }

    /// Mean vector of generator state `s` of unit `u`: offset along the
    /// unit's own axis, trajectory along the next axis.
    fn state_mean(&self, u: usize, s: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.feature_dim];
        m[u % self.feature_dim] = self.separation;
        let traj = self.separation / 2.0;
        let centered = s as f64 - (self.unit_state_count as f64 - 1.0) / 2.0;
        m[(u + 1) % self.feature_dim] += traj * centered;
        m
    }
}

/// One true word token with its per-unit frame spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueToken {
    pub word_id: u32,
    pub unit_ids: Vec<u32>,
    pub start_frame: u32,
    pub end_frame: u32,
    pub unit_spans: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceTruth {
    pub utterance_id: String,
    pub tokens: Vec<TrueToken>,
}

impl UtteranceTruth {
    /// Per-frame true unit ids.
    pub fn frame_units(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for t in &self.tokens {
            for (&u, &(s, e)) in t.unit_ids.iter().zip(t.unit_spans.iter()) {
                out.extend(std::iter::repeat_n(u, (e - s) as usize));
            }
        }
        out
    }

    /// The true unit-id string (one symbol per unit occurrence).
    pub fn unit_string(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .flat_map(|t| t.unit_ids.iter().copied())
            .collect()
    }
}

/// Everything the generator knows about the corpus it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub utterances: Vec<UtteranceTruth>,
    /// Unit sequence of each true word, indexed by word id.
    pub words: Vec<Vec<u32>>,
    /// The generator's unit HMMs.
    pub models: HMMSet,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Draws the word inventory: distinct unit sequences that together cover
/// every unit, lengths uniform in the configured range.
fn draw_words(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<u32>>> {
    for _ in 0..1000 {
        let mut words: Vec<Vec<u32>> = Vec::with_capacity(spec.n_words);
        let mut seen = std::collections::BTreeSet::new();
        let mut covered = vec![false; spec.n_units];
        let mut tries = 0;
        while words.len() < spec.n_words && tries < 10_000 {
            tries += 1;
            let len = rng.random_range(spec.word_len_range.0..=spec.word_len_range.1);
            let w: Vec<u32> = (0..len)
                .map(|_| rng.random_range(0..spec.n_units as u32))
                .collect();
            if seen.insert(w.clone()) {
                for &u in &w {
                    covered[u as usize] = true;
                }
                words.push(w);
            }
        }
        if words.len() == spec.n_words && covered.iter().all(|&c| c) {
            return Ok(words);
        }
    }
    Err(Error::InvalidConfig {
        reason: format!(
            "could not draw {} distinct words covering all {} units",
            spec.n_words, spec.n_units
        ),
    })
}

/// Zipf-like word sampler: word `i` has weight 1/(i+1).
struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize) -> Self {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for i in 0..n {
            acc += 1.0 / (i as f64 + 1.0);
            cumulative.push(acc);
        }
        ZipfSampler { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let x = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| x < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

fn generate_utterance(
    spec: &SynthSpec,
    words: &[Vec<u32>],
    zipf: &ZipfSampler,
    idx: usize,
) -> (FeatureSequence, UtteranceTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Stream 0 is the corpus-level stream; utterances get 1-based streams.
    rng.set_stream(idx as u64 + 1);

    let n_tokens = rng.random_range(spec.utt_len_range.0..=spec.utt_len_range.1);
    let mut data: Vec<f32> = Vec::new();
    let mut tokens = Vec::with_capacity(n_tokens);
    let mut frame = 0u32;
    for _ in 0..n_tokens {
        let word_id = zipf.sample(&mut rng);
        let unit_ids = words[word_id].clone();
        let start_frame = frame;
        let mut unit_spans = Vec::with_capacity(unit_ids.len());
        for &u in &unit_ids {
            let unit_start = frame;
            for s in 0..spec.unit_state_count {
                let mean = spec.state_mean(u as usize, s);
                let dur = rng.random_range(STATE_DUR_RANGE.0..=STATE_DUR_RANGE.1);
                for _ in 0..dur {
                    for &m in &mean {
                        let z: f64 = rng.sample(StandardNormal);
                        data.push((m + spec.noise_sigma * z) as f32);
                    }
                    frame += 1;
                }
            }
            unit_spans.push((unit_start, frame));
        }
        tokens.push(TrueToken {
            word_id: word_id as u32,
            unit_ids,
            start_frame,
            end_frame: frame,
            unit_spans,
        });
    }
    let id = format!("u{idx:05}");
    let f = FeatureSequence::from_frames(id.clone(), spec.feature_dim, SHIFT_MS, data)
        .expect("generated utterances are never empty");
    (
        f,
        UtteranceTruth {
            utterance_id: id,
            tokens,
        },
    )
}

/// Generates a corpus and its ground truth.
pub fn generate(spec: &SynthSpec) -> Result<(FeatureCorpus, GroundTruth)> {
    spec.validate()?;
    let mut corpus_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    corpus_rng.set_stream(0);
    let words = draw_words(spec, &mut corpus_rng)?;
    let zipf = ZipfSampler::new(spec.n_words);

    let generated: Vec<(FeatureSequence, UtteranceTruth)> = (0..spec.n_utterances)
        .into_par_iter()
        .map(|i| generate_utterance(spec, &words, &zipf, i))
        .collect();

    let mut features = Vec::with_capacity(generated.len());
    let mut truths = Vec::with_capacity(generated.len());
    for (f, t) in generated {
        features.push(f);
        truths.push(t);
    }

    let models = generator_models(spec);
    Ok((
        FeatureCorpus::new(features)?,
        GroundTruth {
            utterances: truths,
            words,
            models,
        },
    ))
}

/// The true unit HMMs (variance floored so a noiseless spec still yields
/// proper densities).
fn generator_models(spec: &SynthSpec) -> HMMSet {
    let avg_dur = f64::from(STATE_DUR_RANGE.0 + STATE_DUR_RANGE.1) / 2.0;
    let (log_self, log_next) = transition_logs(1.0 - 1.0 / avg_dur);
    let var = spec.noise_sigma.powi(2).max(1e-4);
    let models = (0..spec.n_units)
        .map(|u| {
            let states = (0..spec.unit_state_count)
                .map(|s| GaussianState::new(spec.state_mean(u, s), vec![var; spec.feature_dim]))
                .collect();
            (
                u as u32,
                SubwordHMM {
                    id: u as u32,
                    states,
                    log_self: vec![log_self; spec.unit_state_count],
                    log_next: vec![log_next; spec.unit_state_count],
                },
            )
        })
        .collect();
    HMMSet {
        models,
        feature_dim: spec.feature_dim,
    }
}
