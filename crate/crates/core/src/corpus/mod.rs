//! Audio ingestion, acoustic feature extraction, and feature archive storage.

mod archive;
mod mfcc;
mod wav;

pub use archive::{load_corpus, save_corpus};
pub use mfcc::{apply_cmvn, compute_features, extract_corpus};
pub use wav::{load_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A mono waveform with samples normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub id: String,
}

/// Feature extraction settings. Defaults follow the common MFCC recipe:
/// 13 cepstra with log energy in slot 0, plus deltas and delta-deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub window_ms: f32,
    pub shift_ms: f32,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub pre_emphasis: f32,
    /// Per-corpus cepstral mean/variance normalization, applied by `extract_corpus`.
    pub cmvn: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_ms: 25.0,
            shift_ms: 10.0,
            n_mels: 40,
            n_ceps: 13,
            pre_emphasis: 0.97,
            cmvn: true,
        }
    }
}

/// A sequence of fixed-dimension feature frames for one utterance.
/// Frames are stored row-major; dimension 0 carries the log-energy role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub dim: usize,
    pub frame_shift_ms: f32,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn from_frames(
        utterance_id: impl Into<String>,
        dim: usize,
        frame_shift_ms: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: data.len(),
            });
        }
        Ok(FeatureSequence {
            utterance_id: utterance_id.into(),
            dim,
            frame_shift_ms,
            data,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}

/// The whole corpus of feature sequences, ordered and with unique ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureCorpus {
    pub utterances: Vec<FeatureSequence>,
}

impl FeatureCorpus {
    pub fn new(utterances: Vec<FeatureSequence>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for u in &utterances {
            if !seen.insert(u.utterance_id.clone()) {
                return Err(Error::DuplicateUtteranceId {
                    id: u.utterance_id.clone(),
                });
            }
        }
        Ok(FeatureCorpus { utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.dim)
    }

    pub fn frame_counts(&self) -> Vec<(String, u32)> {
        self.utterances
            .iter()
            .map(|u| (u.utterance_id.clone(), u.n_frames() as u32))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&FeatureSequence> {
        self.utterances.iter().find(|u| u.utterance_id == id)
    }
}
