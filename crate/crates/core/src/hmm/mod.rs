//! Subword-pattern HMMs: strictly left-to-right, no skips, one diagonal
//! Gaussian per state. Model math runs in f64 over f32 features.

pub mod align;
pub mod train;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transition probabilities are clamped into [FLOOR, 1-FLOOR] so both
/// log_self and log_next stay finite.
pub const TRANSITION_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub log_norm_const: f64,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Self {
        assert_eq!(mean.len(), var.len());
        debug_assert!(var.iter().all(|&v| v > 0.0));
        let log_norm_const =
            -0.5 * (mean.len() as f64 * LN_2PI + var.iter().map(|v| v.ln()).sum::<f64>());
        GaussianState {
            mean,
            var,
            log_norm_const,
        }
    }

    #[inline]
    pub fn log_pdf(&self, x: &[f32]) -> f64 {
        let mut quad = 0.0;
        for d in 0..self.mean.len() {
            let diff = x[d] as f64 - self.mean[d];
            quad += diff * diff / self.var[d];
        }
        self.log_norm_const - 0.5 * quad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubwordHMM {
    pub id: u32,
    pub states: Vec<GaussianState>,
    pub log_self: Vec<f64>,
    pub log_next: Vec<f64>,
}

impl SubwordHMM {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }
}

/// Clamped complementary transition pair from a stay probability.
pub fn transition_logs(p_self: f64) -> (f64, f64) {
    let p = p_self.clamp(TRANSITION_FLOOR, 1.0 - TRANSITION_FLOOR);
    (p.ln(), (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HMMSet {
    pub models: BTreeMap<u32, SubwordHMM>,
    pub feature_dim: usize,
}

impl HMMSet {
    pub fn get(&self, id: u32) -> Result<&SubwordHMM> {
        self.models.get(&id).ok_or(Error::UnknownSubword {
            id,
            inventory: self.models.len() as u32,
        })
    }

    pub fn states_per_model(&self) -> usize {
        self.models
            .values()
            .next()
            .map(|m| m.n_states())
            .unwrap_or(0)
    }

    fn check_uniform(&self) -> Result<()> {
        let states = self.states_per_model();
        for m in self.models.values() {
            if m.n_states() != states || m.n_states() == 0 {
                return Err(Error::InvalidConfig {
                    reason: format!("model {} has {} states, expected {}", m.id, m.n_states(), states),
                });
            }
            for s in &m.states {
                if s.mean.len() != self.feature_dim || s.var.len() != self.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.feature_dim,
                        got: s.mean.len(),
                    });
                }
            }
            if m.log_self.len() != states || m.log_next.len() != states {
                return Err(Error::InvalidConfig {
                    reason: format!("model {} transition arrays malformed", m.id),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = ModelFile {
            feature_dim: self.feature_dim,
            states_per_model: self.states_per_model(),
            models: self
                .models
                .values()
                .map(|m| ModelEntry {
                    id: m.id,
                    means: m.states.iter().map(|s| s.mean.clone()).collect(),
                    vars: m.states.iter().map(|s| s.var.clone()).collect(),
                    log_self: m.log_self.clone(),
                    log_next: m.log_next.clone(),
                })
                .collect(),
        };
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let body: ModelFile = serde_json::from_reader(BufReader::new(file))?;
        let mut models = BTreeMap::new();
        for e in body.models {
            if e.means.len() != body.states_per_model {
                return Err(Error::Malformed {
                    what: "model file",
                    path: path.to_path_buf(),
                    reason: format!("model {} state count mismatch", e.id),
                });
            }
            let states = e
                .means
                .into_iter()
                .zip(e.vars)
                .map(|(m, v)| GaussianState::new(m, v))
                .collect();
            models.insert(
                e.id,
                SubwordHMM {
                    id: e.id,
                    states,
                    log_self: e.log_self,
                    log_next: e.log_next,
                },
            );
        }
        let set = HMMSet {
            models,
            feature_dim: body.feature_dim,
        };
        set.check_uniform()?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    feature_dim: usize,
    states_per_model: usize,
    models: Vec<ModelEntry>,
}

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    id: u32,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    log_self: Vec<f64>,
    log_next: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_model(id: u32, means: &[f64], dim: usize) -> SubwordHMM {
        let states = means
            .iter()
            .map(|&m| GaussianState::new(vec![m; dim], vec![1.0; dim]))
            .collect();
        let (ls, ln) = transition_logs(0.5);
        SubwordHMM {
            id,
            states,
            log_self: vec![ls; means.len()],
            log_next: vec![ln; means.len()],
        }
    }

    #[test]
    fn gaussian_log_pdf_matches_closed_form() {
        let g = GaussianState::new(vec![1.0, -2.0], vec![4.0, 0.25]);
        let x = [2.0f32, -1.0];
        // -0.5*(2 ln 2pi + ln 4 + ln 0.25) - 0.5*((1)^2/4 + (1)^2/0.25)
        let expected = -0.5 * (2.0 * LN_2PI + 4.0f64.ln() + 0.25f64.ln())
            - 0.5 * (0.25 + 4.0);
        assert!((g.log_pdf(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn transition_pair_is_complementary_and_clamped() {
        for p in [0.0, 1e-9, 0.3, 0.999_999, 1.0] {
            let (ls, ln) = transition_logs(p);
            assert!((ls.exp() + ln.exp() - 1.0).abs() < 1e-9);
            assert!(ls.is_finite() && ln.is_finite());
        }
    }

    #[test]
    fn model_file_round_trip() {
        let mut models = BTreeMap::new();
        for id in 0..3u32 {
            models.insert(id, toy_model(id, &[id as f64, id as f64 + 1.0], 2));
        }
        let set = HMMSet {
            models,
            feature_dim: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("models.json");
        set.save(&p).unwrap();
        let back = HMMSet::load(&p).unwrap();
        assert_eq!(set, back);
    }

    #[test]
    fn mismatched_state_count_is_rejected_on_load() {
        let mut models = BTreeMap::new();
        models.insert(0, toy_model(0, &[0.0, 1.0], 2));
        models.insert(1, toy_model(1, &[0.0], 2));
        let set = HMMSet {
            models,
            feature_dim: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("models.json");
        set.save(&p).unwrap();
        assert!(HMMSet::load(&p).is_err());
    }
}
