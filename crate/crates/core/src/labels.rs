//! Word-like token labels for a corpus, the `W_i` that every stage reads and rewrites.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One word-like token: a span of frames labelled with a word pattern and the
/// subword patterns it decomposes into, each with its own frame span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub word_pattern_id: u32,
    pub subword_ids: Vec<u32>,
    pub start_frame: u32,
    pub end_frame: u32,
    /// Frame span of each subword in `subword_ids`, tiling `[start_frame, end_frame)`.
    pub subword_spans: Vec<(u32, u32)>,
}

impl Token {
    /// Pattern identity independent of lexicon id numbering.
    pub fn pattern(&self) -> &[u32] {
        &self.subword_ids
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceLabels {
    pub utterance_id: String,
    pub tokens: Vec<Token>,
}

impl UtteranceLabels {
    /// Flattened subword-id stream of the utterance.
    pub fn subword_stream(&self) -> Vec<u32> {
        self.tokens
            .iter()
            .flat_map(|t| t.subword_ids.iter().copied())
            .collect()
    }

    /// Flattened per-subword (id, start, end) stream.
    pub fn subword_spans(&self) -> Vec<(u32, u32, u32)> {
        self.tokens
            .iter()
            .flat_map(|t| {
                t.subword_ids
                    .iter()
                    .zip(t.subword_spans.iter())
                    .map(|(&id, &(s, e))| (id, s, e))
            })
            .collect()
    }
}

/// Per-utterance word-like token sequences with time alignments (`W_i`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusLabels {
    pub utterances: Vec<UtteranceLabels>,
}

impl CorpusLabels {
    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    /// Distinct subword ids appearing anywhere in the labels.
    pub fn distinct_subwords(&self) -> BTreeSet<u32> {
        self.utterances
            .iter()
            .flat_map(|u| u.tokens.iter())
            .flat_map(|t| t.subword_ids.iter().copied())
            .collect()
    }

    /// Checks that tokens tile each utterance and subword spans tile each token.
    pub fn check_tiling(&self, frame_counts: &[(String, u32)]) -> Result<()> {
        for (id, n_frames) in frame_counts {
            let utt = self
                .utterances
                .iter()
                .find(|u| &u.utterance_id == id)
                .ok_or_else(|| Error::UtteranceSetMismatch {
                    reason: format!("labels missing utterance {id}"),
                })?;
            let mut cursor = 0u32;
            for tok in &utt.tokens {
                if tok.start_frame != cursor || tok.end_frame <= tok.start_frame {
                    return Err(Error::EmptyLabels {
                        reason: format!(
                            "utterance {id}: token span [{}, {}) does not tile at frame {cursor}",
                            tok.start_frame, tok.end_frame
                        ),
                    });
                }
                let mut sub_cursor = tok.start_frame;
                if tok.subword_spans.len() != tok.subword_ids.len() {
                    return Err(Error::EmptyLabels {
                        reason: format!("utterance {id}: subword span/id count mismatch"),
                    });
                }
                for &(s, e) in &tok.subword_spans {
                    if s != sub_cursor || e <= s {
                        return Err(Error::EmptyLabels {
                            reason: format!("utterance {id}: subword spans do not tile token"),
                        });
                    }
                    sub_cursor = e;
                }
                if sub_cursor != tok.end_frame {
                    return Err(Error::EmptyLabels {
                        reason: format!("utterance {id}: subword spans do not cover token"),
                    });
                }
                cursor = tok.end_frame;
            }
            if cursor != *n_frames {
                return Err(Error::EmptyLabels {
                    reason: format!(
                        "utterance {id}: tokens cover {cursor} of {n_frames} frames"
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
