//! The word-like pattern lexicon: every entry is a distinct sequence of
//! subword pattern IDs, harvested from the current labels.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{CorpusLabels, Token};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPattern {
    pub id: u32,
    pub subwords: Vec<u32>,
    pub count: u64,
}

/// Lexicon of word-like patterns. Singleton patterns (one entry per subword
/// ID in the inventory) are always present so decoding always has a covering
/// path; multi-subword entries carry ids at and above the inventory size.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    entries: BTreeMap<u32, WordPattern>,
    subword_inventory_size: u32,
    seq_index: BTreeMap<Vec<u32>, u32>,
}

#[derive(Serialize, Deserialize)]
struct LexiconFile {
    subword_inventory_size: u32,
    entries: Vec<WordPattern>,
}

impl Lexicon {
    pub fn new(entries: Vec<WordPattern>, subword_inventory_size: u32) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut seq_index = BTreeMap::new();
        for e in entries {
            if e.subwords.is_empty() {
                return Err(Error::InvalidConfig {
                    reason: format!("lexicon entry {} has an empty subword sequence", e.id),
                });
            }
            if let Some(&bad) = e.subwords.iter().find(|&&s| s >= subword_inventory_size) {
                return Err(Error::UnknownSubword {
                    id: bad,
                    inventory: subword_inventory_size,
                });
            }
            if seq_index.insert(e.subwords.clone(), e.id).is_some() {
                return Err(Error::InvalidConfig {
                    reason: format!("duplicate subword sequence {:?} in lexicon", e.subwords),
                });
            }
            if map.insert(e.id, e).is_some() {
                return Err(Error::InvalidConfig {
                    reason: "duplicate word pattern id in lexicon".to_string(),
                });
            }
        }
        Ok(Lexicon {
            entries: map,
            subword_inventory_size,
            seq_index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subword_inventory_size(&self) -> u32 {
        self.subword_inventory_size
    }

    pub fn get(&self, id: u32) -> Option<&WordPattern> {
        self.entries.get(&id)
    }

    pub fn id_of(&self, seq: &[u32]) -> Option<u32> {
        self.seq_index.get(seq).copied()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &WordPattern> {
        self.entries.values()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let body = LexiconFile {
            subword_inventory_size: self.subword_inventory_size,
            entries: self.entries.values().cloned().collect(),
        };
        serde_json::to_writer_pretty(BufWriter::new(file), &body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let body: LexiconFile = serde_json::from_reader(BufReader::new(file))?;
        Lexicon::new(body.entries, body.subword_inventory_size)
    }
}

/// Harvests the lexicon from `labels` and rewrites the labels against it.
///
/// Multi-subword patterns with at least `min_count` occurrences become
/// entries; every subword ID below `inventory` is additionally kept as a
/// singleton entry (count = observed occurrences after rewriting, floored
/// at 1). Tokens whose pattern fell under the threshold are split into
/// their singleton subwords, so the rewritten labels are exactly covered by
/// the returned lexicon, and harvesting them again reproduces it.
///
/// Singleton entries take their subword ID as word ID; multi-subword
/// entries get ids from `inventory` upward in lexicographic sequence order.
pub fn harvest_lexicon(
    labels: &mut CorpusLabels,
    min_count: u64,
    inventory: u32,
) -> Result<Lexicon> {
    for u in &labels.utterances {
        for t in &u.tokens {
            if let Some(&bad) = t.subword_ids.iter().find(|&&s| s >= inventory) {
                return Err(Error::UnknownSubword {
                    id: bad,
                    inventory,
                });
            }
        }
    }

    let raw_counts = count_patterns(labels);
    let kept_multi: BTreeMap<&Vec<u32>, u64> = raw_counts
        .iter()
        .filter(|(seq, &c)| seq.len() >= 2 && c >= min_count)
        .map(|(seq, &c)| (seq, c))
        .collect();

    // Rewrite: split dropped tokens into singletons, stamp word ids.
    let mut multi_ids: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
    for (i, (seq, _)) in kept_multi.iter().enumerate() {
        multi_ids.insert((*seq).clone(), inventory + i as u32);
    }
    for u in labels.utterances.iter_mut() {
        let mut rewritten = Vec::with_capacity(u.tokens.len());
        for t in u.tokens.drain(..) {
            if t.subword_ids.len() == 1 {
                let s = t.subword_ids[0];
                rewritten.push(Token {
                    word_pattern_id: s,
                    ..t
                });
            } else if let Some(&id) = multi_ids.get(&t.subword_ids) {
                rewritten.push(Token {
                    word_pattern_id: id,
                    ..t
                });
            } else {
                for (i, &s) in t.subword_ids.iter().enumerate() {
                    let (a, b) = t.subword_spans[i];
                    rewritten.push(Token {
                        word_pattern_id: s,
                        subword_ids: vec![s],
                        start_frame: a,
                        end_frame: b,
                        subword_spans: vec![(a, b)],
                    });
                }
            }
        }
        u.tokens = rewritten;
    }

    // Final counts over the rewritten labels.
    let final_counts = count_patterns(labels);
    let mut entries = Vec::new();
    for s in 0..inventory {
        let seq = vec![s];
        let observed = final_counts.get(&seq).copied().unwrap_or(0);
        entries.push(WordPattern {
            id: s,
            subwords: seq,
            count: observed.max(1),
        });
    }
    for (seq, id) in &multi_ids {
        entries.push(WordPattern {
            id: *id,
            subwords: seq.clone(),
            count: final_counts.get(seq).copied().unwrap_or(0),
        });
    }
    Lexicon::new(entries, inventory)
}

fn count_patterns(labels: &CorpusLabels) -> BTreeMap<Vec<u32>, u64> {
    let mut counts: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    for u in &labels.utterances {
        for t in &u.tokens {
            *counts.entry(t.subword_ids.clone()).or_insert(0) += 1;
        }
    }
    counts
}
