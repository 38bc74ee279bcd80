//! Lexical mining over subword-ID sequences: a compressed suffix trie (the
//! PAT-tree role) with occurrence counts and left/right context statistics,
//! used to find frequent segments with high context variation and rebuild
//! the word-like lexicon around them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{CorpusLabels, Token, UtteranceLabels};
use crate::lexicon::{harvest_lexicon, Lexicon};

/// Context marker for an occurrence at the start of a sequence.
const LEFT_EDGE: u32 = u32::MAX - 1;
/// Terminator appended to every sequence before suffix insertion.
const END_MARK: u32 = u32::MAX;

#[derive(Debug, Default)]
struct Node {
    /// Number of corpus positions whose suffix passes through (or ends at)
    /// this node.
    count: u64,
    /// Distribution of the symbol immediately before those positions.
    left: BTreeMap<u32, u64>,
    /// Outgoing edges keyed by their first symbol.
    children: BTreeMap<u32, Edge>,
}

#[derive(Debug)]
struct Edge {
    label: Vec<u32>,
    child: usize,
}

/// Compressed suffix trie over per-utterance subword-ID sequences.
///
/// Every substring's occurrence count, and the distribution of the symbols
/// adjacent to its occurrences (with sequence boundaries counted as
/// sentinels), can be queried after construction.
#[derive(Debug)]
pub struct PatTree {
    nodes: Vec<Node>,
}

/// Where a pattern ends inside the trie.
enum Position {
    Node(usize),
    /// Ended partway along the edge into `child`.
    MidEdge { child: usize },
}

/// Builds the tree by inserting every suffix of every sequence (each
/// terminated with an end sentinel).
pub fn build_pat_tree(sequences: &[Vec<u32>]) -> PatTree {
    let mut tree = PatTree {
        nodes: vec![Node::default()],
    };
    for seq in sequences {
        assert!(
            seq.iter().all(|&s| s < LEFT_EDGE),
            "subword ids must leave room for the boundary sentinels"
        );
        let mut s = seq.clone();
        s.push(END_MARK);
        for i in 0..seq.len() {
            let prev = if i == 0 { LEFT_EDGE } else { s[i - 1] };
            tree.insert(&s[i..], prev);
        }
    }
    tree
}

impl PatTree {
    fn new_node(&mut self, count: u64, prev: u32) -> usize {
        let mut left = BTreeMap::new();
        left.insert(prev, count);
        self.nodes.push(Node {
            count,
            left,
            children: BTreeMap::new(),
        });
        self.nodes.len() - 1
    }

    fn bump(&mut self, node: usize, prev: u32) {
        self.nodes[node].count += 1;
        *self.nodes[node].left.entry(prev).or_insert(0) += 1;
    }

    fn insert(&mut self, suffix: &[u32], prev: u32) {
        let mut cur = 0usize;
        self.bump(cur, prev);
        let mut pos = 0usize;
        loop {
            debug_assert!(pos < suffix.len());
            let sym = suffix[pos];
            let Some(edge) = self.nodes[cur].children.get(&sym) else {
                let leaf = self.new_node(1, prev);
                self.nodes[cur].children.insert(
                    sym,
                    Edge {
                        label: suffix[pos..].to_vec(),
                        child: leaf,
                    },
                );
                return;
            };
            let child = edge.child;
            let rest = &suffix[pos..];
            let mut m = 0usize;
            while m < edge.label.len() && m < rest.len() && edge.label[m] == rest[m] {
                m += 1;
            }
            if m == self.nodes[cur].children[&sym].label.len() {
                cur = child;
                self.bump(cur, prev);
                pos += m;
                if pos == suffix.len() {
                    // Identical suffix inserted before; sentinel termination
                    // guarantees this can only happen exactly at a leaf.
                    debug_assert!(self.nodes[cur].children.is_empty());
                    return;
                }
            } else {
                // Split the edge at m; sentinel termination guarantees the
                // new suffix still has symbols left below the split.
                debug_assert!(pos + m < suffix.len());
                let mid = {
                    let c = &self.nodes[child];
                    let n = Node {
                        count: c.count,
                        left: c.left.clone(),
                        children: BTreeMap::new(),
                    };
                    self.nodes.push(n);
                    self.nodes.len() - 1
                };
                let old_edge = self.nodes[cur].children.get_mut(&sym).unwrap();
                let tail = old_edge.label.split_off(m);
                old_edge.child = mid;
                self.nodes[mid].children.insert(
                    tail[0],
                    Edge {
                        label: tail,
                        child,
                    },
                );
                self.bump(mid, prev);
                let leaf = self.new_node(1, prev);
                self.nodes[mid].children.insert(
                    suffix[pos + m],
                    Edge {
                        label: suffix[pos + m..].to_vec(),
                        child: leaf,
                    },
                );
                return;
            }
        }
    }

    fn locate(&self, pattern: &[u32]) -> Option<Position> {
        let mut cur = 0usize;
        let mut pos = 0usize;
        while pos < pattern.len() {
            let edge = self.nodes[cur].children.get(&pattern[pos])?;
            let take = edge.label.len().min(pattern.len() - pos);
            if pattern[pos..pos + take] != edge.label[..take] {
                return None;
            }
            if take < edge.label.len() {
                return Some(Position::MidEdge { child: edge.child });
            }
            cur = edge.child;
            pos += take;
        }
        Some(Position::Node(cur))
    }

    /// Occurrence count of `pattern` as a substring across all sequences
    /// (overlapping occurrences counted).
    pub fn count(&self, pattern: &[u32]) -> u64 {
        match self.locate(pattern) {
            Some(Position::Node(n)) => self.nodes[n].count,
            Some(Position::MidEdge { child }) => self.nodes[child].count,
            None => 0,
        }
    }

    /// Shannon entropies (bits) of the left- and right-adjacent symbol
    /// distributions of `pattern`, sequence boundaries included as outcomes.
    /// `None` if the pattern never occurs.
    pub fn context_entropies(&self, pattern: &[u32]) -> Option<(f64, f64)> {
        match self.locate(pattern)? {
            Position::Node(n) => {
                let node = &self.nodes[n];
                let right = shannon_bits(
                    node.children
                        .values()
                        .map(|e| self.nodes[e.child].count),
                );
                Some((shannon_bits(node.left.values().copied()), right))
            }
            // Mid-edge: the next symbol is determined, so right entropy is 0.
            Position::MidEdge { child } => {
                Some((shannon_bits(self.nodes[child].left.values().copied()), 0.0))
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Total number of tokens indexed (the number of suffixes inserted).
    pub fn total_tokens(&self) -> u64 {
        self.nodes[0].count
    }

    /// Depth-first candidate enumeration over every sentinel-free tree
    /// position with length in `[min_len, max_len]`.
    fn collect(
        &self,
        node: usize,
        depth: usize,
        path: &mut Vec<u32>,
        min_count: u64,
        min_entropy: f64,
        min_len: usize,
        max_len: usize,
        out: &mut Vec<WordCandidate>,
    ) {
        for (&first, edge) in &self.nodes[node].children {
            if first == END_MARK {
                continue;
            }
            let child = edge.child;
            let mut pushed = 0usize;
            for j in 1..=edge.label.len() {
                let sym = edge.label[j - 1];
                if sym == END_MARK {
                    break;
                }
                let d = depth + j;
                if d > max_len {
                    break;
                }
                path.push(sym);
                pushed += 1;
                if d >= min_len && self.nodes[child].count >= min_count {
                    let left = shannon_bits(self.nodes[child].left.values().copied());
                    let right = if j == edge.label.len() {
                        shannon_bits(
                            self.nodes[child]
                                .children
                                .values()
                                .map(|e| self.nodes[e.child].count),
                        )
                    } else {
                        0.0
                    };
                    if left.min(right) >= min_entropy {
                        out.push(WordCandidate {
                            subwords: path.clone(),
                            count: self.nodes[child].count,
                            left_entropy: left,
                            right_entropy: right,
                        });
                    }
                }
            }
            if pushed == edge.label.len() && depth + pushed < max_len {
                self.collect(
                    child,
                    depth + pushed,
                    path,
                    min_count,
                    min_entropy,
                    min_len,
                    max_len,
                    out,
                );
            }
            for _ in 0..pushed {
                path.pop();
            }
        }
    }
}

fn shannon_bits(counts: impl IntoIterator<Item = u64>) -> f64 {
    let counts: Vec<u64> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    -counts
        .iter()
        .map(|&c| {
            let p = c as f64 / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// A mined word-like candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCandidate {
    pub subwords: Vec<u32>,
    pub count: u64,
    pub left_entropy: f64,
    pub right_entropy: f64,
}

/// Mines segments with `count >= min_count` and both context entropies at
/// least `min_entropy` bits, lengths within `[min_len, max_len]`. Sorted by
/// count descending, then length descending, then sequence ascending.
pub fn mine_candidates(
    tree: &PatTree,
    min_count: u64,
    min_entropy: f64,
    min_len: usize,
    max_len: usize,
) -> Result<Vec<WordCandidate>> {
    if !(min_entropy >= 0.0) || min_len < 2 || min_len > max_len {
        return Err(Error::InvalidConfig {
            reason: format!(
                "mining requires min_entropy >= 0 and 2 <= min_len <= max_len \
                 (got min_entropy {min_entropy}, lengths {min_len}..={max_len})"
            ),
        });
    }
    let mut out = Vec::new();
    let mut path = Vec::new();
    tree.collect(
        0,
        0,
        &mut path,
        min_count,
        min_entropy,
        min_len,
        max_len,
        &mut out,
    );
    out.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.subwords.len().cmp(&a.subwords.len()))
            .then(a.subwords.cmp(&b.subwords))
    });
    Ok(out)
}

/// Re-tokenizes every utterance's subword stream by greedy longest match
/// over the candidate patterns (singleton subwords as fallback), recomputes
/// frame spans from the existing subword alignments, and harvests the new
/// lexicon (every used candidate plus all singletons).
pub fn relabel_with_candidates(
    labels: &CorpusLabels,
    cands: &[WordCandidate],
    lex: &Lexicon,
) -> Result<(CorpusLabels, Lexicon)> {
    let inventory = lex.subword_inventory_size();
    let mut set: std::collections::BTreeSet<Vec<u32>> = std::collections::BTreeSet::new();
    let mut max_len = 1usize;
    for c in cands {
        if c.subwords.len() < 2 {
            return Err(Error::InvalidConfig {
                reason: format!("word candidate {:?} is shorter than 2 subwords", c.subwords),
            });
        }
        if let Some(&bad) = c.subwords.iter().find(|&&s| s >= inventory) {
            return Err(Error::UnknownSubword {
                id: bad,
                inventory,
            });
        }
        max_len = max_len.max(c.subwords.len());
        set.insert(c.subwords.clone());
    }

    let mut new_labels = CorpusLabels::default();
    for u in &labels.utterances {
        let stream = u.subword_stream();
        let spans = u.subword_spans();
        let mut tokens = Vec::new();
        let mut i = 0usize;
        while i < stream.len() {
            let cap = max_len.min(stream.len() - i);
            let mut took = 1usize;
            for l in (2..=cap).rev() {
                if set.contains(&stream[i..i + l]) {
                    took = l;
                    break;
                }
            }
            let sub_spans: Vec<(u32, u32)> =
                spans[i..i + took].iter().map(|&(_, s, e)| (s, e)).collect();
            tokens.push(Token {
                word_pattern_id: 0, // stamped by the harvest below
                subword_ids: stream[i..i + took].to_vec(),
                start_frame: sub_spans[0].0,
                end_frame: sub_spans[took - 1].1,
                subword_spans: sub_spans,
            });
            i += took;
        }
        new_labels.utterances.push(UtteranceLabels {
            utterance_id: u.utterance_id.clone(),
            tokens,
        });
    }

    let lexicon = harvest_lexicon(&mut new_labels, 1, inventory)?;
    Ok((new_labels, lexicon))
}
