//! Witten-Bell interpolated N-gram language model over word-pattern ids,
//! with ARPA-style text serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::CorpusLabels;

/// Sentence-start sentinel (context only, never predicted).
pub const START: u32 = u32::MAX - 1;
/// Sentence-end sentinel (predicted once per utterance).
pub const END: u32 = u32::MAX;

/// Interpolated Witten-Bell model, order 1 or 2.
///
/// Unigram: P(w) = (c(w) + T1/V) / (C + T1) with a uniform 1/V base over the
/// vocabulary (observed words plus the end marker); T1 = distinct observed
/// types (including the end marker), C = total predicted tokens.
/// Bigram: P(w|h) = (c(h,w) + T(h)·P(w)) / (c(h) + T(h)) with T(h) the
/// distinct continuations of h. Unseen histories fall through to the
/// unigram with weight 1; unseen words score the unigram's zero-count value,
/// so every score is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLM {
    pub order: usize,
    vocab: BTreeSet<u32>,
    log_uni: BTreeMap<u32, f64>,
    log_uni_unseen: f64,
    log_bi: BTreeMap<(u32, u32), f64>,
    log_backoff: BTreeMap<u32, f64>,
}

/// Counts bigram events; histories include START, predictions include END.
fn collect_counts(
    labels: &CorpusLabels,
) -> (BTreeMap<u32, u64>, BTreeMap<(u32, u32), u64>) {
    let mut uni: BTreeMap<u32, u64> = BTreeMap::new();
    let mut bi: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for u in &labels.utterances {
        let mut h = START;
        for t in &u.tokens {
            let w = t.word_pattern_id;
            *uni.entry(w).or_insert(0) += 1;
            *bi.entry((h, w)).or_insert(0) += 1;
            h = w;
        }
        *uni.entry(END).or_insert(0) += 1;
        *bi.entry((h, END)).or_insert(0) += 1;
    }
    (uni, bi)
}

pub fn estimate_ngram(labels: &CorpusLabels, order: usize) -> Result<NGramLM> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidConfig {
            reason: format!("n-gram order {order} unsupported (1 or 2)"),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyLabels {
            reason: "cannot estimate a language model from empty labels".to_string(),
        });
    }
    let (uni_counts, bi_counts) = collect_counts(labels);
    let vocab: BTreeSet<u32> = uni_counts.keys().copied().collect();
    let v = vocab.len() as f64;
    let t1 = vocab.len() as f64;
    let c_total: f64 = uni_counts.values().map(|&c| c as f64).sum();
    let denom = c_total + t1;
    let log_uni: BTreeMap<u32, f64> = uni_counts
        .iter()
        .map(|(&w, &c)| (w, ((c as f64 + t1 / v) / denom).ln()))
        .collect();
    let log_uni_unseen = ((t1 / v) / denom).ln();

    let mut log_bi = BTreeMap::new();
    let mut log_backoff = BTreeMap::new();
    if order == 2 {
        let mut hist_total: BTreeMap<u32, u64> = BTreeMap::new();
        let mut hist_types: BTreeMap<u32, u64> = BTreeMap::new();
        for (&(h, _), &c) in &bi_counts {
            *hist_total.entry(h).or_insert(0) += c;
            *hist_types.entry(h).or_insert(0) += 1;
        }
        for (&(h, w), &c) in &bi_counts {
            let ch = hist_total[&h] as f64;
            let th = hist_types[&h] as f64;
            let p_uni = log_uni[&w].exp();
            let p = (c as f64 + th * p_uni) / (ch + th);
            log_bi.insert((h, w), p.ln());
        }
        for (&h, &ch) in &hist_total {
            let th = hist_types[&h] as f64;
            log_backoff.insert(h, (th / (ch as f64 + th)).ln());
        }
    }

    Ok(NGramLM {
        order,
        vocab,
        log_uni,
        log_uni_unseen,
        log_bi,
        log_backoff,
    })
}

impl NGramLM {
    pub fn vocab(&self) -> &BTreeSet<u32> {
        &self.vocab
    }

    fn log_p_uni(&self, w: u32) -> f64 {
        self.log_uni.get(&w).copied().unwrap_or(self.log_uni_unseen)
    }

    /// log P(w | h); natural log, always finite.
    pub fn log_cond(&self, h: u32, w: u32) -> f64 {
        if self.order == 1 {
            return self.log_p_uni(w);
        }
        if let Some(&lp) = self.log_bi.get(&(h, w)) {
            return lp;
        }
        let lb = self.log_backoff.get(&h).copied().unwrap_or(0.0);
        lb + self.log_p_uni(w)
    }

    /// Natural-log probability of a whole utterance's word sequence,
    /// including the end marker.
    pub fn lm_logprob(&self, sequence: &[u32]) -> f64 {
        let mut h = START;
        let mut total = 0.0;
        for &w in sequence {
            total += self.log_cond(h, w);
            h = w;
        }
        total + self.log_cond(h, END)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let _ = writeln!(out, "\\data\\");
        let _ = writeln!(out, "ngram 1={}", self.log_uni.len() + 1);
        if self.order == 2 {
            let _ = writeln!(out, "ngram 2={}", self.log_bi.len());
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "\\1-grams:");
        for (&w, &lp) in &self.log_uni {
            let b = self.log_backoff.get(&w).copied();
            match b {
                Some(lb) => {
                    let _ = writeln!(out, "{}\t{}\t{}", ln_to_log10(lp), word_str(w), ln_to_log10(lb));
                }
                None => {
                    let _ = writeln!(out, "{}\t{}", ln_to_log10(lp), word_str(w));
                }
            }
        }
        // START is never predicted, so its slot carries the unseen-word
        // mass (and START's backoff weight when the model has one).
        match self.log_backoff.get(&START) {
            Some(&lb) => {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}",
                    ln_to_log10(self.log_uni_unseen),
                    word_str(START),
                    ln_to_log10(lb)
                );
            }
            None => {
                let _ = writeln!(out, "{}\t{}", ln_to_log10(self.log_uni_unseen), word_str(START));
            }
        }
        if self.order == 2 {
            let _ = writeln!(out);
            let _ = writeln!(out, "\\2-grams:");
            for (&(h, w), &lp) in &self.log_bi {
                let _ = writeln!(
                    out,
                    "{}\t{} {}",
                    ln_to_log10(lp),
                    word_str(h),
                    word_str(w)
                );
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "\\end\\");
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let malformed = |reason: &str| Error::Malformed {
            what: "arpa lm",
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut order = 1;
        let mut log_uni = BTreeMap::new();
        let mut log_backoff = BTreeMap::new();
        let mut log_bi = BTreeMap::new();
        let mut log_uni_unseen = f64::NEG_INFINITY;
        let mut section = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line == "\\data\\" || line == "\\end\\" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("ngram ") {
                let n: usize = rest
                    .split('=')
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| malformed("bad ngram count line"))?;
                order = order.max(n);
                continue;
            }
            if line == "\\1-grams:" {
                section = 1;
                continue;
            }
            if line == "\\2-grams:" {
                section = 2;
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match section {
                1 => {
                    if fields.len() < 2 {
                        return Err(malformed("short 1-gram line"));
                    }
                    let lp = parse_log10(fields[0]).ok_or_else(|| malformed("bad 1-gram prob"))?;
                    let w = parse_word(fields[1]).ok_or_else(|| malformed("bad 1-gram word"))?;
                    if w == START {
                        log_uni_unseen = lp;
                    } else {
                        log_uni.insert(w, lp);
                    }
                    if fields.len() >= 3 {
                        let lb =
                            parse_log10(fields[2]).ok_or_else(|| malformed("bad backoff"))?;
                        log_backoff.insert(w, lb);
                    }
                }
                2 => {
                    if fields.len() != 3 {
                        return Err(malformed("bad 2-gram line"));
                    }
                    let lp = parse_log10(fields[0]).ok_or_else(|| malformed("bad 2-gram prob"))?;
                    let h = parse_word(fields[1]).ok_or_else(|| malformed("bad 2-gram history"))?;
                    let w = parse_word(fields[2]).ok_or_else(|| malformed("bad 2-gram word"))?;
                    log_bi.insert((h, w), lp);
                }
                _ => return Err(malformed("content outside any section")),
            }
        }
        if log_uni.is_empty() {
            return Err(malformed("no unigrams"));
        }
        // The unseen-mass line is derivable when absent: smallest possible
        // count is not stored per word, so fall back to the smallest stored.
        if !log_uni_unseen.is_finite() {
            log_uni_unseen = log_uni
                .values()
                .fold(f64::INFINITY, |a, &b| a.min(b));
        }
        let vocab: BTreeSet<u32> = log_uni.keys().copied().collect();
        Ok(NGramLM {
            order,
            vocab,
            log_uni,
            log_uni_unseen,
            log_bi,
            log_backoff,
        })
    }
}

fn ln_to_log10(ln: f64) -> f64 {
    ln / std::f64::consts::LN_10
}

fn parse_log10(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().map(|v| v * std::f64::consts::LN_10)
}

fn word_str(w: u32) -> String {
    match w {
        START => "<s>".to_string(),
        END => "</s>".to_string(),
        _ => w.to_string(),
    }
}

fn parse_word(s: &str) -> Option<u32> {
    match s {
        "<s>" => Some(START),
        "</s>" => Some(END),
        _ => s.parse().ok(),
    }
}
