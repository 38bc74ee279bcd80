//! Acceptance gate: ten end-to-end checks, one test per criterion. Each test
//! prints a single `[PASS]` line when it succeeds; a failure fails the test.
//!
//! The oracles here are deliberately independent of the library internals:
//! alignment and decoding are checked against exhaustive path enumeration,
//! mining against sliding-window recounts, and distances against brute-force
//! path search plus closed forms.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use protolex::corpus::FeatureSequence;
use protolex::decode::{decode_utterance, DecodeConfig};
use protolex::detect::{
    build_distance_table, evaluate, fuse_and_rank, hmm_distance, kl_gaussian, search_all,
    select_query_model, Query, QueryExample, RankedList, Relevance,
};
use protolex::eval::{map_patterns, pattern_accuracy};
use protolex::hmm::align::force_align;
use protolex::hmm::train::{init_hmms_from_labels, train_hmms, TrainConfig};
use protolex::hmm::{transition_logs, GaussianState, HMMSet, SubwordHMM};
use protolex::init::{build_initial_labels, InitConfig, InitMode};
use protolex::labels::{CorpusLabels, Token, UtteranceLabels};
use protolex::lexicon::{Lexicon, WordPattern};
use protolex::ngram::{estimate_ngram, NGramLM, END, START};
use protolex::pattree::{build_pat_tree, mine_candidates, WordCandidate};
use protolex::pipeline::{
    initialize, run_full, run_stage_i, run_stage_ii, run_stage_iii, PipelineState, StageConfig,
};
use protolex::synth::{generate, GroundTruth, SynthSpec};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0_f64.max(a.abs()).max(b.abs())
}

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(close(a, b, tol), "{what}: {a} vs {b}");
}

fn random_state(rng: &mut ChaCha8Rng, dim: usize) -> GaussianState {
    let mean = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
    let var = (0..dim).map(|_| rng.random_range(0.3..2.0)).collect();
    GaussianState::new(mean, var)
}

fn random_hmm(rng: &mut ChaCha8Rng, id: u32, n_states: usize, dim: usize) -> SubwordHMM {
    let states = (0..n_states).map(|_| random_state(rng, dim)).collect();
    let (mut log_self, mut log_next) = (Vec::new(), Vec::new());
    for _ in 0..n_states {
        let (s, n) = transition_logs(rng.random_range(0.2..0.8));
        log_self.push(s);
        log_next.push(n);
    }
    SubwordHMM {
        id,
        states,
        log_self,
        log_next,
    }
}

fn random_frames(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> FeatureSequence {
    let data = (0..n * dim)
        .map(|_| rng.random_range(-3.0f32..3.0))
        .collect();
    FeatureSequence::from_frames("oracle", dim, 10.0, data).expect("non-empty frame data")
}

// ===========================================================================
// Criterion 1: forced alignment and exact decoding vs. path enumeration
// ===========================================================================

/// The concatenated state chain of a token sequence, with per-frame
/// emissions precomputed: everything the enumeration needs.
struct FlatChain {
    log_self: Vec<f64>,
    log_next: Vec<f64>,
    /// emit[s][t] over the full utterance.
    emit: Vec<Vec<f64>>,
}

impl FlatChain {
    fn new(patterns: &[&[u32]], hmms: &HMMSet, f: &FeatureSequence) -> FlatChain {
        let mut log_self = Vec::new();
        let mut log_next = Vec::new();
        let mut emit = Vec::new();
        for pattern in patterns {
            for &sid in pattern.iter() {
                let m = hmms.get(sid).expect("model exists");
                for s in 0..m.n_states() {
                    log_self.push(m.log_self[s]);
                    log_next.push(m.log_next[s]);
                    emit.push(f.frames().map(|x| m.states[s].log_pdf(x)).collect());
                }
            }
        }
        FlatChain {
            log_self,
            log_next,
            emit,
        }
    }

    fn len(&self) -> usize {
        self.log_self.len()
    }
}

/// Best score over every monotone stay/advance path through the chain for
/// frames `[t0, t1)`, each state absorbing at least one frame, final exit
/// arc included. Pure enumeration; no dynamic programming.
fn enumerated_align(c: &FlatChain, t0: usize, t1: usize) -> f64 {
    let s_count = c.len();
    if s_count == 0 || s_count > t1 - t0 {
        return f64::NEG_INFINITY;
    }
    fn go(c: &FlatChain, s: usize, t: usize, t1: usize, acc: f64) -> f64 {
        let s_count = c.len();
        if t + 1 == t1 {
            return if s + 1 == s_count {
                acc + c.log_next[s]
            } else {
                f64::NEG_INFINITY
            };
        }
        let frames_left = t1 - 1 - (t + 1);
        let mut best = f64::NEG_INFINITY;
        if s_count - 1 - s <= frames_left {
            best = best.max(go(c, s, t + 1, t1, acc + c.log_self[s] + c.emit[s][t + 1]));
        }
        if s + 1 < s_count && s_count - 1 - (s + 1) <= frames_left {
            best = best.max(go(c, s + 1, t + 1, t1, acc + c.log_next[s] + c.emit[s + 1][t + 1]));
        }
        best
    }
    go(c, 0, t0, t1, c.emit[0][t0])
}

/// Exact decoding by recursion over segmentations and word choices, with the
/// span scores coming from `enumerated_align`.
fn enumerated_decode(
    n_frames: usize,
    words: &[(u32, FlatChain)],
    lm: Option<&NGramLM>,
    scale: f64,
    wip: f64,
) -> f64 {
    let w = words.len();
    // Span scores, lazily shared across the recursion.
    let mut spans = vec![vec![vec![f64::NAN; n_frames + 1]; n_frames + 1]; w];
    for (wi, (_, chain)) in words.iter().enumerate() {
        for t0 in 0..n_frames {
            for t1 in (t0 + 1)..=n_frames {
                spans[wi][t0][t1] = enumerated_align(chain, t0, t1);
            }
        }
    }
    // dp[t][p]: best score for frames[t..] given previous word index p
    // (p == w means "at the start").
    let mut dp = vec![vec![f64::NEG_INFINITY; w + 1]; n_frames + 1];
    for p in 0..=w {
        let prev_id = if p == w { START } else { words[p].0 };
        dp[n_frames][p] = match lm {
            Some(m) => scale * m.log_cond(prev_id, END),
            None => 0.0,
        };
    }
    for t in (0..n_frames).rev() {
        for p in 0..=w {
            let prev_id = if p == w { START } else { words[p].0 };
            let mut best = f64::NEG_INFINITY;
            for (wi, (wid, _)) in words.iter().enumerate() {
                let entry = match lm {
                    Some(m) => scale * m.log_cond(prev_id, *wid) + wip,
                    None => 0.0,
                };
                for t2 in (t + 1)..=n_frames {
                    let a = spans[wi][t][t2];
                    if a > f64::NEG_INFINITY {
                        best = best.max(a + entry + dp[t2][wi]);
                    }
                }
            }
            dp[t][p] = best;
        }
    }
    dp[0][w]
}

fn random_model_set(rng: &mut ChaCha8Rng, dim: usize, max_states: usize) -> HMMSet {
    let n_models = rng.random_range(1..=3u32);
    let models = (0..n_models)
        .map(|id| {
            let states = rng.random_range(1..=max_states);
            (id, random_hmm(rng, id, states, dim))
        })
        .collect();
    HMMSet {
        models,
        feature_dim: dim,
    }
}

#[test]
fn criterion_01_viterbi_matches_exhaustive_enumeration() {
    let start = Instant::now();
    let mut r = rng(0xC1);
    let dim = 2;

    // Forced alignment: 200 random instances, up to 16 frames and 26 states.
    for i in 0..200 {
        let hmms = random_model_set(&mut r, dim, 3);
        let ids: Vec<u32> = hmms.models.keys().copied().collect();
        let (patterns, total_states) = loop {
            let pats: Vec<Vec<u32>> = (0..r.random_range(1..=3))
                .map(|_| {
                    (0..r.random_range(1..=3))
                        .map(|_| ids[r.random_range(0..ids.len())])
                        .collect()
                })
                .collect();
            let states: usize = pats
                .iter()
                .flat_map(|p| p.iter())
                .map(|&s| hmms.get(s).unwrap().n_states())
                .sum();
            if states <= 16 {
                break (pats, states);
            }
        };
        let t = r.random_range(total_states..=16);
        let f = random_frames(&mut r, t, dim);
        let refs: Vec<&[u32]> = patterns.iter().map(|p| p.as_slice()).collect();
        let (_, got) = force_align(&f, &refs, &hmms).expect("feasible alignment");
        let chain = FlatChain::new(&refs, &hmms, &f);
        assert!(chain.len() <= 26);
        let want = enumerated_align(&chain, 0, t);
        assert_close(got, want, 1e-9, &format!("align instance {i}"));
    }

    // Decoding: 100 random instances without an LM, 100 with a bigram LM.
    for i in 0..200 {
        let with_lm = i >= 100;
        let hmms = random_model_set(&mut r, dim, 3);
        let ids: Vec<u32> = hmms.models.keys().copied().collect();
        let mut seqs: BTreeSet<Vec<u32>> = BTreeSet::new();
        for _ in 0..r.random_range(1..=3) {
            seqs.insert(
                (0..r.random_range(1..=2))
                    .map(|_| ids[r.random_range(0..ids.len())])
                    .collect(),
            );
        }
        let entries: Vec<WordPattern> = seqs
            .iter()
            .enumerate()
            .map(|(j, s)| WordPattern {
                id: j as u32,
                subwords: s.clone(),
                count: 1,
            })
            .collect();
        let lex = Lexicon::new(entries.clone(), ids.len() as u32).expect("valid lexicon");
        let chain_len = |p: &[u32]| -> usize {
            p.iter().map(|&s| hmms.get(s).unwrap().n_states()).sum()
        };
        let min_chain = entries.iter().map(|e| chain_len(&e.subwords)).min().unwrap();
        let total: usize = entries.iter().map(|e| chain_len(&e.subwords)).sum();
        assert!(total <= 26);
        let t = r.random_range(min_chain.max(2)..=14.max(min_chain.max(2)));
        let f = random_frames(&mut r, t, dim);

        let lm = if with_lm {
            // A bigram estimated from random word sequences over the lexicon.
            let utterances = (0..8)
                .map(|u| UtteranceLabels {
                    utterance_id: format!("lm{u}"),
                    tokens: (0..r.random_range(2..=6))
                        .map(|k| {
                            let wid = entries[r.random_range(0..entries.len())].id;
                            Token {
                                word_pattern_id: wid,
                                subword_ids: vec![0],
                                start_frame: 5 * k,
                                end_frame: 5 * (k + 1),
                                subword_spans: vec![(5 * k, 5 * (k + 1))],
                            }
                        })
                        .collect(),
                })
                .collect();
            Some(estimate_ngram(&CorpusLabels { utterances }, 2).expect("lm estimates"))
        } else {
            None
        };
        let (scale, wip) = (2.0, -1.3);
        let cfg = DecodeConfig {
            lm_scale: scale,
            word_insertion_penalty: wip,
            beam: 0.0,
            use_lm: lm.is_some(),
        };
        let got = decode_utterance(&f, &hmms, &lex, lm.as_ref(), &cfg)
            .expect("decodable")
            .total_log_score;
        let words: Vec<(u32, FlatChain)> = entries
            .iter()
            .map(|e| {
                let refs: Vec<&[u32]> = vec![&e.subwords];
                (e.id, FlatChain::new(&refs, &hmms, &f))
            })
            .collect();
        let want = enumerated_decode(t, &words, lm.as_ref(), scale, wip);
        assert_close(got, want, 1e-9, &format!("decode instance {i}"));
    }

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "criterion 1 exceeded its one-minute budget: {elapsed:?}"
    );
    println!(
        "[PASS] criterion 1: forced alignment and beam-0 decoding match exhaustive \
         enumeration on 400 instances at 1e-9 ({elapsed:?})"
    );
}

// ===========================================================================
// Criterion 2: segment counts and mined sets vs. sliding-window brute force
// ===========================================================================

fn brute_count(seqs: &[Vec<u32>], p: &[u32]) -> u64 {
    seqs.iter()
        .map(|s| s.windows(p.len()).filter(|w| *w == p).count() as u64)
        .sum()
}

/// Left/right neighbor distributions of every occurrence; sequence edges
/// count as a dedicated boundary outcome (keyed as -1).
fn brute_contexts(seqs: &[Vec<u32>], p: &[u32]) -> (BTreeMap<i64, u64>, BTreeMap<i64, u64>) {
    let mut left = BTreeMap::new();
    let mut right = BTreeMap::new();
    for s in seqs {
        if s.len() < p.len() {
            continue;
        }
        for i in 0..=(s.len() - p.len()) {
            if &s[i..i + p.len()] != p {
                continue;
            }
            let l = if i == 0 { -1 } else { s[i - 1] as i64 };
            let r = if i + p.len() == s.len() {
                -1
            } else {
                s[i + p.len()] as i64
            };
            *left.entry(l).or_insert(0) += 1;
            *right.entry(r).or_insert(0) += 1;
        }
    }
    (left, right)
}

fn shannon_bits(counts: &BTreeMap<i64, u64>) -> f64 {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / t;
            -p * p.log2()
        })
        .sum()
}

#[test]
fn criterion_02_pattern_counts_and_mining_match_brute_force() {
    let start = Instant::now();
    let mut r = rng(0xC2);
    for corpus_idx in 0..50 {
        let alphabet = r.random_range(2..=5u32);
        let budget = r.random_range(100..=1000usize);
        let mut seqs: Vec<Vec<u32>> = Vec::new();
        let mut used = 0;
        while used < budget {
            let len = r.random_range(1..=(budget - used).min(250));
            seqs.push((0..len).map(|_| r.random_range(0..alphabet)).collect());
            used += len;
        }
        let total: usize = seqs.iter().map(|s| s.len()).sum();
        assert!(total <= 1000);
        let tree = build_pat_tree(&seqs);

        // Every distinct n-gram (n <= 5) present in the corpus.
        let mut present: BTreeSet<Vec<u32>> = BTreeSet::new();
        for s in &seqs {
            for n in 1..=5.min(s.len()) {
                for w in s.windows(n) {
                    present.insert(w.to_vec());
                }
            }
        }
        for p in &present {
            let want = brute_count(&seqs, p);
            assert_eq!(
                tree.count(p),
                want,
                "corpus {corpus_idx}: count mismatch for {p:?}"
            );
            let (bl, br) = brute_contexts(&seqs, p);
            let (gl, gr) = tree.context_entropies(p).expect("pattern occurs");
            assert_close(
                gl,
                shannon_bits(&bl),
                1e-9,
                &format!("corpus {corpus_idx}: left entropy of {p:?}"),
            );
            assert_close(
                gr,
                shannon_bits(&br),
                1e-9,
                &format!("corpus {corpus_idx}: right entropy of {p:?}"),
            );
        }
        // A few absent patterns must count zero.
        for _ in 0..20 {
            let len = r.random_range(1..=5usize);
            let p: Vec<u32> = (0..len).map(|_| r.random_range(0..alphabet)).collect();
            if !present.contains(&p) {
                assert_eq!(tree.count(&p), 0, "corpus {corpus_idx}: phantom count");
            }
        }

        // Mined candidate set vs. a brute-force miner, same sort order.
        let (min_count, min_entropy) = if corpus_idx % 2 == 0 {
            (2, 0.2509)
        } else {
            (3, 0.7351)
        };
        let got = mine_candidates(&tree, min_count, min_entropy, 2, 5).expect("mining succeeds");
        let mut want: Vec<WordCandidate> = present
            .iter()
            .filter(|p| p.len() >= 2)
            .filter_map(|p| {
                let count = brute_count(&seqs, p);
                let (bl, br) = brute_contexts(&seqs, p);
                let (le, re) = (shannon_bits(&bl), shannon_bits(&br));
                (count >= min_count && le >= min_entropy && re >= min_entropy).then(|| {
                    WordCandidate {
                        subwords: p.clone(),
                        count,
                        left_entropy: le,
                        right_entropy: re,
                    }
                })
            })
            .collect();
        want.sort_by(|a, b| {
            b.count
                .cmp(&a.count)
                .then(b.subwords.len().cmp(&a.subwords.len()))
                .then(a.subwords.cmp(&b.subwords))
        });
        assert_eq!(
            got.len(),
            want.len(),
            "corpus {corpus_idx}: mined {} candidates, brute force found {}",
            got.len(),
            want.len()
        );
        for (g, w) in got.iter().zip(want.iter()) {
            assert_eq!(g.subwords, w.subwords, "corpus {corpus_idx}: mined order");
            assert_eq!(g.count, w.count);
            assert_close(g.left_entropy, w.left_entropy, 1e-9, "mined left entropy");
            assert_close(g.right_entropy, w.right_entropy, 1e-9, "mined right entropy");
        }
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 60.0,
        "criterion 2 exceeded its one-minute budget: {elapsed:?}"
    );
    println!(
        "[PASS] criterion 2: segment counts and mined candidate sets match brute force \
         on 50 corpora ({elapsed:?})"
    );
}

// ===========================================================================
// Criterion 3: model distance, sequence distance, and divergence oracles
// ===========================================================================

/// One-sided KL between diagonal Gaussians, textbook form with log terms.
fn one_sided_kl(a: &GaussianState, b: &GaussianState) -> f64 {
    (0..a.mean.len())
        .map(|d| {
            let diff = a.mean[d] - b.mean[d];
            0.5 * ((b.var[d] / a.var[d]).ln() + a.var[d] / b.var[d] + diff * diff / b.var[d] - 1.0)
        })
        .sum()
}

/// Minimum mean-per-cell cost over every monotone path, by full enumeration.
fn enumerated_hmm_distance(a: &SubwordHMM, b: &SubwordHMM) -> f64 {
    fn walk(
        a: &SubwordHMM,
        b: &SubwordHMM,
        i: usize,
        j: usize,
        sum: f64,
        len: usize,
        best: &mut f64,
    ) {
        let sum = sum + kl_gaussian(&a.states[i], &b.states[j]).expect("same dims");
        let len = len + 1;
        let (m, n) = (a.n_states(), b.n_states());
        if i + 1 == m && j + 1 == n {
            *best = best.min(sum / len as f64);
            return;
        }
        if i + 1 < m {
            walk(a, b, i + 1, j, sum, len, best);
        }
        if j + 1 < n {
            walk(a, b, i, j + 1, sum, len, best);
        }
        if i + 1 < m && j + 1 < n {
            walk(a, b, i + 1, j + 1, sum, len, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best
}

/// Subsequence matching cost by enumerating every path with free start and
/// end over `u`.
fn enumerated_sequence_distance(q: &[u32], u: &[u32], d: &dyn Fn(u32, u32) -> f64) -> f64 {
    fn walk(
        q: &[u32],
        u: &[u32],
        i: usize,
        j: usize,
        acc: f64,
        d: &dyn Fn(u32, u32) -> f64,
        best: &mut f64,
    ) {
        if i + 1 == q.len() {
            *best = best.min(acc);
        }
        if i + 1 < q.len() {
            walk(q, u, i + 1, j, acc + d(q[i + 1], u[j]), d, best);
        }
        if j + 1 < u.len() {
            walk(q, u, i, j + 1, acc + d(q[i], u[j + 1]), d, best);
            if i + 1 < q.len() {
                walk(q, u, i + 1, j + 1, acc + d(q[i + 1], u[j + 1]), d, best);
            }
        }
    }
    let mut best = f64::INFINITY;
    for j0 in 0..u.len() {
        walk(q, u, 0, j0, d(q[0], u[j0]), d, &mut best);
    }
    best
}

#[test]
fn criterion_03_distance_oracles_agree() {
    let start = Instant::now();
    let mut r = rng(0xC3);

    // Hand values for the symmetrized divergence.
    let g = |m: f64, v: f64| GaussianState::new(vec![m], vec![v]);
    assert_eq!(
        kl_gaussian(&g(0.0, 1.0), &g(1.0, 1.0)).unwrap(),
        1.0,
        "unit-variance unit-shift divergence must be exactly 1"
    );
    assert_close(
        kl_gaussian(&g(0.0, 1.0), &g(0.0, 2.0)).unwrap(),
        0.25,
        1e-12,
        "variance-only hand value",
    );
    assert_eq!(kl_gaussian(&g(0.7, 1.3), &g(0.7, 1.3)).unwrap(), 0.0);

    // Random divergences vs. the sum of one-sided textbook KLs.
    for i in 0..60 {
        let dim = r.random_range(1..=4);
        let a = random_state(&mut r, dim);
        let b = random_state(&mut r, dim);
        let got = kl_gaussian(&a, &b).unwrap();
        let want = one_sided_kl(&a, &b) + one_sided_kl(&b, &a);
        assert_close(got, want, 1e-9, &format!("divergence instance {i}"));
    }

    // Model distance vs. exhaustive path enumeration, states <= 5.
    for i in 0..40 {
        let dim = r.random_range(1..=3);
        let (na, nb) = (r.random_range(1..=5), r.random_range(1..=5));
        let a = random_hmm(&mut r, 0, na, dim);
        let b = random_hmm(&mut r, 1, nb, dim);
        let got = hmm_distance(&a, &b).unwrap();
        let want = enumerated_hmm_distance(&a, &b);
        assert_close(got, want, 1e-9, &format!("model distance instance {i}"));
        let sym = hmm_distance(&b, &a).unwrap();
        assert_close(got, sym, 1e-12, "model distance symmetry");
    }

    // Sequence distance vs. exhaustive path enumeration, lengths <= 6.
    for i in 0..60 {
        let k = r.random_range(2..=4u32);
        let models = (0..k)
            .map(|id| (id, random_hmm(&mut r, id, 1, 2)))
            .collect();
        let hmms = HMMSet {
            models,
            feature_dim: 2,
        };
        let table = build_distance_table(&hmms).unwrap();
        let q: Vec<u32> = (0..r.random_range(1..=5))
            .map(|_| r.random_range(0..k))
            .collect();
        let u: Vec<u32> = (0..r.random_range(1..=6))
            .map(|_| r.random_range(0..k))
            .collect();
        let got = protolex::detect::sequence_distance(&q, &u, &table).unwrap();
        let d = |x: u32, y: u32| table.get(x, y).unwrap();
        let want = enumerated_sequence_distance(&q, &u, &d);
        assert_close(got, want, 1e-9, &format!("sequence distance instance {i}"));
    }

    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 3: divergence closed forms, model-distance and sequence-distance \
         path enumerations all agree at 1e-9 ({elapsed:?})"
    );
}

// ===========================================================================
// Criterion 4: training improves corpus likelihood round over round
// ===========================================================================

#[test]
fn criterion_04_em_log_likelihood_is_non_decreasing() {
    let start = Instant::now();
    let (corpus, _) = generate(&SynthSpec::default()).expect("default corpus generates");
    let init = build_initial_labels(&corpus, &InitConfig::default()).expect("initialization");
    let cfg = TrainConfig {
        em_iters: 5,
        ..Default::default()
    };
    let (hmms, _) = init_hmms_from_labels(&corpus, &init.labels, init.n_subword_patterns, &cfg)
        .expect("flat models");
    let report = train_hmms(&corpus, &init.labels, hmms, &cfg).expect("training runs");
    assert_eq!(report.round_log_likelihoods.len(), 5);
    for (i, pair) in report.round_log_likelihoods.windows(2).enumerate() {
        assert!(
            pair[1] >= pair[0] - 1e-6,
            "round {} decreased the log-likelihood: {} -> {}",
            i + 1,
            pair[0],
            pair[1]
        );
    }
    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 4: five training rounds never lowered the corpus log-likelihood \
         (tolerance 1e-6; {:?})",
        elapsed
    );
}

// ===========================================================================
// Criterion 5: structure recovery on a low-noise synthetic corpus
// ===========================================================================

fn unit_accuracy_of(state: &PipelineState, truth: &GroundTruth) -> f64 {
    let mapping = map_patterns(&state.labels, truth).expect("mapping builds");
    pattern_accuracy(&state.labels, truth, &mapping)
        .expect("accuracy computes")
        .unit_accuracy
}

#[test]
fn criterion_05_recovers_planted_structure() {
    let start = Instant::now();
    let spec = SynthSpec {
        noise_sigma: 0.05,
        seed: 5,
        ..Default::default()
    };
    assert_eq!((spec.n_units, spec.n_words, spec.n_utterances), (5, 8, 200));
    let (corpus, truth) = generate(&spec).expect("corpus generates");
    let cfg = StageConfig {
        stage_i_iters: 10,
        stage_ii_iters: 10,
        stage_iii_iters: 0,
        init: InitConfig {
            scatter_threshold: 0.15,
            ..Default::default()
        },
        ..Default::default()
    };
    let state = run_full(&corpus, &cfg, spec.seed, None).expect("pipeline runs");

    let mapping = map_patterns(&state.labels, &truth).expect("mapping builds");
    let acc = pattern_accuracy(&state.labels, &truth, &mapping).expect("accuracy computes");
    assert!(
        acc.frame_purity >= 0.90,
        "frame purity {} < 0.90",
        acc.frame_purity
    );

    // Near-one-to-one: >= 4 of the 5 true units must be the majority target
    // of exactly one discovered pattern.
    let assignment = mapping.assignment();
    let mut per_unit: BTreeMap<u32, usize> = BTreeMap::new();
    for (_, unit) in &assignment {
        *per_unit.entry(*unit).or_insert(0) += 1;
    }
    let exactly_one = (0..spec.n_units as u32)
        .filter(|u| per_unit.get(u) == Some(&1))
        .count();
    assert!(
        exactly_one >= 4,
        "only {exactly_one} of 5 units map one-to-one (pattern->unit: {assignment:?})"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 300.0,
        "criterion 5 exceeded its five-minute budget: {elapsed:?}"
    );
    println!(
        "[PASS] criterion 5: frame purity {:.3} >= 0.90 and {exactly_one}/5 units matched \
         one-to-one ({elapsed:?})",
        acc.frame_purity
    );
}

// ===========================================================================
// Criterion 6: initialization and staging orderings
// ===========================================================================

#[test]
fn criterion_06_initialization_and_staging_orderings_hold() {
    let start = Instant::now();
    let tie = 0.005; // half an accuracy point
    let mut passes = 0;
    let mut detail = Vec::new();
    for seed in 0..5u64 {
        let spec = SynthSpec {
            n_utterances: 60,
            utt_len_range: (2, 4),
            noise_sigma: 0.08,
            seed,
            ..Default::default()
        };
        let (corpus, truth) = generate(&spec).expect("corpus generates");
        let cfg_with = |mode: InitMode, i: u32, ii: u32| StageConfig {
            stage_i_iters: i,
            stage_ii_iters: ii,
            stage_iii_iters: 0,
            init: InitConfig {
                scatter_threshold: 0.15,
                mode,
                ..Default::default()
            },
            // Exact decoding: beam pruning artifacts must not contaminate an
            // initialization-quality comparison (poorly initialized models
            // produce score spreads wide enough to starve a finite beam).
            decode: protolex::decode::DecodeConfig {
                beam: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let acc = |cfg: &StageConfig| -> f64 {
            let st = run_full(&corpus, cfg, seed, None).expect("pipeline runs");
            unit_accuracy_of(&st, &truth)
        };

        // (a) richer initialization never loses after stage I alone.
        let two = acc(&cfg_with(InitMode::TwoLevel, 8, 0));
        let one = acc(&cfg_with(InitMode::OneLevel, 8, 0));
        let rnd = acc(&cfg_with(InitMode::RandomIds, 8, 0));
        let ordering_a = two >= one - tie && one >= rnd - tie;

        // (b) staged refinement (I then II) never loses to jumping straight
        // into stage II with the same total budget.
        let staged = acc(&cfg_with(InitMode::TwoLevel, 8, 8));
        let joint_cfg = cfg_with(InitMode::TwoLevel, 0, 16);
        let joint_state = initialize(&corpus, &joint_cfg, seed)
            .and_then(|st| run_stage_ii(&corpus, st, &joint_cfg, None))
            .expect("joint run");
        let joint = unit_accuracy_of(&joint_state, &truth);
        let ordering_b = staged >= joint - tie;

        detail.push(format!(
            "seed {seed}: two {two:.3} one {one:.3} random {rnd:.3} | staged {staged:.3} \
             joint {joint:.3}"
        ));
        if ordering_a && ordering_b {
            passes += 1;
        }
    }
    assert!(
        passes >= 4,
        "orderings held on only {passes}/5 seeds:\n{}",
        detail.join("\n")
    );
    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 6: initialization and staging orderings held on {passes}/5 seeds \
         ({elapsed:?})"
    );
}

// ===========================================================================
// Criterion 7: lexical mining recovers a word the lexicon was denied
// ===========================================================================

#[test]
fn criterion_07_mining_restores_planted_word() {
    let start = Instant::now();
    // Seeds whose most frequent planted word is three units long.
    let base = |seed: u64| SynthSpec {
        n_units: 4,
        n_words: 5,
        n_utterances: 60,
        word_len_range: (2, 3),
        utt_len_range: (3, 6),
        noise_sigma: 0.05,
        feature_dim: 8,
        seed,
        ..Default::default()
    };
    let mut chosen = Vec::new();
    let mut seed = 0u64;
    while chosen.len() < 5 {
        let spec = base(seed);
        let (_, truth) = generate(&spec).expect("corpus generates");
        if truth.words[0].len() == 3 {
            chosen.push(seed);
        }
        seed += 1;
    }

    let mut successes = 0;
    let mut detail = Vec::new();
    for &seed in &chosen {
        let spec = base(seed);
        let (corpus, truth) = generate(&spec).expect("corpus generates");
        let cfg = StageConfig {
            stage_i_iters: 3,
            stage_ii_iters: 2,
            stage_iii_iters: 2,
            // The override that locks every multi-subword pattern out of the
            // harvested lexicon.
            min_count: 1_000_000,
            init: InitConfig {
                scatter_threshold: 0.15,
                ..Default::default()
            },
            mining: protolex::pipeline::MiningConfig {
                min_count: 5,
                min_entropy: 0.2,
                ..Default::default()
            },
            ..Default::default()
        };
        let st = initialize(&corpus, &cfg, seed).expect("initialization");
        let st = run_stage_i(&corpus, st, &cfg, None).expect("stage I");
        let st = run_stage_ii(&corpus, st, &cfg, None).expect("stage II");
        assert!(
            st.lexicon.iter().all(|w| w.subwords.len() == 1),
            "seed {seed}: the min-count override failed to exclude multi-subword words"
        );
        let st = run_stage_iii(&corpus, st, &cfg, None).expect("stage III");

        // Render the planted word through the discovered inventory and look
        // it up in the final lexicon.
        let mapping = map_patterns(&st.labels, &truth).expect("mapping builds");
        let mut by_unit: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (pattern, unit) in mapping.assignment() {
            by_unit.entry(unit).or_default().push(pattern);
        }
        let planted = &truth.words[0];
        let mut renderings: Vec<Vec<u32>> = vec![Vec::new()];
        for unit in planted {
            let options = by_unit.get(unit).cloned().unwrap_or_default();
            renderings = renderings
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |&p| {
                        let mut r = prefix.clone();
                        r.push(p);
                        r
                    })
                })
                .collect();
        }
        let found = renderings
            .iter()
            .any(|rendering| st.lexicon.id_of(rendering).is_some());
        detail.push(format!(
            "seed {seed}: planted {planted:?}, renderings {renderings:?}, found {found}, \
             lexicon size {}",
            st.lexicon.len()
        ));
        if found {
            successes += 1;
        }
    }
    assert!(
        successes >= 4,
        "planted word recovered on only {successes}/5 seeds:\n{}",
        detail.join("\n")
    );
    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 7: lexical mining restored the excluded planted word on \
         {successes}/5 seeds ({elapsed:?})"
    );
}

// ===========================================================================
// Criterion 8: consistency rises and the stopping rule is exact
// ===========================================================================

/// Checks the stopping contract on a stage-I ledger: no early row may reach
/// the threshold, and a run that stops under its cap must have reached it.
fn check_stop_rule(rows: &[protolex::pipeline::LedgerRow], cap: usize, threshold: f64) {
    assert!(!rows.is_empty());
    for row in &rows[..rows.len() - 1] {
        assert!(
            row.utt_consistency < threshold,
            "iteration {} reached {} but the run continued",
            row.iteration,
            row.utt_consistency
        );
    }
    if rows.len() < cap {
        assert!(
            rows.last().unwrap().utt_consistency >= threshold,
            "run stopped after {} of {cap} iterations below the threshold",
            rows.len()
        );
    }
}

#[test]
fn criterion_08_consistency_improves_and_stopping_rule_is_exact() {
    let start = Instant::now();
    let cfg = StageConfig {
        stage_i_iters: 12,
        stage_ii_iters: 0,
        stage_iii_iters: 0,
        train: TrainConfig {
            states: 3,
            em_iters: 2,
            ..Default::default()
        },
        init: InitConfig {
            scatter_threshold: 0.15,
            k_max_cap: 20,
            ..Default::default()
        },
        ..Default::default()
    };

    // A clean corpus: consistency must rise and the rule must fire early.
    let spec = SynthSpec {
        n_units: 4,
        n_words: 5,
        n_utterances: 50,
        word_len_range: (2, 3),
        utt_len_range: (3, 6),
        noise_sigma: 0.03,
        feature_dim: 8,
        seed: 3,
        ..Default::default()
    };
    let (corpus, _) = generate(&spec).expect("corpus generates");
    let state = run_full(&corpus, &cfg, spec.seed, None).expect("pipeline runs");
    let rows = &state.ledger;
    assert!(rows.iter().all(|r| r.stage == protolex::pipeline::Stage::I));
    assert!(
        rows.last().unwrap().utt_consistency >= rows[0].utt_consistency,
        "utterance consistency fell from {} to {}",
        rows[0].utt_consistency,
        rows.last().unwrap().utt_consistency
    );
    check_stop_rule(rows, 12, 0.995);
    assert!(
        rows.len() < 12,
        "expected early convergence on the clean corpus, ledger: {rows:?}"
    );

    // A noisy corpus under a short cap: the rule must not fire.
    let noisy = SynthSpec {
        noise_sigma: 0.3,
        ..spec
    };
    let (corpus2, _) = generate(&noisy).expect("corpus generates");
    let cfg2 = StageConfig {
        stage_i_iters: 2,
        ..cfg
    };
    let state2 = run_full(&corpus2, &cfg2, noisy.seed, None).expect("pipeline runs");
    check_stop_rule(&state2.ledger, 2, 0.995);
    assert_eq!(
        state2.ledger.len(),
        2,
        "noisy run should exhaust its cap, ledger: {:?}",
        state2.ledger
    );

    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 8: utterance consistency rose ({:.3} -> {:.3}) and the 0.995 \
         stopping rule fired exactly when reached ({elapsed:?})",
        rows[0].utt_consistency,
        rows.last().unwrap().utt_consistency
    );
}

// ===========================================================================
// Criterion 9: retrieval fusion endpoints and grid behavior
// ===========================================================================

fn entry_ids(list: &RankedList) -> Vec<&str> {
    list.entries.iter().map(|(id, _)| id.as_str()).collect()
}

#[test]
fn criterion_09_fusion_endpoints_and_grid_behave() {
    let start = Instant::now();
    let spec = SynthSpec {
        seed: 9,
        ..Default::default()
    };
    let (corpus, truth) = generate(&spec).expect("corpus generates");

    // The supervised system: ground-truth labels and generator models.
    let sup_labels = CorpusLabels {
        utterances: truth
            .utterances
            .iter()
            .map(|u| UtteranceLabels {
                utterance_id: u.utterance_id.clone(),
                tokens: u
                    .tokens
                    .iter()
                    .map(|t| Token {
                        word_pattern_id: t.word_id,
                        subword_ids: t.unit_ids.clone(),
                        start_frame: t.start_frame,
                        end_frame: t.end_frame,
                        subword_spans: t.unit_spans.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let sup_table = build_distance_table(&truth.models).expect("table builds");

    // The unsupervised system: pipeline-discovered labels and models.
    let cfg = StageConfig {
        stage_i_iters: 5,
        stage_ii_iters: 1,
        stage_iii_iters: 0,
        init: InitConfig {
            scatter_threshold: 0.15,
            ..Default::default()
        },
        ..Default::default()
    };
    let st = run_full(&corpus, &cfg, spec.seed, None).expect("pipeline runs");
    let uns_table = build_distance_table(&st.hmms).expect("table builds");

    // Twenty queries: each term is a planted word with its true occurrences
    // as examples.
    let occurrences: BTreeMap<u32, Vec<QueryExample>> = {
        let mut m: BTreeMap<u32, Vec<QueryExample>> = BTreeMap::new();
        for u in &truth.utterances {
            for t in &u.tokens {
                m.entry(t.word_id).or_default().push(QueryExample {
                    utterance_id: u.utterance_id.clone(),
                    start_frame: t.start_frame,
                    end_frame: t.end_frame,
                });
            }
        }
        m
    };
    let discovered_rendering = |ex: &QueryExample| -> Vec<u32> {
        st.labels
            .utterances
            .iter()
            .find(|u| u.utterance_id == ex.utterance_id)
            .map(|u| {
                u.subword_spans()
                    .into_iter()
                    .filter(|&(_, s, e)| s < ex.end_frame && e > ex.start_frame)
                    .map(|(id, _, _)| id)
                    .collect()
            })
            .unwrap_or_default()
    };

    let mut sup_queries = Vec::new();
    let mut uns_queries = Vec::new();
    for i in 0..20u32 {
        let term_id = format!("term{i:02}");
        let word = i % spec.n_words as u32;
        let examples: Vec<QueryExample> = occurrences[&word].iter().take(5).cloned().collect();
        assert!(!examples.is_empty(), "word {word} never occurs");
        sup_queries.push(Query {
            term_id: term_id.clone(),
            examples: examples.clone(),
            model_sequence: truth.words[word as usize].clone(),
        });
        let renderings: Vec<Vec<u32>> = examples.iter().map(&discovered_rendering).collect();
        uns_queries.push(Query {
            term_id,
            model_sequence: select_query_model(&renderings).expect("usable rendering"),
            examples,
        });
    }

    let d_s = search_all(&sup_queries, &sup_labels, &sup_table).expect("supervised search");
    let d_u = search_all(&uns_queries, &st.labels, &uns_table).expect("unsupervised search");

    // Relevance: an utterance is relevant to a term iff its word occurs there.
    let relevance = Relevance {
        relevant: (0..20u32)
            .map(|i| {
                let word = i % spec.n_words as u32;
                let utts: BTreeSet<String> = truth
                    .utterances
                    .iter()
                    .filter(|u| u.tokens.iter().any(|t| t.word_id == word))
                    .map(|u| u.utterance_id.clone())
                    .collect();
                (format!("term{i:02}"), utts)
            })
            .collect(),
    };

    // Endpoints reproduce the pure rankings, query by query.
    let f0 = fuse_and_rank(&d_s, &d_u, 0.0).expect("fusion at 0");
    let f1 = fuse_and_rank(&d_s, &d_u, 1.0).expect("fusion at 1");
    for ((z, u), o) in f0.iter().zip(d_u.iter()).zip(f1.iter()) {
        assert_eq!(
            entry_ids(z),
            entry_ids(u),
            "lambda=0 ranking differs from the unsupervised ranking for {}",
            z.term_id
        );
        let s = d_s.iter().find(|l| l.term_id == o.term_id).unwrap();
        assert_eq!(
            entry_ids(o),
            entry_ids(s),
            "lambda=1 ranking differs from the supervised ranking for {}",
            o.term_id
        );
    }

    let map_at = |lists: &[RankedList]| -> f64 {
        evaluate(lists, &relevance)
            .expect("evaluation runs")
            .mean_average_precision
    };
    let m0 = map_at(&f0);
    let m1 = map_at(&f1);
    assert!(m0 >= 0.8, "unsupervised MAP {m0} < 0.8");

    let grid_max = (0..=10)
        .map(|k| {
            let lists = fuse_and_rank(&d_s, &d_u, k as f64 / 10.0).expect("fusion on grid");
            map_at(&lists)
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        grid_max >= m0.max(m1) - 1e-9,
        "grid max {grid_max} fell below the endpoints {m0} / {m1}"
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "criterion 9 exceeded its two-minute budget: {elapsed:?}"
    );
    println!(
        "[PASS] criterion 9: fusion endpoints reproduce the pure rankings, unsupervised \
         MAP {m0:.3} >= 0.8, grid max {grid_max:.3} >= endpoints ({elapsed:?})"
    );
}

// ===========================================================================
// Criterion 10: the command-line chain is byte-deterministic
// ===========================================================================

fn run_cli(args: &[&str]) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_protolex"))
        .args(args)
        .output()
        .expect("binary launches");
    assert!(
        out.status.success(),
        "command failed: {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn chain(dir: &Path, workers: &str, spec: &Path, cfg: &Path, queries: Option<&Path>, rel: Option<&Path>) {
    std::fs::create_dir_all(dir).unwrap();
    let p = |n: &str| dir.join(n).to_str().unwrap().to_string();
    run_cli(&[
        "--workers",
        workers,
        "synth",
        "--out",
        &p("corpus.feat"),
        "--truth",
        &p("truth.json"),
        "--spec",
        spec.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    run_cli(&[
        "--workers",
        workers,
        "run",
        "--features",
        &p("corpus.feat"),
        "--workdir",
        &p("work"),
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    run_cli(&[
        "--workers",
        workers,
        "eval",
        "--labels",
        &p("work/final/labels.json"),
        "--truth",
        &p("truth.json"),
        "--out",
        &p("eval.json"),
    ]);
    if let (Some(q), Some(rel)) = (queries, rel) {
        run_cli(&[
            "--workers",
            workers,
            "std",
            "--hmms",
            &p("work/final/hmms.json"),
            "--labels",
            &p("work/final/labels.json"),
            "--queries",
            q.to_str().unwrap(),
            "--out",
            &p("ranked.json"),
            "--save-table",
            &p("table.bin"),
            "--relevance",
            rel.to_str().unwrap(),
            "--report-out",
            &p("report.json"),
        ]);
    }
}

const CHAIN_ARTIFACTS: &[&str] = &[
    "corpus.feat",
    "truth.json",
    "work/ledger.csv",
    "work/final/labels.json",
    "work/final/hmms.json",
    "work/final/lexicon.json",
    "work/final/lm.arpa",
    "work/final/state.json",
    "eval.json",
    "ranked.json",
    "table.bin",
    "report.json",
];

fn assert_chains_identical(a: &Path, b: &Path, what: &str) {
    for name in CHAIN_ARTIFACTS {
        let x = std::fs::read(a.join(name)).unwrap_or_else(|e| panic!("{name} in A: {e}"));
        let y = std::fs::read(b.join(name)).unwrap_or_else(|e| panic!("{name} in B: {e}"));
        assert!(x == y, "{what}: artifact {name} differs between runs");
    }
}

#[test]
fn criterion_10_cli_chain_is_byte_deterministic() {
    let start = Instant::now();
    let base = tempfile::tempdir().unwrap();
    let spec = base.path().join("spec.toml");
    std::fs::write(
        &spec,
        "n_units = 4\nn_words = 5\nn_utterances = 50\nfeature_dim = 8\n\
         word_len_range = [2, 3]\nutt_len_range = [3, 6]\nnoise_sigma = 0.05\n",
    )
    .unwrap();
    let cfg = base.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "stage_i_iters = 2\nstage_ii_iters = 2\nstage_iii_iters = 1\n\n\
         [train]\nstates = 3\nem_iters = 2\n\n\
         [init]\nscatter_threshold = 0.15\nk_max_cap = 20\n",
    )
    .unwrap();

    // First chain; its truth file then seeds the query and relevance inputs
    // shared by every chain.
    let dir_a = base.path().join("a");
    chain(&dir_a, "1", &spec, &cfg, None, None);
    let truth = GroundTruth::load(&dir_a.join("truth.json")).expect("truth loads");
    let queries: Vec<Query> = (0..5u32)
        .map(|w| Query {
            term_id: format!("q{w}"),
            examples: truth
                .utterances
                .iter()
                .flat_map(|u| {
                    u.tokens.iter().filter(|t| t.word_id == w).map(|t| QueryExample {
                        utterance_id: u.utterance_id.clone(),
                        start_frame: t.start_frame,
                        end_frame: t.end_frame,
                    })
                })
                .take(4)
                .collect(),
            model_sequence: Vec::new(),
        })
        .collect();
    assert!(queries.iter().all(|q| !q.examples.is_empty()));
    let queries_path = base.path().join("queries.json");
    std::fs::write(&queries_path, serde_json::to_string_pretty(&queries).unwrap()).unwrap();
    let relevance = Relevance {
        relevant: (0..5u32)
            .map(|w| {
                let utts: BTreeSet<String> = truth
                    .utterances
                    .iter()
                    .filter(|u| u.tokens.iter().any(|t| t.word_id == w))
                    .map(|u| u.utterance_id.clone())
                    .collect();
                (format!("q{w}"), utts)
            })
            .collect(),
    };
    let rel_path = base.path().join("rel.tsv");
    relevance.save(&rel_path).expect("relevance saves");

    // Finish chain A's retrieval step, then run B (same workers) and C
    // (eight workers) end to end.
    chain(&dir_a, "1", &spec, &cfg, Some(&queries_path), Some(&rel_path));
    let dir_b = base.path().join("b");
    chain(&dir_b, "1", &spec, &cfg, Some(&queries_path), Some(&rel_path));
    let dir_c = base.path().join("c");
    chain(&dir_c, "8", &spec, &cfg, Some(&queries_path), Some(&rel_path));

    assert_chains_identical(&dir_a, &dir_b, "same seed, same workers");
    assert_chains_identical(&dir_a, &dir_c, "workers 1 vs 8");

    let elapsed = start.elapsed();
    println!(
        "[PASS] criterion 10: synth/run/eval/std chain is byte-identical across repeated \
         runs and across --workers 1 vs 8 ({elapsed:?})"
    );
}
