//! Global k-means with k-means++ seeding and automatic cluster-count
//! selection via the within/between scatter ratio.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const KMEANS_MAX_ITERS: usize = 50;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KRange {
    pub min: usize,
    pub max: usize,
}

impl KRange {
    pub fn new(min: usize, max: usize) -> Self {
        KRange { min, max }
    }
}

#[derive(Debug, Clone)]
pub struct ClusteringResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// (k, within/between scatter ratio) for every k evaluated, ascending in k.
    pub scatter_ratio_curve: Vec<(usize, f64)>,
}

/// Runs k-means over the k range and picks the smallest k whose scatter
/// ratio falls below `scatter_threshold`; if none does, picks the elbow of
/// the ratio curve (maximum second difference).
///
/// The scan stops as soon as the threshold rule fires, so the curve may
/// cover only a prefix of the range.
pub fn select_k_and_cluster(
    vectors: &[Vec<f64>],
    k_range: KRange,
    scatter_threshold: f64,
    seed: u64,
) -> Result<ClusteringResult> {
    if k_range.min < 1 || k_range.min > k_range.max {
        return Err(Error::InvalidConfig {
            reason: format!("bad k range {}..{}", k_range.min, k_range.max),
        });
    }
    if vectors.len() < k_range.max {
        return Err(Error::TooFewVectors {
            needed: k_range.max,
            k_max: k_range.max,
            got: vectors.len(),
        });
    }

    let mut curve = Vec::new();
    let mut runs = Vec::new();
    for k in k_range.min..=k_range.max {
        let run = kmeans_fixed_k(vectors, k, seed);
        let ratio = scatter_ratio(vectors, &run);
        curve.push((k, ratio));
        runs.push(run);
        if ratio < scatter_threshold {
            break;
        }
    }

    let chosen_idx = match curve.iter().position(|&(_, r)| r < scatter_threshold) {
        Some(i) => i,
        None => elbow_index(&curve),
    };
    let chosen = runs.swap_remove(chosen_idx);
    Ok(ClusteringResult {
        k: curve[chosen_idx].0,
        assignments: chosen.assignments,
        centroids: chosen.centroids,
        scatter_ratio_curve: curve,
    })
}

/// Largest second difference of the ratio curve; ends fall back sensibly.
fn elbow_index(curve: &[(usize, f64)]) -> usize {
    if curve.len() < 3 {
        return curve.len() - 1;
    }
    let mut best = 1;
    let mut best_dd = f64::NEG_INFINITY;
    for i in 1..curve.len() - 1 {
        let dd = curve[i - 1].1 - 2.0 * curve[i].1 + curve[i + 1].1;
        if dd > best_dd {
            best_dd = dd;
            best = i;
        }
    }
    best
}

pub struct KMeansRun {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster scatter after each iteration; non-increasing.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding; deterministic under the seed.
pub fn kmeans_fixed_k(vectors: &[Vec<f64>], k: usize, seed: u64) -> KMeansRun {
    assert!(k >= 1 && vectors.len() >= k);
    let dim = vectors[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut centroids = plus_plus_seeds(vectors, k, &mut rng);
    let mut assignments = vec![0usize; vectors.len()];
    let mut inertia_trace = Vec::new();

    for _ in 0..KMEANS_MAX_ITERS {
        // Assignment step (parallel map, deterministic: per-point result only).
        use rayon::prelude::*;
        let pairs: Vec<(usize, f64)> = vectors
            .par_iter()
            .map(|v| nearest(v, &centroids))
            .collect();
        let mut inertia = 0.0;
        for (i, (a, d2)) in pairs.into_iter().enumerate() {
            assignments[i] = a;
            inertia += d2;
        }
        inertia_trace.push(inertia);

        // Update step in fixed input order.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(assignments.iter()) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            let inv = 1.0 / counts[c] as f64;
            let mut shift = 0.0;
            for d in 0..dim {
                let new = sums[c][d] * inv;
                shift += (new - centroids[c][d]).powi(2);
                centroids[c][d] = new;
            }
            movement = movement.max(shift.sqrt());
        }
        if movement < KMEANS_TOL {
            break;
        }
    }

    // Final assignment against converged centroids.
    for (i, v) in vectors.iter().enumerate() {
        assignments[i] = nearest(v, &centroids).0;
    }
    KMeansRun {
        assignments,
        centroids,
        inertia_trace,
    }
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(v, cen);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn plus_plus_seeds(vectors: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(vectors[rng.random_range(0..vectors.len())].clone());
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All points coincide with a centroid; any choice is equivalent.
            rng.random_range(0..vectors.len())
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = vectors.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(vectors[next].clone());
        for (i, v) in vectors.iter().enumerate() {
            let d = sq_dist(v, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Within-cluster total scatter over between-cluster total scatter.
/// A perfect clustering (zero within) gives 0; a degenerate one-cluster
/// geometry (zero between, nonzero within) gives +inf.
pub fn scatter_ratio(vectors: &[Vec<f64>], run: &KMeansRun) -> f64 {
    let dim = vectors[0].len();
    let n = vectors.len() as f64;
    let mut global = vec![0.0f64; dim];
    for v in vectors {
        for (g, &x) in global.iter_mut().zip(v.iter()) {
            *g += x;
        }
    }
    for g in global.iter_mut() {
        *g /= n;
    }
    let mut within = 0.0;
    for (v, &a) in vectors.iter().zip(run.assignments.iter()) {
        within += sq_dist(v, &run.centroids[a]);
    }
    let mut counts = vec![0usize; run.centroids.len()];
    for &a in &run.assignments {
        counts[a] += 1;
    }
    let mut between = 0.0;
    for (c, cen) in run.centroids.iter().enumerate() {
        between += counts[c] as f64 * sq_dist(cen, &global);
    }
    if within == 0.0 {
        0.0
    } else if between == 0.0 {
        f64::INFINITY
    } else {
        within / between
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Three tight clouds with pairwise-equidistant centers 10 apart.
    fn three_clouds(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let s = 10.0 / std::f64::consts::SQRT_2;
        let centers = [
            vec![s, 0.0, 0.0],
            vec![0.0, s, 0.0],
            vec![0.0, 0.0, s],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vectors = Vec::new();
        let mut truth = Vec::new();
        for (ci, c) in centers.iter().enumerate() {
            for _ in 0..per {
                let v: Vec<f64> = c
                    .iter()
                    .map(|&x| x + 0.01 * (rng.random::<f64>() * 2.0 - 1.0))
                    .collect();
                vectors.push(v);
                truth.push(ci);
            }
        }
        (vectors, truth)
    }

    #[test]
    fn three_separated_clouds_select_k_3_and_match_nearest_center_oracle() {
        let (vectors, truth) = three_clouds(30, 7);
        let res = select_k_and_cluster(&vectors, KRange::new(2, 10), 0.5, 42).unwrap();
        assert_eq!(res.k, 3);
        // Oracle: assignment must equal nearest-true-center labeling up to
        // a permutation of cluster ids.
        let mut mapping = std::collections::HashMap::new();
        for (&a, &t) in res.assignments.iter().zip(truth.iter()) {
            let m = mapping.entry(a).or_insert(t);
            assert_eq!(*m, t, "cluster {a} spans two clouds");
        }
        assert_eq!(mapping.len(), 3);
    }

    #[test]
    fn identical_vectors_select_k_min() {
        let vectors = vec![vec![1.0, 2.0]; 40];
        let res = select_k_and_cluster(&vectors, KRange::new(2, 5), 0.5, 1).unwrap();
        assert_eq!(res.k, 2);
        let first = res.assignments[0];
        assert!(res.assignments.iter().all(|&a| a == first));
    }

    #[test]
    fn same_seed_gives_identical_result() {
        let (vectors, _) = three_clouds(20, 3);
        let a = select_k_and_cluster(&vectors, KRange::new(2, 8), 0.5, 99).unwrap();
        let b = select_k_and_cluster(&vectors, KRange::new(2, 8), 0.5, 99).unwrap();
        assert_eq!(a.k, b.k);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.scatter_ratio_curve, b.scatter_ratio_curve);
    }

    #[test]
    fn fewer_vectors_than_k_max_is_an_error() {
        let vectors = vec![vec![0.0]; 3];
        assert!(matches!(
            select_k_and_cluster(&vectors, KRange::new(2, 5), 0.5, 0),
            Err(Error::TooFewVectors { .. })
        ));
    }

    #[test]
    fn within_scatter_is_non_increasing_over_iterations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vectors: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.random::<f64>() * 5.0).collect())
            .collect();
        let run = kmeans_fixed_k(&vectors, 6, 5);
        for w in run.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn converged_centroids_are_cluster_means() {
        let (vectors, _) = three_clouds(25, 5);
        let run = kmeans_fixed_k(&vectors, 3, 2);
        let dim = vectors[0].len();
        for c in 0..3 {
            let members: Vec<&Vec<f64>> = vectors
                .iter()
                .zip(run.assignments.iter())
                .filter(|(_, &a)| a == c)
                .map(|(v, _)| v)
                .collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                let mean: f64 =
                    members.iter().map(|v| v[d]).sum::<f64>() / members.len() as f64;
                assert!((mean - run.centroids[c][d]).abs() < 1e-9);
            }
        }
    }
}
