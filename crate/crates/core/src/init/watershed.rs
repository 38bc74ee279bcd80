//! Watershed transform of the filtered self-similarity surface. Basins are
//! grown from regional minima of the negated surface by priority flooding;
//! subword boundaries are the points where the basin label changes along
//! the main diagonal.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::dotplot::SimilarityMatrix;

/// Neighbor offsets for 8-connectivity, in fixed raster order.
const NEIGHBORS: [(i64, i64); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Sorted interior boundary indices: index `i` is reported when diagonal
/// cells (i-1,i-1) and (i,i) fall in different watershed basins. An index
/// partitions the segment as [0,i) | [i,n).
pub fn watershed_subword_boundaries(m: &SimilarityMatrix) -> Vec<usize> {
    let labels = basin_labels(m);
    let n = m.n;
    let mut out = Vec::new();
    for i in 1..n {
        if labels[i * n + i] != labels[(i - 1) * n + (i - 1)] {
            out.push(i);
        }
    }
    out
}

#[derive(PartialEq)]
struct FloodEntry {
    height: f64,
    seq: u64,
    idx: usize,
}

impl Eq for FloodEntry {}

impl PartialOrd for FloodEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FloodEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.height
            .total_cmp(&other.height)
            .then(self.seq.cmp(&other.seq))
    }
}

/// Per-cell basin labels (row-major) from priority-flooding the negated
/// surface. Regional minimum plateaus are found first (equal-height
/// components with no strictly lower 8-neighbor) and numbered in raster
/// order of their first cell; the flood then claims each remaining cell for
/// the basin that reaches it first, popping the lowest frontier cell each
/// step with ties broken by insertion order.
pub fn basin_labels(m: &SimilarityMatrix) -> Vec<u32> {
    let n = m.n;
    let total = n * n;
    let height = |idx: usize| -m.get(idx / n, idx % n);

    // Regional minima via plateau flood fill.
    let mut label = vec![u32::MAX; total];
    let mut visited = vec![false; total];
    let mut n_basins: u32 = 0;
    let mut seeds: Vec<usize> = Vec::new();
    for start in 0..total {
        if visited[start] {
            continue;
        }
        let h0 = height(start);
        let mut component = vec![start];
        let mut stack = vec![start];
        visited[start] = true;
        let mut is_minimum = true;
        while let Some(idx) = stack.pop() {
            let (i, j) = ((idx / n) as i64, (idx % n) as i64);
            for (di, dj) in NEIGHBORS {
                let (ii, jj) = (i + di, j + dj);
                if ii < 0 || jj < 0 || ii >= n as i64 || jj >= n as i64 {
                    continue;
                }
                let nb = (ii as usize) * n + jj as usize;
                let hn = height(nb);
                if hn < h0 {
                    is_minimum = false;
                } else if hn == h0 && !visited[nb] {
                    visited[nb] = true;
                    component.push(nb);
                    stack.push(nb);
                }
            }
        }
        if is_minimum {
            component.sort_unstable();
            for &idx in &component {
                label[idx] = n_basins;
            }
            seeds.extend(component);
            n_basins += 1;
        }
    }

    // Flood outward from the minima.
    let mut heap: BinaryHeap<Reverse<FloodEntry>> = BinaryHeap::new();
    let mut seq: u64 = 0;
    for &idx in &seeds {
        heap.push(Reverse(FloodEntry {
            height: height(idx),
            seq,
            idx,
        }));
        seq += 1;
    }
    while let Some(Reverse(entry)) = heap.pop() {
        let (i, j) = ((entry.idx / n) as i64, (entry.idx % n) as i64);
        for (di, dj) in NEIGHBORS {
            let (ii, jj) = (i + di, j + dj);
            if ii < 0 || jj < 0 || ii >= n as i64 || jj >= n as i64 {
                continue;
            }
            let nb = (ii as usize) * n + jj as usize;
            if label[nb] == u32::MAX {
                label[nb] = label[entry.idx];
                heap.push(Reverse(FloodEntry {
                    height: height(nb),
                    seq,
                    idx: nb,
                }));
                seq += 1;
            }
        }
    }
    label
}
