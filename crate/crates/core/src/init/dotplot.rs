//! Self-similarity dotplot over a segment of frames: cosine similarity on
//! the static cepstral coefficients, then a Gaussian smoothing filter.

/// Dense symmetric n-by-n similarity surface.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize) -> Self {
        SimilarityMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }
}

/// Builds the smoothed self-similarity dotplot for `frames`, using only the
/// first `static_dim` coefficients of each frame.
///
/// The raw surface has cosine similarities off the diagonal and exact 1 on
/// it; the filter then blends the diagonal like any other cell, which is what
/// lets the watershed see basin structure along it.
pub fn build_dotplot(frames: &[&[f32]], static_dim: usize) -> SimilarityMatrix {
    gaussian_smooth(&raw_dotplot(frames, static_dim))
}

/// Unfiltered self-similarity: entry (i,j) is the cosine similarity of the
/// first `static_dim` coefficients of frames i and j; the diagonal is 1; a
/// pair where either frame has zero norm gets 0.
pub fn raw_dotplot(frames: &[&[f32]], static_dim: usize) -> SimilarityMatrix {
    let n = frames.len();
    let mut raw = SimilarityMatrix::new(n);
    let norms: Vec<f64> = frames
        .iter()
        .map(|f| {
            f[..static_dim]
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    for i in 0..n {
        raw.set(i, i, 1.0);
        for j in i + 1..n {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let dot: f64 = frames[i][..static_dim]
                    .iter()
                    .zip(frames[j][..static_dim].iter())
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                dot / (norms[i] * norms[j])
            };
            raw.set(i, j, v);
            raw.set(j, i, v);
        }
    }
    raw
}

const SMOOTH_RADIUS: i64 = 2;
const SMOOTH_SIGMA: f64 = 1.0;

/// 2-D Gaussian smoothing with border renormalization: at each cell the
/// kernel is restricted to in-bounds taps and divided by their weight sum.
/// Only the upper triangle is computed; the lower is mirrored.
fn gaussian_smooth(m: &SimilarityMatrix) -> SimilarityMatrix {
    let n = m.n as i64;
    let mut kernel = [[0.0f64; (2 * SMOOTH_RADIUS + 1) as usize]; (2 * SMOOTH_RADIUS + 1) as usize];
    for (di, row) in kernel.iter_mut().enumerate() {
        for (dj, w) in row.iter_mut().enumerate() {
            let di = di as i64 - SMOOTH_RADIUS;
            let dj = dj as i64 - SMOOTH_RADIUS;
            *w = (-((di * di + dj * dj) as f64) / (2.0 * SMOOTH_SIGMA * SMOOTH_SIGMA)).exp();
        }
    }
    let mut out = SimilarityMatrix::new(m.n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for di in -SMOOTH_RADIUS..=SMOOTH_RADIUS {
                let ii = i + di;
                if ii < 0 || ii >= n {
                    continue;
                }
                for dj in -SMOOTH_RADIUS..=SMOOTH_RADIUS {
                    let jj = j + dj;
                    if jj < 0 || jj >= n {
                        continue;
                    }
                    let w = kernel[(di + SMOOTH_RADIUS) as usize][(dj + SMOOTH_RADIUS) as usize];
                    acc += w * m.get(ii as usize, jj as usize);
                    wsum += w;
                }
            }
            let v = acc / wsum;
            out.set(i as usize, j as usize, v);
            out.set(j as usize, i as usize, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn owned(frames: &[Vec<f32>]) -> Vec<&[f32]> {
        frames.iter().map(|f| f.as_slice()).collect()
    }

    #[test]
    fn raw_diagonal_is_one_even_for_zero_frames() {
        let frames = vec![vec![0.0f32; 13]; 6];
        let m = raw_dotplot(&owned(&frames), 13);
        for i in 0..6 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..6 {
                if i != j {
                    assert_eq!(m.get(i, j), 0.0, "zero-norm pair must score 0");
                }
            }
        }
    }

    #[test]
    fn identical_nonzero_frames_give_all_ones_before_and_after_filtering() {
        let frames = vec![vec![1.0f32, -2.0, 0.5]; 9];
        let raw = raw_dotplot(&owned(&frames), 3);
        let smoothed = build_dotplot(&owned(&frames), 3);
        for i in 0..9 {
            for j in 0..9 {
                assert!((raw.get(i, j) - 1.0).abs() < 1e-12);
                // A renormalized average of a constant surface is constant.
                assert!((smoothed.get(i, j) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_is_exactly_symmetric() {
        let frames: Vec<Vec<f32>> = (0..20)
            .map(|i| {
                (0..13)
                    .map(|d| ((i * 13 + d) as f32 * 0.37).sin())
                    .collect()
            })
            .collect();
        let m = build_dotplot(&owned(&frames), 13);
        for i in 0..20 {
            for j in 0..20 {
                assert_eq!(m.get(i, j), m.get(j, i), "asymmetry at ({i},{j})");
            }
        }
    }

    #[test]
    fn values_bounded_by_one_in_magnitude() {
        let frames: Vec<Vec<f32>> = (0..15)
            .map(|i| (0..13).map(|d| ((i + d) as f32).cos()).collect())
            .collect();
        let m = build_dotplot(&owned(&frames), 13);
        for i in 0..15 {
            for j in 0..15 {
                assert!(m.get(i, j) <= 1.0 + 1e-12);
                assert!(m.get(i, j) >= -1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn two_homogeneous_halves_show_block_structure() {
        // 10 frames near +e0, then 10 near +e1: within-block similarity
        // after smoothing should exceed cross-block similarity.
        let mut frames = Vec::new();
        for i in 0..20 {
            let mut f = vec![0.0f32; 13];
            if i < 10 {
                f[0] = 1.0;
                f[1] = 0.05 * (i as f32 % 3.0);
            } else {
                f[1] = 1.0;
                f[0] = 0.05 * (i as f32 % 3.0);
            }
            frames.push(f);
        }
        let m = build_dotplot(&owned(&frames), 13);
        let within = m.get(2, 7);
        let across = m.get(2, 15);
        assert!(within > across + 0.3, "within {within} across {across}");
    }

    #[test]
    fn only_static_dims_participate() {
        // Frames agree on the first 3 dims, wildly differ beyond: with
        // static_dim = 3 the raw similarity is 1 everywhere.
        let frames: Vec<Vec<f32>> = (0..8)
            .map(|i| {
                let mut f = vec![1.0f32, 2.0, 3.0];
                f.extend((0..10).map(|d| ((i * d) as f32).sin() * 100.0));
                f
            })
            .collect();
        let m = build_dotplot(&owned(&frames), 3);
        for i in 0..8 {
            for j in 0..8 {
                assert!((m.get(i, j) - 1.0).abs() < 1e-9);
            }
        }
    }
}
