//! MFCC feature extraction: 13 cepstra (log energy in slot 0) plus deltas
//! and delta-deltas from a mel filterbank, with optional corpus-level CMVN.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::{FeatureConfig, FeatureCorpus, FeatureSequence, Waveform};
use crate::error::{Error, Result};

const ENERGY_FLOOR: f32 = 1e-10;
const DELTA_CONTEXT: usize = 2;

/// Computes MFCC + delta + delta-delta features for one waveform.
///
/// CMVN is a corpus-level step; see [`extract_corpus`] and [`apply_cmvn`].
pub fn compute_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    let window = (w.sample_rate as f32 * cfg.window_ms / 1000.0).round() as usize;
    let shift = (w.sample_rate as f32 * cfg.shift_ms / 1000.0).round() as usize;
    if window == 0 || shift == 0 {
        return Err(Error::InvalidConfig {
            reason: "window and shift must be positive".into(),
        });
    }
    if w.samples.len() < window {
        return Err(Error::TooShortForWindow {
            frames: w.samples.len(),
            window,
        });
    }
    let n_frames = (w.samples.len() - window) / shift + 1;
    let n_ceps = cfg.n_ceps;

    let fft_size = window.next_power_of_two();
    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(fft_size);
    let filterbank = mel_filterbank(cfg.n_mels, fft_size, w.sample_rate);
    let dct = dct_matrix(n_ceps, cfg.n_mels);
    let hamming: Vec<f32> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f32::consts::PI * i as f32 / (window - 1) as f32).cos())
        .collect();

    let mut statics = vec![0.0f32; n_frames * n_ceps];
    let mut buf = vec![Complex::new(0.0f32, 0.0f32); fft_size];
    for t in 0..n_frames {
        let frame = &w.samples[t * shift..t * shift + window];
        let energy: f32 = frame.iter().map(|&x| x * x).sum();
        let log_energy = energy.max(ENERGY_FLOOR).ln();

        // Pre-emphasis then Hamming window.
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..window {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            let x = frame[i] - cfg.pre_emphasis * prev;
            buf[i] = Complex::new(x * hamming[i], 0.0);
        }
        fft.process(&mut buf);

        let n_bins = fft_size / 2 + 1;
        let power: Vec<f32> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();

        let out = &mut statics[t * n_ceps..(t + 1) * n_ceps];
        let mut mel_log = vec![0.0f32; cfg.n_mels];
        for (m, filt) in filterbank.iter().enumerate() {
            let e: f32 = filt.iter().map(|&(bin, wgt)| power[bin] * wgt).sum();
            mel_log[m] = e.max(ENERGY_FLOOR).ln();
        }
        for (k, row) in dct.iter().enumerate() {
            out[k] = row.iter().zip(mel_log.iter()).map(|(&d, &m)| d * m).sum();
        }
        out[0] = log_energy;
    }

    let deltas = regress_deltas(&statics, n_frames, n_ceps);
    let ddeltas = regress_deltas(&deltas, n_frames, n_ceps);

    let dim = n_ceps * 3;
    let mut data = vec![0.0f32; n_frames * dim];
    for t in 0..n_frames {
        data[t * dim..t * dim + n_ceps].copy_from_slice(&statics[t * n_ceps..(t + 1) * n_ceps]);
        data[t * dim + n_ceps..t * dim + 2 * n_ceps]
            .copy_from_slice(&deltas[t * n_ceps..(t + 1) * n_ceps]);
        data[t * dim + 2 * n_ceps..(t + 1) * dim]
            .copy_from_slice(&ddeltas[t * n_ceps..(t + 1) * n_ceps]);
    }
    FeatureSequence::from_frames(w.id.clone(), dim, cfg.shift_ms, data)
}

/// Extracts features for every waveform and applies corpus-level CMVN when
/// the config asks for it. Extraction runs in parallel; output order is the
/// input order.
pub fn extract_corpus(waveforms: &[Waveform], cfg: &FeatureConfig) -> Result<FeatureCorpus> {
    use rayon::prelude::*;
    let seqs: Vec<Result<FeatureSequence>> = waveforms
        .par_iter()
        .map(|w| compute_features(w, cfg))
        .collect();
    let mut utterances = Vec::with_capacity(seqs.len());
    for s in seqs {
        utterances.push(s?);
    }
    let mut corpus = FeatureCorpus::new(utterances)?;
    if cfg.cmvn {
        apply_cmvn(&mut corpus);
    }
    Ok(corpus)
}

/// Per-dimension mean/variance normalization over the whole corpus, in place.
pub fn apply_cmvn(corpus: &mut FeatureCorpus) {
    let dim = match corpus.dim() {
        Some(d) => d,
        None => return,
    };
    let mut mean = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    let mut n = 0u64;
    for utt in &corpus.utterances {
        for frame in utt.frames() {
            for (d, &x) in frame.iter().enumerate() {
                mean[d] += x as f64;
                sq[d] += (x as f64) * (x as f64);
            }
            n += 1;
        }
    }
    if n == 0 {
        return;
    }
    let inv_n = 1.0 / n as f64;
    let std: Vec<f64> = (0..dim)
        .map(|d| {
            mean[d] *= inv_n;
            (sq[d] * inv_n - mean[d] * mean[d]).max(1e-12).sqrt()
        })
        .collect();
    for utt in &mut corpus.utterances {
        let d = utt.dim;
        for (i, x) in utt.raw_mut().iter_mut().enumerate() {
            let k = i % d;
            *x = ((*x as f64 - mean[k]) / std[k]) as f32;
        }
    }
}

/// +-2 frame linear-regression deltas with edge frames repeated.
fn regress_deltas(values: &[f32], n_frames: usize, dim: usize) -> Vec<f32> {
    let denom: f32 = 2.0 * (1..=DELTA_CONTEXT).map(|n| (n * n) as f32).sum::<f32>();
    let mut out = vec![0.0f32; values.len()];
    let clamp = |t: isize| t.clamp(0, n_frames as isize - 1) as usize;
    for t in 0..n_frames {
        for d in 0..dim {
            let mut acc = 0.0f32;
            for n in 1..=DELTA_CONTEXT {
                let fwd = values[clamp(t as isize + n as isize) * dim + d];
                let bwd = values[clamp(t as isize - n as isize) * dim + d];
                acc += n as f32 * (fwd - bwd);
            }
            out[t * dim + d] = acc / denom;
        }
    }
    out
}

fn hz_to_mel(f: f32) -> f32 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f32) -> f32 {
    700.0 * (10f32.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters as sparse (bin, weight) lists over the power spectrum.
fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Vec<Vec<(usize, f32)>> {
    let nyquist = sample_rate as f32 / 2.0;
    let n_bins = fft_size / 2 + 1;
    let mel_max = hz_to_mel(nyquist);
    let centers: Vec<f32> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f32 / (n_mels + 1) as f32))
        .collect();
    let bin_hz = |b: usize| b as f32 * sample_rate as f32 / fft_size as f32;

    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..n_bins)
                .filter_map(|b| {
                    let f = bin_hz(b);
                    if f <= lo || f >= hi {
                        None
                    } else if f <= mid {
                        Some((b, (f - lo) / (mid - lo)))
                    } else {
                        Some((b, (hi - f) / (hi - mid)))
                    }
                })
                .collect()
        })
        .collect()
}

/// Orthonormal DCT-II rows (k x n_mels).
fn dct_matrix(n_ceps: usize, n_mels: usize) -> Vec<Vec<f32>> {
    let n = n_mels as f32;
    (0..n_ceps)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n).sqrt()
            } else {
                (2.0 / n).sqrt()
            };
            (0..n_mels)
                .map(|m| {
                    scale
                        * (std::f32::consts::PI * k as f32 * (m as f32 + 0.5) / n).cos()
                })
                .collect()
        })
        .collect()
}
