//! Minimal RIFF/WAVE reader and writer for PCM 16-bit mono files.

use std::io::Read;
use std::path::Path;

use crate::corpus::Waveform;
use crate::error::{Error, Result};

const PCM_SCALE: f32 = 32768.0;

/// Loads a PCM 16-bit mono WAV file. Samples are scaled to [-1, 1] and the
/// utterance id is the file stem.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;

    let bad = |reason: &str| Error::BadWav {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        let body_end = off + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::Truncated {
                reason: format!("chunk {} runs past end of file", String::from_utf8_lossy(id)),
            });
        }
        let body = &bytes[off + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(bad("fmt chunk too short"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        off = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| bad("missing fmt chunk"))?;
    if channels != 1 {
        return Err(Error::UnsupportedChannels { channels });
    }
    if format != 1 || bits != 16 {
        return Err(Error::UnsupportedEncoding {
            reason: format!("format tag {format}, {bits}-bit (expected PCM 16-bit)"),
        });
    }
    let data = data.ok_or_else(|| bad("missing data chunk"))?;
    if data.is_empty() {
        return Err(bad("empty data chunk"));
    }

    let samples: Vec<f32> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / PCM_SCALE)
        .collect();

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "utt".to_string());

    Ok(Waveform {
        samples,
        sample_rate: rate,
        id,
    })
}

/// Writes a PCM 16-bit mono WAV file; samples are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let n = samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
