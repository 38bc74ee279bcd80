//! Feature archive: little-endian binary with header {magic "PFF1",
//! version u32, n_utts u32}, then per utterance {id_len u32, UTF-8 id,
//! n_frames u32, dim u32, row-major f32 frames}.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::corpus::{FeatureCorpus, FeatureSequence};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"PFF1";
const VERSION: u32 = 1;

/// Frame shift is not stored in the archive; loaded corpora use this value.
const DEFAULT_SHIFT_MS: f32 = 10.0;

pub fn save_corpus(corpus: &FeatureCorpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let werr = |e: std::io::Error| Error::io(path, e);

    w.write_all(&MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(corpus.len() as u32).to_le_bytes()).map_err(werr)?;
    for utt in &corpus.utterances {
        let id = utt.utterance_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(id).map_err(werr)?;
        w.write_all(&(utt.n_frames() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(&(utt.dim as u32).to_le_bytes()).map_err(werr)?;
        for &v in utt.raw() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_corpus(path: &Path) -> Result<FeatureCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadHeader {
            reason: format!("bad magic bytes {magic:?}"),
        });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let n_utts = read_u32(&mut r, "utterance count")?;

    let mut utterances = Vec::with_capacity(n_utts as usize);
    for _ in 0..n_utts {
        let id_len = read_u32(&mut r, "id length")? as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut r, &mut id_bytes, "utterance id")?;
        let id = String::from_utf8(id_bytes).map_err(|_| Error::BadHeader {
            reason: "utterance id is not UTF-8".into(),
        })?;
        let n_frames = read_u32(&mut r, "frame count")? as usize;
        let dim = read_u32(&mut r, "dimension")? as usize;
        let mut data = vec![0.0f32; n_frames * dim];
        let mut bytes = vec![0u8; n_frames * dim * 4];
        read_exact(&mut r, &mut bytes, "frame data")?;
        for (v, b) in data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        utterances.push(FeatureSequence::from_frames(id, dim, DEFAULT_SHIFT_MS, data)?);
    }
    FeatureCorpus::new(utterances)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        reason: format!("while reading {what}"),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
