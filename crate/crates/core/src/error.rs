//! Error type shared across the library.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable wav file {path}: {reason}")]
    BadWav { path: PathBuf, reason: String },

    #[error("unsupported channel count: {channels} (expected mono)")]
    UnsupportedChannels { channels: u16 },

    #[error("unsupported wav encoding: {reason}")]
    UnsupportedEncoding { reason: String },

    #[error("bad header: {reason}")]
    BadHeader { reason: String },

    #[error("archive version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {reason}")]
    Truncated { reason: String },

    #[error("waveform of {frames} samples is shorter than one analysis window ({window} samples)")]
    TooShortForWindow { frames: usize, window: usize },

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("duplicate utterance id: {id}")]
    DuplicateUtteranceId { id: String },

    #[error("need at least {needed} vectors for k up to {k_max}, got {got}")]
    TooFewVectors { needed: usize, k_max: usize, got: usize },

    #[error("alignment infeasible for {utterance_id}: chain of {chain_len} states cannot fit {frames} frames")]
    InfeasibleAlignment {
        utterance_id: String,
        chain_len: usize,
        frames: usize,
    },

    #[error("no feasible decoding path for {utterance_id}: {frames} frames is shorter than the shortest lexicon word")]
    NoDecodePath { utterance_id: String, frames: usize },

    #[error("empty labels: {reason}")]
    EmptyLabels { reason: String },

    #[error("utterance sets differ: {reason}")]
    UtteranceSetMismatch { reason: String },

    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },

    #[error("unknown subword id {id} (inventory size {inventory})")]
    UnknownSubword { id: u32, inventory: u32 },

    #[error("query/utterance key sets differ between the two distance tables: {reason}")]
    FusionKeyMismatch { reason: String },

    #[error("malformed {what} file {path}: {reason}")]
    Malformed {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
