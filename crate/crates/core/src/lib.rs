//! Unsupervised discovery of two-level acoustic patterns from unlabeled
//! speech: subword-like HMMs, a word-like pattern lexicon, and an N-gram
//! language model are learned jointly by an initialization step followed by
//! cascaded stages of iterative optimization, then applied to
//! query-by-example spoken term detection.

pub mod corpus;
pub mod decode;
pub mod detect;
pub mod error;
pub mod eval;
pub mod hmm;
pub mod init;
pub mod labels;
pub mod ngram;
pub mod pattree;
pub mod pipeline;
pub mod synth;
pub mod lexicon;

pub use error::{Error, Result};
