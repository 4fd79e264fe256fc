//! Humorous image captioning at desk scale.
//!
//! A feature-conditioned LSTM caption generator trained with hand-written
//! backpropagation, where each caption's loss is adjusted by its star count
//! (the "funny score" policy). Image features arrive precomputed; a seeded
//! synthetic corpus generator stands in for a real caption database.
//!
//! Module map:
//! - [`corpus`]: vocabulary, tokenization, corpus records, file formats, synthetic data.
//! - [`nn`]: dense kernels, cross-entropy, Adam, finite-difference gradient checking.
//! - [`captioner`]: the conditioned LSTM, BPTT, scoring, greedy and beam decoding.
//! - [`funny_score`]: star-thresholded loss transformation and batch objective.
//! - [`trainer`]: deterministic minibatch training, checkpoints, resume.
//! - [`eval`]: bucketed perplexity, candidate ranking, experiment grids.

pub mod captioner;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod funny_score;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
