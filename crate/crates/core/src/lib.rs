//! Adaptive x-vector speaker embeddings.
//!
//! Frame-level TDNN layers with optional adaptive convolution (filters mixed
//! per utterance from a learned pool) and adaptive batch normalization
//! (scale and shift regressed per utterance), trained with cross-entropy,
//! followed by an LDA + PLDA scoring backend and verification metrics.

pub mod backend;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod records;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
