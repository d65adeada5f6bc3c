//! Pyramid Mixer: an all-MLP sequential recommender.
//!
//! The encoder stacks mixer layers. Each layer runs a cross-behavior mixer
//! (along the sequence) and a cross-feature mixer (along the channels) in
//! parallel on the same input, blends them with a per-position sigmoid
//! gate, and shortens the sequence with a strided convolution before the
//! next layer. The per-layer maps form a pyramid of short- to long-period
//! interest representations that a pooled linear head turns into
//! full-vocabulary item scores.
//!
//! Modules:
//! - [`tensor`]: dense tensors and reverse-mode autodiff.
//! - [`model`]: configuration, parameters and the forward pass.
//! - [`data`]: ingestion, 5-core filtering, leave-one-out splits, batching.
//! - [`train`]: loss, Adam, the epoch loop and checkpoints.
//! - [`eval`]: ranking metrics, analytic cost accounting, ablations.
//! - [`config`]: the JSON run configuration used by the `pymx` CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
