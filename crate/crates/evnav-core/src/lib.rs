//! Event-camera gate detection and closed-loop navigation.
//!
//! The crate covers the full pipeline: raw event streams are cut into
//! fixed-count windows, aggregated into two-channel sparse histograms, pushed
//! through a submanifold sparse CNN with an optional convolutional GRU, and
//! regressed to a grid of gate bounding boxes. Around that sit a synthetic
//! event-data generator, a detection-metric evaluator, a staged training
//! loop, and a kinematic drone simulator closing the loop with an
//! image-based velocity controller.
//!
//! All numeric kernels are generic over [`Scalar`] (`f32` or `f64`): training
//! and inference run in single precision, while gradient and oracle tests run
//! the same code paths in double precision.

pub mod data;
pub mod datagen;
pub mod detect;
pub mod error;
pub mod eval;
pub mod event;
pub mod gru;
pub mod model;
pub mod navsim;
pub mod nn;
pub mod scalar;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Precision used by the shipped pipeline (training, checkpoints, CLI).
pub type Real = f32;

/// Sparse tensor in pipeline precision.
pub type SparseTensor32 = sparse::SparseTensor<Real>;
/// Sparse tensor in double precision, used by oracle and gradient tests.
pub type SparseTensor64 = sparse::SparseTensor<f64>;
/// The deployable network in pipeline precision.
pub type Model = model::Network<Real>;
