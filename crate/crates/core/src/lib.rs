//! Differentially private dataset distillation.
//!
//! The pipeline has two decoupled stages. The sampling stage touches the
//! private data, clips and aggregates random-network features, adds
//! calibrated Gaussian noise and seals the results into a [`dos::SignalStore`].
//! The optimization stage distills synthetic images from that store alone,
//! so it can run for as long as needed at no extra privacy cost. Optionally,
//! signals are projected onto a PCA subspace learned from auxiliary data
//! before noise is added, which shrinks the noise the signals carry.

pub mod analysis;
pub mod augment;
pub mod config;
pub mod data;
pub mod dos;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod numerics;
pub mod privacy;
pub mod ser;
pub mod verify;

pub use error::{Error, Result};
pub use numerics::{RngStream, Tensor};
