//! Periodic graph generation with a disentangled variational autoencoder.
//!
//! * [`pgraph`]: exact 0/1 algebra for periodic graphs (assembly, decomposition,
//!   canonical ordering, statistics).
//! * [`datagen`]: synthetic triangle/grid/hexagon corpora and the line-delimited
//!   dataset format.
//! * [`tensor`]: a small reverse-mode autodiff tape over dense `f64` matrices.
//! * [`model`], [`objective`], [`train`]: the encoder/decoder network, its
//!   three-part loss and the optimizer loop with checkpoints.
//! * [`eval`]: histogram KL metrics, uniqueness/novelty, latent traversal and
//!   ordering-stability studies.

pub mod datagen;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod pgraph;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use pgraph::{Decomposition, PeriodicGraph, UnitKind};
