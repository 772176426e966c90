//! Class-incremental learning by storing autoencoder-encoded episodes and
//! condensing them into centroid/variance concepts under a memory budget.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`nn`]: the fixed classifier and autoencoder, their
//!   losses, Adam, and gradient checking.
//! - [`data`]: IDX ingestion, synthetic glyph datasets, task scheduling.
//! - [`autoencoder`]: training autoencoders with a reconstruction + content
//!   loss and encoding task data into episodes.
//! - [`memory`]: the budgeted episode/concept store and its file format.
//! - [`rehearsal`]: reconstructed and filtered pseudo-image replay.
//! - [`trainer`]: per-increment classifier training and the experiment loop.
//! - [`config`]: experiment configuration parsing and validation.

mod bytes;
pub mod autoencoder;
pub mod config;
pub mod data;
pub mod error;
pub mod memory;
pub mod nn;
pub mod rehearsal;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use config::{parse_config, DatasetKind, ExperimentConfig, Variant};
pub use error::{Error, Result};
pub use tensor::{ImageBatch, Matrix, Scalar, Tensor4};
