//! Mixed-precision post-training quantization for small transformer models.
//!
//! The crate measures how sensitive each transformer layer is to degradation
//! (canonical-correlation, magnitude-pruning and weight-perturbation
//! analyzers), turns those sensitivities into a per-layer 16/8/4-bit plan,
//! quantizes the weights per output channel and reports compression and
//! accuracy or perplexity drop.
//!
//! A minimal trainable transformer and deterministic synthetic tasks are
//! included so the full pipeline can run on a single CPU core.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors, seeded RNG and the small numeric kernels
//! - [`model`]: transformer forward/backward, datasets, trainer
//! - [`model_io`]: the MPQW binary weight container and memory accounting
//! - [`quant`]: affine per-channel quantization and plan application
//! - [`sensitivity`]: CMPQ, PMPQ and TDMPQ layer sensitivity analyzers
//! - [`allocate`]: k-means tiering and budgeted bit allocation
//! - [`pipeline`]: configs, ingestion, end-to-end runs and reports

pub mod allocate;
pub mod error;
pub mod model;
pub mod model_io;
pub mod pipeline;
pub mod quant;
pub mod sensitivity;
pub mod tensor;

pub use error::{Error, Result};

/// Toolkit version recorded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
