//! Computation-efficient semi-supervised adaptation for multi-label ECG
//! classification.
//!
//! The crate bundles a compact convolution + self-attention backbone with
//! hand-written forward and backward passes, randomly deactivated low-rank
//! adapters, one-shot rank allocation, semi-supervised batch normalization,
//! the multi-label metric suite, ECG preprocessing and augmentation, and the
//! training loop that ties them together.

pub mod adapter;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod param;
pub mod rankalloc;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::{Matrix, SeededRng};
