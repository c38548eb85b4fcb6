//! Sequence-level language identification built from three interchangeable
//! attention mechanisms (self, performer, agent) feeding an attentive
//! statistical pooling classifier.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: dense f64 matrices, masked reductions, seeded sampling
//! - [`attention`]: multi-head projection and the three attention kernels,
//!   forward and backward
//! - [`head`]: statistical pooling, the linear classifier, and metrics
//! - [`training`]: cross-entropy loss, analytic backprop, Adam, the
//!   warmup/decay schedule, and the training loop
//! - [`dataio`]: embedding-sequence files, manifests, synthetic data,
//!   padded batching
//! - [`bench`]: wall-time scaling measurements and log-log slope fits
//!
//! Everything is deterministic given a seed; all floating point is 64-bit.

pub mod attention;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod head;
pub mod numeric;
pub mod training;

pub use error::{Error, Result};
pub use numeric::{BinaryMask, Matrix, SeededRng};
