//! Bias-resilient representation learning on a small self-contained
//! numerical stack: a reverse-mode tape over dense f64 tensors, the
//! three-network adversarial architecture, the correlation-based
//! adversarial objective with its baselines, a synthetic blob-image
//! benchmark with a Bayes oracle, and statistical-independence metrics.
//!
//! Everything is deterministic given the configured seeds; reference
//! execution is single-threaded.

mod bytes;

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// FNV-1a 64 fingerprint of arbitrary bytes (dataset checksums, config
/// hashes in provenance headers).
pub fn fingerprint(bytes: &[u8]) -> u64 {
    bytes::fnv1a64(bytes)
}
