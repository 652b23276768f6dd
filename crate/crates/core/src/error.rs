use thiserror::Error;

/// Errors surfaced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its documented domain
    /// (shape mismatch, too-small batch, invalid configuration, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or parameter became NaN/Inf during training.
    #[error("non-finite {quantity} in {phase} phase at iteration {iteration}")]
    NonFinite {
        phase: &'static str,
        iteration: usize,
        quantity: &'static str,
    },

    /// A serialized artifact could not be parsed.
    #[error("malformed file at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Stored and recomputed checksums disagree.
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for building a contract-violation error.
pub fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
