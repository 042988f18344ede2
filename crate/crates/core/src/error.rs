use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, unparseable architecture strings,
    /// out-of-range hyperparameters, malformed permutations.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. running backward twice over the same tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Violated internal invariant (broken tape linkage and the like).
    #[error("internal error: {0}")]
    Internal(String),

    /// Malformed input file; `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Training produced a non-finite value at the given sequence step.
    /// Divergence is reportable data, not a crash: callers flag the run and
    /// keep the last good checkpoint.
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
