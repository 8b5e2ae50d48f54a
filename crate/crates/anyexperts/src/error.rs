//! Crate-wide error type.

/// Errors produced by any operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape mismatch between operands; carries both shapes.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dim {
        op: String,
        lhs: String,
        rhs: String,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value or other numeric failure.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An internal invariant that should be unreachable under valid config.
    #[error("internal invariant violated: {0}")]
    Internal(String),

    /// Checkpoint encode/decode failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(op: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dim {
            op: op.to_string(),
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
