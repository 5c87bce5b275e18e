//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CitrusError>;

#[derive(Debug, thiserror::Error)]
pub enum CitrusError {
    /// A caller-supplied argument is malformed (shape mismatch, out-of-range
    /// mode, unknown option).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An input violates a documented invariant (asymmetric matrix, negative
    /// weight, non-finite entry).
    #[error("validation failed: {0}")]
    Validation(String),

    /// An iterative routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A spectrum required to be non-degenerate was degenerate (all zeros, or
    /// no eigenvalue above the zero threshold).
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    /// Seeded random generation exhausted its attempt budget.
    #[error("generation failed: {0}")]
    GenerationFailed(String),

    /// A text input failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
