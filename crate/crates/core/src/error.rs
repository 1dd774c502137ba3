use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes surfaced by the library.
///
/// The CLI maps these to process exit codes: `Argument` exits 2,
/// `Evaluation` exits 4, everything else exits 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent caller-supplied argument.
    #[error("argument: {0}")]
    Argument(String),
    /// Bytes do not parse as the declared format.
    #[error("format: {0}")]
    Format(String),
    /// A file ends early or fails a self-consistency check.
    #[error("integrity: {0}")]
    Integrity(String),
    /// Values violate a data invariant (non-finite, negative importance, ...).
    #[error("data: {0}")]
    Data(String),
    /// Two inputs that must agree (ids, shapes) do not.
    #[error("structural: {0}")]
    Structural(String),
    /// A numeric routine produced an unusable result.
    #[error("numeric: {0}")]
    Numeric(String),
    /// An external evaluation hook failed at relaxation step `c`.
    #[error("evaluation (c={c}): {msg}")]
    Evaluation { c: u32, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
