use thiserror::Error;

/// Error taxonomy shared by every module in the crate.
///
/// The CLI maps these onto exit codes: `Io` -> 4, `Numeric` -> 3, everything
/// else -> 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or image dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Mathematically degenerate input (zero-norm vector, empty set, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// NaN/Inf produced by a forward op, or an optimizer blew up.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated (wrong tape, non-scalar loss, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A persisted file is corrupt or has the wrong magic/version.
    #[error("format error: {0}")]
    Format(String),

    /// Cross-object consistency failure (model fingerprint mismatch, ...).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Experiment configuration does not resolve (missing checkpoint, ...).
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
