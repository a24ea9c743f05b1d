use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the toolkit.
///
/// The variants mirror how the CLI reports failures: configuration
/// problems exit with code 2, data problems with 3, and numeric
/// divergence with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value is outside the mathematical domain of an operation
    /// (non-positive temperature, inputs that are not distributions, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API was driven incorrectly (backward twice, non-scalar loss, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Student and teacher views disagree on segmentation.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Checkpoint container written by a newer format version.
    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u16, supported: u16 },

    /// Checkpoint container failed its checksum.
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// Exit code used by the CLI: 2 config, 3 data, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 4,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
