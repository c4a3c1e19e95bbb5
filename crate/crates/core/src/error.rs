use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid field: {0}")]
    InvalidField(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The classical solver produced a non-finite state.
    #[error("solver diverged at step {step}")]
    Divergence { step: usize },

    /// A refinement / rollout step produced a non-finite estimate.
    #[error("inference produced non-finite values at rollout step {rollout_step}, refinement step {refinement_step}")]
    Inference {
        rollout_step: usize,
        refinement_step: usize,
    },

    #[error("training produced a non-finite {0}")]
    Training(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors raised while reading or writing the binary dataset / checkpoint files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidField(_) => "invalid-field",
            Error::Parameter(_) => "parameter",
            Error::Shape(_) => "shape",
            Error::Divergence { .. } => "divergence",
            Error::Inference { .. } => "inference",
            Error::Training(_) => "training",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::Config(_) => "config",
            Error::Sampling(_) => "sampling",
            Error::Format(FormatError::Io(_)) => "io",
            Error::Format(_) => "format",
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Format(FormatError::Io(err))
    }
}
