use std::path::PathBuf;

/// Errors raised across the crate. Invariant violations found by
/// `validate_dataset` are reported as data, not through this type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("digest mismatch for {0}")]
    Digest(PathBuf),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("not enough negative pairs: requested {requested}, available {available}")]
    InsufficientNegatives { requested: usize, available: usize },
    #[error("non-finite {component} loss at step {step}")]
    NonFinite { component: &'static str, step: usize },
    #[error("probe is not deterministic: {0} != {1}")]
    NonDeterministicProbe(f64, f64),
    #[error("degenerate task: {0}")]
    Degenerate(String),
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Digest(_) => "digest",
            Error::Inconsistent(_) => "inconsistent",
            Error::InsufficientNegatives { .. } => "insufficient_negatives",
            Error::NonFinite { .. } => "non_finite",
            Error::NonDeterministicProbe(..) => "non_deterministic_probe",
            Error::Degenerate(_) => "degenerate",
            Error::GradientCheck(_) => "gradient_check",
        }
    }
}
