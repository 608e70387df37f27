use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced across the crate.
///
/// The variants fall into three families that callers (the CLI in
/// particular) map to distinct exit codes: input/domain validation,
/// file and format problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("covariance is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("derivative term of order {order} is not available for {kind}")]
    UnsupportedOrder { kind: String, order: usize },

    #[error("lowered convolution needs {elements} matrix elements, budget is {budget}")]
    ElementBudget { elements: usize, budget: usize },

    #[error("network failed validation: {0}")]
    InvalidNetwork(String),

    #[error("cholesky factorization failed (min eigenvalue {min_eigenvalue:e})")]
    Cholesky { min_eigenvalue: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("unsupported schema version {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("checksum failure: {0}")]
    Checksum(String),

    #[error("shape inconsistency: {0}")]
    Shape(String),

    #[error("unsupported layer type {0:?}")]
    UnsupportedLayer(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),
}

/// Coarse classification used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Format,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Domain(_)
            | Error::DimensionMismatch { .. }
            | Error::NotSymmetric { .. }
            | Error::UnsupportedOrder { .. }
            | Error::ElementBudget { .. }
            | Error::InvalidNetwork(_) => ErrorClass::Usage,
            Error::Io(_)
            | Error::Version { .. }
            | Error::Checksum(_)
            | Error::Shape(_)
            | Error::UnsupportedLayer(_)
            | Error::Manifest(_) => ErrorClass::Format,
            Error::Cholesky { .. } => ErrorClass::Numerical,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
