use thiserror::Error;

/// Errors produced by fitting, bootstrapping, and diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("not a permutation of 1..={0}")]
    NotAPermutation(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("heterogeneous inputs: {0}")]
    Heterogeneous(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    Indefinite(f64),

    #[error("eigenvalues must be sorted in descending order")]
    Unsorted,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 input error, 3 numeric failure, 4 config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Factorization(_) | Error::NonFinite(_) | Error::Indefinite(_) => 3,
            Error::Config(_) | Error::InvalidParameter(_) | Error::Unsupported(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
