use thiserror::Error;

/// Errors raised by the estimation, clustering and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Sigma not SPD")]
    NotSpd,

    #[error("no finite maximizer")]
    NoFiniteMaximizer,

    #[error("degenerate cluster {cluster}")]
    DegenerateCluster { cluster: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("need at least {k} observations, found {n}")]
    TooFewObservations { n: usize, k: usize },

    #[error("empty cluster after {retries} resampling attempts")]
    EmptyCluster { retries: usize },

    #[error("fit failed after {retries} reinitializations: {reason}")]
    FitFailed { retries: usize, reason: String },


    #[error("empty file")]
    EmptyFile,

    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },

    #[error("row {row}, column {col}: non-numeric value {value:?}")]
    NonNumeric { row: usize, col: usize, value: String },

    #[error("row {row}, column {col}: non-finite value")]
    NonFinite { row: usize, col: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
