use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {column}: cannot parse {value:?} as a finite number")]
    InvalidCell {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("k = {k} exceeds the {available} available reference points")]
    NotEnoughReferencePoints { k: usize, available: usize },

    #[error("K = floor(N1 * (1 - alpha)) < 1 for N1 = {n1}, alpha = {alpha}")]
    EmptyMinimumVolumeSet { n1: usize, alpha: f64 },

    #[error("anomaly set indistinguishable from nominal")]
    AnomalySetIndistinguishable,

    #[error("all training total distances are zero; cannot take logarithms")]
    DegenerateTraining,

    #[error(
        "localization needs {needed} samples after the onset estimate, {available} available; \
         extend observation before localizing"
    )]
    InsufficientLocalizationSamples { needed: usize, available: usize },

    #[error("neighbor result carries no per-dimension decomposition")]
    MissingDecomposition,

    #[error("contribution baseline is stale; refresh it after augmenting the anomaly set")]
    StaleBaseline,

    #[error("invalid dimension groups: {0}")]
    InvalidGroups(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("stream {stream} has zero variance")]
    ZeroVariance { stream: usize },

    #[error("window mean {mean} of stream {stream} is not positive; Poisson model undefined")]
    NonPositiveRate { stream: usize, mean: f64 },

    #[error("detector has not raised an alarm")]
    NoAlarm,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
