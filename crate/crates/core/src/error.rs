use thiserror::Error;

/// Errors surfaced by model fitting, data validation, and ingestion.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate model fit: {0}")]
    DegenerateFit(String),

    #[error("subject cannot be assigned: every candidate has -inf log-likelihood")]
    Unassignable,

    #[error("changepoint adjustment would violate ordering: {0}")]
    ChangepointOrdering(String),

    #[error("event/censoring time {time} exceeds the changepoint grid (last cut {last_cut})")]
    TimeBeyondGrid { time: f64, last_cut: f64 },

    #[error("schema violation in {file} line {line}: {message}")]
    Schema {
        file: String,
        line: usize,
        message: String,
    },

    #[error(
        "missingness violation: subject {subject} at time {time} has a partially observed visit"
    )]
    Missingness { subject: String, time: f64 },

    #[error("cross-file consistency: {0}")]
    Consistency(String),

    #[error("duplicate (subject, time) row: subject {subject} at time {time}")]
    DuplicateVisit { subject: String, time: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
