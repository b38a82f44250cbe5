//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the monitoring pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("number of basis functions must be at least 5, got {0}")]
    TooFewBasisFunctions(usize),

    #[error("invalid basis domain [{lo}, {hi}]: bounds must be finite with lo < hi")]
    InvalidDomain { lo: f64, hi: f64 },

    #[error("evaluation point {point} outside basis domain [{lo}, {hi}]")]
    PointOutsideDomain { point: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid sample `{obs_id}`: {reason}")]
    InvalidSample { obs_id: String, reason: String },

    #[error("component {component} of `{obs_id}` has {n_points} point(s); at least 2 distinct points are required")]
    DegenerateComponent {
        obs_id: String,
        component: usize,
        n_points: usize,
    },

    #[error("smoothing parameter must be positive and finite, got {0}")]
    InvalidLambda(f64),

    #[error("smoothing failed for {failures} of {total} observation(s): {summary}")]
    BatchSmoothing {
        failures: usize,
        total: usize,
        summary: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("need at least {min} observations, got {got}")]
    TooFewObservations { min: usize, got: usize },

    #[error("observation `{obs_id}` does not match the model: {reason}")]
    ModelMismatch { obs_id: String, reason: String },

    #[error("requested rank {requested} exceeds usable rank {usable}")]
    RankExceeded { requested: usize, usable: usize },

    #[error("model has no positive eigenvalue")]
    DegenerateModel,

    #[error("invalid parameter grid: {0}")]
    InvalidGrid(String),

    #[error("alpha must lie in (0, 0.5), got {0}")]
    InvalidAlpha(f64),

    #[error("p-values must lie in (0, 1]; offending value {0}")]
    InvalidPValue(f64),

    #[error("empty reference sample")]
    EmptyReference,

    #[error("all smoothing parameters produced degenerate models; no chart cells remain")]
    AllCellsDegenerate,

    #[error("invalid scenario specification: {0}")]
    InvalidScenario(String),

    #[error("covariance matrix is not positive definite even after jitter up to {max_jitter:.3e}")]
    CovarianceNotPd { max_jitter: f64 },

    #[error("observations do not share a common measurement grid ({0})")]
    GridMismatch(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("model file format version {found} is not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("benchmark aborted: {failed} of {total} replicates failed (limit 20%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
