use thiserror::Error;

use crate::estimator::Diagnostics;

pub type Result<T, E = ShapeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ShapeError {
    /// The configuration collapses onto a single landmark, so the pre-shape
    /// (and anything normalizing by the centered norm) is undefined.
    #[error("degenerate configuration: centered norm {norm:e} is below {threshold:e}")]
    DegenerateConfiguration { norm: f64, threshold: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("frequency cutoff {lambda} outside [0, {max}] for k = {k}")]
    InvalidCutoff { lambda: usize, k: usize, max: usize },

    #[error("landmark count k = {0} must be odd")]
    EvenK(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mean similarity matrix is singular (smallest singular value {sigma_min:e})")]
    SingularAlignment { sigma_min: f64 },

    #[error("optimizer stopped after {} iterations without converging (projected gradient {:e})", .diagnostics.iterations, .diagnostics.projected_gradient)]
    NoConvergence { diagnostics: Box<Diagnostics> },

    #[error("result set is empty")]
    EmptyResult,

    #[error("invalid experiment configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
