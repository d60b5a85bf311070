use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CencovError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid observation at record {index}: {reason}")]
    InvalidObservation { index: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing nuisance block: {0}")]
    MissingNuisance(&'static str),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last: Vec<f64>,
    },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("ill-conditioned bread matrix (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("degenerate denominator E[1 - 1/pi] at y = {y}")]
    DegenerateDenominator { y: f64 },

    #[error("invalid covariance matrix: smallest eigenvalue {0:.3e}")]
    InvalidCovariance(f64),

    #[error("perfect separation in logistic fit: {0}")]
    Separation(String),

    #[error("quadrature refinement disagreement {0:.3e}")]
    QuadratureDisagreement(f64),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CencovError>,
    },
}

impl CencovError {
    pub fn at_stage(self, stage: &'static str) -> Self {
        CencovError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any stage labels.
    pub fn root(&self) -> &CencovError {
        match self {
            CencovError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, CencovError>;
