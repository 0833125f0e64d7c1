use thiserror::Error;

/// Errors raised by the association-testing pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum HwuError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("covariate matrix is rank deficient (column {column})")]
    SingularCovariates { column: usize },

    #[error("degenerate phenotype: ranks have zero residual variance")]
    DegeneratePhenotype,

    #[error("degenerate weight matrix: {0}")]
    DegenerateWeight(String),

    #[error("model fit is singular: {0}")]
    SingularFit(String),

    #[error("model fit did not converge after {iterations} iterations: {reason}")]
    NonConvergence { iterations: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },

    #[error("replicate {replicate}: {source}")]
    Replicate {
        replicate: usize,
        #[source]
        source: Box<HwuError>,
    },
}

pub type Result<T> = std::result::Result<T, HwuError>;

impl HwuError {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        HwuError::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    /// True for the errors a scan reports as a skipped variant rather than a failure.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            HwuError::DegeneratePhenotype | HwuError::DegenerateWeight(_)
        )
    }
}
