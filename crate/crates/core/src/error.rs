use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    DataIntegrity { context: String },

    #[error("shape mismatch: {expected} vs {found} in {context}")]
    ShapeMismatch {
        expected: String,
        found: String,
        context: String,
    },

    #[error("solver did not converge after {iters} iterations (residual {residual:.3e}, tolerance {tolerance:.3e})")]
    SolverDiverged {
        iters: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("microstructure generation failed: {0}")]
    Generation(String),

    #[error("normalization failed: {0}")]
    Normalization(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("training failed at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
