use thiserror::Error;

/// Errors surfaced by model construction, solvers, and serialization.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("environment index {index} out of range (E = {count})")]
    EnvIndex { index: usize, count: usize },

    #[error("environmental means are linearly dependent: {0}")]
    DependentMeans(String),

    #[error("observation map is numerically singular (condition number {cond:.3e})")]
    SingularMap { cond: f64 },

    #[error("optimizer did not converge after {steps} steps (gradient norm {grad_norm:.3e})")]
    NonConvergence { steps: usize, grad_norm: f64 },

    #[error("objective diverged at step {step} (value {objective:.3e})")]
    Divergence { step: usize, objective: f64 },

    #[error("unsatisfiable construction: {0}")]
    Unsatisfiable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

/// Rejects non-finite values early so they cannot propagate into estimators.
pub fn ensure_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} contains a non-finite value")))
    }
}
