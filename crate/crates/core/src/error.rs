use thiserror::Error;

use crate::copulas::CopulaFamily;

#[derive(Debug, Error)]
pub enum MeticError {
    #[error("{family} copula parameter {alpha} is outside its domain {domain}")]
    ParameterDomain {
        family: CopulaFamily,
        alpha: f64,
        domain: &'static str,
    },

    #[error("probability argument {value} is outside [0, 1]")]
    OutOfRange { value: f64 },

    #[error("probability argument {value} lies on the boundary of [0, 1]; clip it first")]
    Boundary { value: f64 },

    #[error("{what} did not converge (residual {residual:e})")]
    NoConvergence { what: &'static str, residual: f64 },

    #[error("Kendall's tau {tau} is not attainable by the {family} family")]
    UnattainableTau { family: CopulaFamily, tau: f64 },

    #[error("a vine needs at least 3 event times, got {0}")]
    VineSize(usize),

    #[error("invalid vine: {}", .0.join("; "))]
    InvalidVine(Vec<String>),

    #[error("no copula assigned to edge {0}")]
    MissingEdge(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("model does not match data: {0}")]
    ModelMismatch(String),

    #[error("non-finite log-likelihood contribution from subject {subject} ({case})")]
    NonFinite { subject: usize, case: String },

    #[error("integration failed: {0}")]
    Integration(String),

    #[error("optimization failed in {stage}: {reason}")]
    Optimization { stage: String, reason: String },

    #[error("variance estimation failed: {0}")]
    Variance(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MeticError {
    /// Whether the error comes from the numerics rather than from the model,
    /// data or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite { .. }
                | Self::Integration(_)
                | Self::Optimization { .. }
                | Self::Variance(_)
                | Self::NoConvergence { .. }
                | Self::ParameterDomain { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, MeticError>;
