use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, symmetry).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "eigensolver did not converge after {sweeps} sweeps (off-diagonal residual {residual:.3e})"
    )]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("singular spectrum: smallest shifted eigenvalue {min_shifted:.3e} is not positive")]
    Singular { min_shifted: f64 },

    #[error("non-finite gradient for sample {sample}")]
    NonFinite { sample: usize },

    #[error("infinite privacy loss: noise multiplier must be positive")]
    InfinitePrivacyLoss,

    #[error("target epsilon {target} unreachable for sigma in [{lo}, {hi}]")]
    Unreachable { target: f64, lo: f64, hi: f64 },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::NoConvergence { .. } => "no_convergence",
            Error::Singular { .. } => "singular",
            Error::NonFinite { .. } => "non_finite",
            Error::InfinitePrivacyLoss => "infinite_privacy_loss",
            Error::Unreachable { .. } => "unreachable_target",
            Error::Undefined(_) => "undefined_metric",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
