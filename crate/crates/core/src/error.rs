use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("equilibrium solver did not converge (last residual {residual:.3e} N)")]
    SolverDivergence { residual: f64 },

    #[error("calibration did not converge after {iterations} bisection steps")]
    CalibrationFailed { iterations: usize },

    #[error("non-positive Hessian eigenvalue {value:.3e}; geometry is not an equilibrium")]
    NonPositiveMode { value: f64 },

    #[error("pulse groups {left} and {right} overlap (gap {gap:.3e} s)")]
    GroupOverlap { left: usize, right: usize, gap: f64 },

    #[error("pulse group {group} crosses t = 0 (first kick at {first:.3e} s)")]
    CrossesOrigin { group: usize, first: f64 },

    #[error("kick times are not time-ordered at index {index}")]
    UnorderedKicks { index: usize },

    #[error("no feasible timing: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
