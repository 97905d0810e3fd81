use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("profile has zero total mass")]
    ZeroMass,

    #[error("interval is reversed: a = {a} > b = {b}")]
    ReversedInterval { a: f64, b: f64 },

    #[error("cascade did not converge within {iterations} iterations (last increment {last_increment:e})")]
    CascadeNotConverged { iterations: usize, last_increment: f64 },

    #[error("cascade limit {limit} disagrees with physical jump {jump} beyond tolerance {tol:e}")]
    CascadeMismatch { limit: f64, jump: f64, tol: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("state does not match configuration: {0}")]
    StateMismatch(String),

    #[error("noise mismatch: {0}")]
    NoiseMismatch(String),

    #[error("missing data: {0}")]
    MissingData(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
