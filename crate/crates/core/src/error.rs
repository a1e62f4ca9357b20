use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped by how a caller is expected to react: configuration
/// problems (`InvalidSpace`, `InvalidConfig`, ...), violated preconditions
/// (`Precondition`, `Unreachable`, ...) and numeric failures (`Numeric`,
/// `Divergence`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state space: {0}")]
    InvalidSpace(String),

    #[error("enumeration infeasible: {states} states exceed the cap of {cap}")]
    EnumerationInfeasible { states: u128, cap: u64 },

    #[error("invalid pmf: {0}")]
    InvalidPmf(String),

    #[error("state spaces do not match")]
    SpaceMismatch,

    #[error("invalid time {0}: must lie in [0, 1]")]
    InvalidTime(f64),

    #[error("terminal-time rate undefined at t = {0} (kappa_t = 1)")]
    TerminalRate(f64),

    #[error("step too large for first-order validity: h = {step} > 1/|u(x,x)| = {bound}")]
    StepTooLarge { step: f64, bound: f64 },

    #[error("state is unreachable under the path at t = {t}: zero posterior mass")]
    Unreachable { t: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed model container: {0}")]
    Container(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Broad failure class, used by the command-line front end to pick an exit code.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidSpace(_)
            | Error::InvalidConfig(_)
            | Error::SpaceMismatch
            | Error::Container(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Io(_) => ErrorClass::Config,
            Error::Numeric(_) | Error::Divergence { .. } | Error::InvalidPmf(_) => {
                ErrorClass::Numeric
            }
            Error::EnumerationInfeasible { .. }
            | Error::InvalidTime(_)
            | Error::TerminalRate(_)
            | Error::StepTooLarge { .. }
            | Error::Unreachable { .. }
            | Error::Precondition(_) => ErrorClass::Precondition,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Precondition,
}
