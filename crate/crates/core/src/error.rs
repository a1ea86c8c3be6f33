use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Eval(#[from] EvalError),

    #[error("unbound variable `{0}`")]
    UnboundVariable(String),

    #[error("integrator exceeded {steps} steps at t = {t}")]
    StepLimit { steps: usize, t: f64 },

    #[error("trajectory left the escape radius {radius} at t = {t} (possible incompleteness)")]
    Escape { t: f64, radius: f64 },

    #[error("flows do not commute: residual {residual:.3e} exceeds {tolerance:.1e}")]
    NotCommuting { residual: f64, tolerance: f64 },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("Newton iteration failed: {0}")]
    Newton(String),

    #[error("spec error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Spec { line: Option<usize>, message: String },

    #[error("{0}")]
    Invalid(String),

    #[error("chart refused: {0}")]
    Chart(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn spec(message: impl Into<String>) -> Self {
        Error::Spec { line: None, message: message.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
