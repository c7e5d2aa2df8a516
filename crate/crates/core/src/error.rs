use thiserror::Error;

/// Errors raised by dataset handling, model evaluation and fitting.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("model specification error: {0}")]
    Spec(String),

    /// Observation model evaluated outside its domain (e.g. log of a nonpositive risk).
    #[error("domain error in group {group}, row {row}: {msg}")]
    Domain { group: usize, row: usize, msg: String },

    #[error("invalid variance in group {group}, row {row}: {value}")]
    InvalidVariance { group: usize, row: usize, value: f64 },

    #[error("spline evaluation at {t} outside [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("h = {h} outside [0, {n}]")]
    InfeasibleSet { h: f64, n: usize },

    #[error("no strictly feasible point found (phase-1 residual {residual:.3e})")]
    Infeasible { residual: f64 },

    /// Non-finite objective or gradient; carries the offending iterate.
    #[error("numeric failure: {msg} at iterate {iterate:?}")]
    Numeric { msg: String, iterate: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, Error>;
