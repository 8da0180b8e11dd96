use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid parameter `{name}` = {value}: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient strikes: need at least 3, got {0}")]
    InsufficientStrikes(usize),

    #[error("static arbitrage at strike {strike}: {reason}")]
    Arbitrage { strike: f64, reason: String },

    #[error("b-grid truncation: maximiser hits b_max at a = {a}; try b_max >= {suggested_b_max}")]
    Truncation { a: f64, suggested_b_max: f64 },

    #[error("value {value} outside table range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("CFL violation: time step {dt} exceeds stable step {required_dt}")]
    Cfl { dt: f64, required_dt: f64 },

    #[error("non-monotone stencil: {0}")]
    Stencil(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("infeasible instance: {0}")]
    Infeasible(String),

    #[error("spatial domain too small: boundary influence {discrepancy:.3e} exceeds {tolerance:.3e}")]
    EnlargeDomain { discrepancy: f64, tolerance: f64 },

    #[error("grid too coarse: {0}")]
    Refine(String),

    #[error("hypothesis not met: {0}")]
    Hypothesis(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            constraint: "must be finite".into(),
        })
    }
}
