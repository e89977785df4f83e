use thiserror::Error;

/// Errors raised by the model and solver routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("log argument not positive: {0}")]
    Domain(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("invalid population state: {0}")]
    InvalidState(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("state left the simplex by {0:e}; reduce the step size")]
    StepSize(f64),
    #[error("history buffer: {0}")]
    HistoryBuffer(String),
    #[error("degenerate coefficients: {0}")]
    Degenerate(String),
    #[error("co-coercivity estimate failed: {0}")]
    Cocoercivity(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error("relaxation stage {stage} failed: {reason}")]
    MpecStage { stage: usize, reason: String, iterate: Vec<f64> },
}

pub type Result<T> = std::result::Result<T, MarketError>;
