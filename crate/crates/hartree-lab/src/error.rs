use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scale {0} is not dyadic (0 or a power of two)")]
    NotDyadic(u32),
    #[error("mode sets do not match: N={0} vs N={1}")]
    ModeSetMismatch(u32, u32),
    #[error("state has support outside <k> <= {0}")]
    SupportViolation(u32),
    #[error("time grids do not match: {0}")]
    GridMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
