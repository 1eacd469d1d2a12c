use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A precondition on the arguments was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A mathematical function was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// An operation produced NaN or an infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// The loss diverged during optimization.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    /// Pearson correlation of a constant series.
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    /// A report could not be assembled because a metric section is missing.
    #[error("report is missing the {0} section")]
    MissingSection(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(alloc::format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(alloc::format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use dim_err;
