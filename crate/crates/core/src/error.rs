use alloc::string::String;

/// Errors raised by the laboratory.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("infeasible configuration: {0}")]
    Infeasible(String),
    #[error("gate failed: {0}")]
    Gate(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("world mismatch: {0}")]
    WorldMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
