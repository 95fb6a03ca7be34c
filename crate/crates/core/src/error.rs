use alloc::string::String;

/// Errors raised by the models and analysis routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("division by zero: {0}")]
    Division(String),
    #[error("undefined result: {0}")]
    Undefined(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("unsorted stream at index {0}")]
    Unsorted(usize),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
