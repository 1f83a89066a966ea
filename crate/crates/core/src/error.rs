use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A caller violated an operation's precondition.
    Contract(String),
    /// Invalid user-supplied input (empty cloud, bad count, unknown class, ...).
    Input(String),
    /// Invalid configuration.
    Config(String),
    /// A non-finite value was produced or consumed.
    Numeric(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "dimension error in {op}: {left:?} vs {right:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(alloc::format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(alloc::format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, input_err};
