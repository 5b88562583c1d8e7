use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Error kinds shared by every module of the toolkit.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration or precondition on the caller's side.
    Config(String),
    /// The data violates an expectation (sizes, variance, missing values).
    Data(String),
    /// A masking policy cannot produce the requested mask.
    Policy(String),
    /// Training diverged.
    Training { epoch: usize, message: String },
    /// An iterative fit did not converge.
    Fit(String),
    /// Invariant breach inside the library.
    Internal(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Policy(m) => write!(f, "policy error: {m}"),
            Error::Training { epoch, message } => {
                write!(f, "training error at epoch {epoch}: {message}")
            }
            Error::Fit(m) => write!(f, "fit error: {m}"),
            Error::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

#[cfg(any(feature = "std", test))]
impl std::error::Error for Error {}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use data_err;
