use alloc::string::String;

/// Failure categories shared by every operation in the toolkit.
///
/// The categories mirror how callers react: usage errors are programming or
/// invocation mistakes, configuration errors name a bad setting, data errors
/// mean an input violated its invariants.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T> = core::result::Result<T, Error>;

#[macro_export]
#[doc(hidden)]
macro_rules! usage {
    ($($arg:tt)*) => { $crate::Error::Usage(alloc::format!($($arg)*)) };
}

#[macro_export]
#[doc(hidden)]
macro_rules! config {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}

#[macro_export]
#[doc(hidden)]
macro_rules! data {
    ($($arg:tt)*) => { $crate::Error::Data(alloc::format!($($arg)*)) };
}
