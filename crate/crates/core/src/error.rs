use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("CTC target of length {label_len} (with {repeats} adjacent repeats) cannot be aligned to {frames} frames")]
    Infeasible {
        frames: usize,
        label_len: usize,
        repeats: usize,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(alloc::format!($($arg)*))
    };
}
pub(crate) use dim_err;
