use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input too short: {samples} samples, need at least {window}")]
    InputTooShort { samples: usize, window: usize },
    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    SampleRate(u32),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("degenerate normalization range: min == max == {0}")]
    DegenerateRange(f64),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(alloc::format!($($arg)*))
    };
}
pub(crate) use shape_err;
