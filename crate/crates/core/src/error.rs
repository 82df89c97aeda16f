use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or sizes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An operation was applied to a value in the wrong state
    /// (e.g. normalizing already-normalized subbands).
    #[error("state error: {0}")]
    State(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Bad or missing data (empty dataset, mismatched feature files, ...).
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// A loss went NaN or infinite during optimization.
    #[error("non-finite loss at step {step}: {what}")]
    NonFinite { step: usize, what: String },
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
