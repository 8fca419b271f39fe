use std::io;

use thiserror::Error;

pub type Result<T, E = AdsqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AdsqError {
    /// Malformed file: bad magic, truncated payload, out-of-range values.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input that violates a data invariant (NaN features,
    /// empty label rows, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite loss or gradient during optimization.
    #[error("training error: {0}")]
    Training(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl AdsqError {
    /// Prefixes the message with a location, e.g. the phase and round in
    /// which a training error occurred.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            AdsqError::Format(m) => AdsqError::Format(format!("{ctx}: {m}")),
            AdsqError::Data(m) => AdsqError::Data(format!("{ctx}: {m}")),
            AdsqError::Config(m) => AdsqError::Config(format!("{ctx}: {m}")),
            AdsqError::Shape(m) => AdsqError::Shape(format!("{ctx}: {m}")),
            AdsqError::Domain(m) => AdsqError::Domain(format!("{ctx}: {m}")),
            AdsqError::Training(m) => AdsqError::Training(format!("{ctx}: {m}")),
            AdsqError::Argument(m) => AdsqError::Argument(format!("{ctx}: {m}")),
            AdsqError::Io(e) => AdsqError::Io(io::Error::new(e.kind(), format!("{ctx}: {e}"))),
        }
    }
}
