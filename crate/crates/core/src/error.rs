use muser_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MuserError {
    /// Malformed or out-of-vocabulary input data.
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MuserError {
    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for faults caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::NonFinite(_)
                | Self::Numerics(NumericsError::NonFinite(_))
                | Self::Numerics(NumericsError::NonFiniteGradient(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, MuserError>;
