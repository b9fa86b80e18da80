use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GladError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GladError {
    #[error("unit mismatch: {0}")]
    Unit(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("non-finite loss in term `{term}` (value {value})")]
    NanLoss { term: String, value: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl GladError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GladError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data rather than a runtime failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            GladError::Io { .. }
                | GladError::Parse { .. }
                | GladError::Image { .. }
                | GladError::Input(_)
                | GladError::Checkpoint(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, GladError::Config(_))
    }
}

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::GladError::$variant(format!($($arg)*)))
    };
}
pub(crate) use bail;
