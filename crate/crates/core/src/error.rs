use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("state index {index} out of range for a {states}-state device")]
    StateIndex { index: usize, states: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in `{field}`: {msg}")]
    Format { field: String, msg: String },

    #[error("enumeration needs {outcomes} joint outcomes, cap is {cap}")]
    Capacity { outcomes: f64, cap: u64 },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
