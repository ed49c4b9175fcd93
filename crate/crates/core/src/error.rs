use thiserror::Error;

/// Errors raised by the pipeline. Variants are grouped by the contract
/// that failed so callers (and the CLI) can report the offending module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{module}: invalid parameter: {msg}")]
    Parameter { module: &'static str, msg: String },

    #[error("{module}: insufficient data: {msg}")]
    InsufficientData { module: &'static str, msg: String },

    #[error("signal: degenerate range: max == min ({0})")]
    DegenerateRange(f64),

    #[error("{module}: shape mismatch: {msg}")]
    Shape { module: &'static str, msg: String },

    #[error("net: configuration error: {0}")]
    Config(String),

    #[error("net: training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    #[error("{what}: format error at byte {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("store: subject {0:?} is already enrolled")]
    Conflict(String),

    #[error("store: subject {0:?} is not enrolled")]
    NotEnrolled(String),

    #[error("store: model version mismatch (template {template}, model {model})")]
    Version { template: String, model: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Parameter {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn insufficient(module: &'static str, msg: impl Into<String>) -> Self {
        Error::InsufficientData {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(module: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            module,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            offset,
            msg: msg.into(),
        }
    }
}
