use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("malformed {format} container: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("precision error: {0}")]
    Precision(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("audio too short: plan needs {required} frames, track has {available}")]
    AudioTooShort { required: usize, available: usize },

    #[error("clip too short: {len} frames, need at least {needed}")]
    ClipTooShort { len: usize, needed: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("director endpoint: {0}")]
    Endpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
