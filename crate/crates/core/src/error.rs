use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: unsupported configuration: {detail}")]
    Unsupported { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    VolumeIo(#[from] crate::data::io::VolumeIoError),

    #[error(transparent)]
    Checkpoint(#[from] crate::trainer::checkpoint::CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
