use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("parameter `{0}` is not bound in the parameter store")]
    UnboundParameter(String),

    #[error("missing gradients for parameters: {}", .0.join(", "))]
    MissingGradients(Vec<String>),

    #[error("value is not part of this tape")]
    NotOnTape,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unsupported layer: {0}")]
    Unsupported(String),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed {format} data at byte {offset}: {msg}")]
    Format {
        format: &'static str,
        offset: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// An I/O error annotated with the path it happened on.
    pub(crate) fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
