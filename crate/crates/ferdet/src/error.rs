use thiserror::Error;

#[derive(Debug, Error)]
pub enum FerError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FerError>;

impl FerError {
    pub fn shape(msg: impl Into<String>) -> Self {
        FerError::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        FerError::Invalid(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        FerError::Data(msg.into())
    }
}
