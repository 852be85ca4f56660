use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// True when the failure is a NaN/infinity caught on the tape.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
