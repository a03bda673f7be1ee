use thiserror::Error;

/// Errors raised anywhere in the MTC stack.
///
/// The variants are coarse on purpose: the CLI maps them to exit codes
/// (contract and data problems to 3, numerical faults to 4).
#[derive(Debug, Error)]
pub enum MtcError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical fault: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("replay buffer not ready: {0}")]
    NotReady(String),

    #[error("compressor failure: {0}")]
    Compressor(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl MtcError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, MtcError::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, MtcError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MtcError::Shape(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MtcError::Contract(msg.into()))
}
