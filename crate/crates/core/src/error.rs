use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("insufficient frames for {what}: need at least {needed}, got {got}")]
    TooShort {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("length error: {0}")]
    Length(String),
    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { step: u64, batch_seed: u64 },
    #[error("non-finite state during integration at step {step}")]
    NonFiniteState { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
