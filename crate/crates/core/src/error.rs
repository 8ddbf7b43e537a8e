use alloc::string::String;

/// Errors raised by tensor operations and model contracts.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Input shapes do not conform to the operation's shape rule.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    /// A forward operation produced NaN or infinity.
    #[error("{op}: non-finite value in output (node {node})")]
    NonFinite { op: &'static str, node: usize },
    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn contract(msg: String) -> Error {
    Error::Contract(msg)
}
