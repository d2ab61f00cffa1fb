use thiserror::Error;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },
    #[error("masked mean over an all-zero mask")]
    EmptyMask,
    #[error("non-finite value produced by {op}")]
    NonFiniteResult { op: &'static str },
    #[error("backward requires a 1x1 loss, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("loss is not connected to any tracked tensor")]
    DisconnectedGraph,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
