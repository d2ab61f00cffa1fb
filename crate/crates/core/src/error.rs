use mmists_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sample `{sample}`: variable {var} has {len} observations, limit is {limit}")]
    SequenceTooLong {
        sample: String,
        var: usize,
        len: usize,
        limit: usize,
    },
    #[error("need at least {required} samples, got {got}")]
    TooFewSamples { required: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("corrupt record: {0}")]
    CorruptRecord(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {0} has no valid attention keys")]
    AllMasked(usize),
    #[error("no queries to score")]
    EmptyQuerySet,
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SequenceTooLong { .. } => "SequenceTooLong",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidSample(_) => "InvalidSample",
            Error::NotFound(_) => "NotFound",
            Error::CorruptRecord(_) => "CorruptRecord",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::AllMasked(_) => "AllMasked",
            Error::EmptyQuerySet => "EmptyQuerySet",
            Error::EmptySplit(_) => "EmptySplit",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::UnknownVariant(_) => "UnknownVariant",
            Error::Autodiff(_) => "Autodiff",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

/// Lets model code run inside closures that speak the tape's error type,
/// such as the gradient checker.
impl From<Error> for AutodiffError {
    fn from(e: Error) -> Self {
        match e {
            Error::Autodiff(inner) => inner,
            other => AutodiffError::InvalidArgument(other.to_string()),
        }
    }
}
