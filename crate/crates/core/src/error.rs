use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("condition {id} is not in the vocabulary of {vocab} labels")]
    UnknownCondition { id: u32, vocab: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("DDIM steps must go backwards in time, got {from} -> {to}")]
    StepOrder { from: usize, to: usize },
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("parameter selection is empty")]
    EmptySelection,
    #[error("models do not share an architecture: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite values during {context}: {source}")]
    Diverged {
        context: String,
        #[source]
        source: TensorError,
    },
    #[error("{0}")]
    Dataset(String),
}
