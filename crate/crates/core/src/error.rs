use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid shape {0:?}: dims must be >= 1 and rank <= 4")]
    InvalidShape(Vec<usize>),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("row {row} has zero variance and eps = 0")]
    DegenerateRow { row: usize },
    #[error("row {row} has every element masked")]
    AllMaskedRow { row: usize },
    #[error("missing cross-attention gradient for decoder layer {layer}")]
    IncompleteGradientSet { layer: usize },
    #[error("tensor {0} has no kind tag")]
    UntaggedTensor(usize),
    #[error("invalid lifetime for tensor {id}: {reason}")]
    InvalidLifetime { id: usize, reason: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("non-finite gradient in {count} element(s); step skipped")]
    NonFiniteGradient { count: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: token id {token} >= vocab {vocab}")]
    TokenFileOutOfRange {
        line: usize,
        token: usize,
        vocab: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("arena: {0}")]
    Arena(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
