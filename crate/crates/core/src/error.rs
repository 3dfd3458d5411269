use thiserror::Error;

/// Errors produced by the core engine, the model and the on-disk formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("attention row {row} has every token masked")]
    FullyMaskedRow { row: usize },

    #[error("timestep {step} out of range for a {len}-step schedule")]
    StepOutOfRange { step: usize, len: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown word {word:?}; valid words: {valid}")]
    UnknownWord { word: String, valid: String },

    #[error("malformed prompt {prompt:?}: {reason}")]
    MalformedPrompt { prompt: String, reason: String },

    #[error("non-finite {what} at training step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint has bad magic bytes {0:?}")]
    BadMagic([u8; 8]),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },

    #[error("checkpoint is malformed: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
