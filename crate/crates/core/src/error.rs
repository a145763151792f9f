use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: every dimension must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a 2-D tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: {reason}")]
    Config { op: &'static str, reason: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("token id {token} at position {position} is outside vocabulary of size {vocab_size}")]
    TokenOutOfRange {
        token: usize,
        position: usize,
        vocab_size: usize,
    },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("unknown task id `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ModelError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ModelError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// Errors raised while decoding a compressed representation message.
///
/// Each variant names the offending header field and its byte offset.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic at offset 0: expected \"DVTN\", found {found:02x?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} at offset 4 (expected 1)")]
    Version { found: u8 },
    #[error("unsupported dtype_code {found} at offset 5 (expected 1)")]
    Dtype { found: u8 },
    #[error(
        "truncated message: field `{field}` at offset {offset} needs {needed} bytes, {available} available"
    )]
    Truncated {
        field: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("payload_len {payload_len} at offset 14 is inconsistent with rows {rows} x cols {cols} (expected {expected})")]
    PayloadMismatch {
        payload_len: u64,
        rows: u32,
        cols: u32,
        expected: u64,
    },
    #[error("invalid dimension `{field}` = 0 at offset {offset}")]
    ZeroDimension { field: &'static str, offset: usize },
    #[error("{extra} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("cannot encode tensor of shape {shape:?}: expected 2-D")]
    NotMatrix { shape: Vec<usize> },
}

impl WireError {
    /// Byte offset of the field that failed to decode.
    pub fn offset(&self) -> usize {
        match self {
            WireError::BadMagic { .. } => 0,
            WireError::Version { .. } => 4,
            WireError::Dtype { .. } => 5,
            WireError::Truncated { offset, .. } => *offset,
            WireError::PayloadMismatch { .. } => 14,
            WireError::ZeroDimension { offset, .. } => *offset,
            WireError::TrailingBytes { offset, .. } => *offset,
            WireError::NotMatrix { .. } => 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss for task `{task}` is {value}")]
    Diverged { step: usize, task: String, value: f64 },
    #[error("invalid training setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint truncated at offset {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint config is not valid UTF-8 TOML: {0}")]
    Config(String),
    #[error("checkpoint tensor `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: WireError,
    },
    #[error("checkpoint parameter mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
