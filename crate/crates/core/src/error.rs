//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    #[error("{op}: dimension mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A vector whose norm falls below the guard epsilon.
    #[error("{context}: vector norm below {eps:e}")]
    DegenerateVector { context: String, eps: f64 },

    /// Class label or row/column index outside the valid range.
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    /// Backward pass requested on a non-scalar value.
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    /// An operation that requires at least one element got none.
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    /// Top-K request larger than the available pool.
    #[error("top_k_match: requested {requested} entries but only {available} available")]
    Capacity { requested: usize, available: usize },

    /// A per-domain component permutation that is not a bijection.
    #[error("shuffle_components: permutation {perm:?} is not a bijection on 0..{len}")]
    InvalidPermutation { perm: Vec<usize>, len: usize },

    /// A caller violated a documented precondition.
    #[error("{op}: precondition failed: {reason}")]
    Precondition { op: &'static str, reason: String },

    /// Invalid experiment configuration.
    #[error("config: {0}")]
    Config(String),

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("checkpoint: bad magic header (not a checkpoint file or unsupported version)")]
    CheckpointBadMagic,

    /// Checkpoint format version not understood by this build.
    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint payload shorter than the header promises.
    #[error("checkpoint: truncated file: {detail}")]
    CheckpointTruncated { detail: String },

    /// Checkpoint tensor shapes disagree with the embedded configuration.
    #[error("checkpoint: shape disagreement: {detail}")]
    CheckpointShape { detail: String },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
