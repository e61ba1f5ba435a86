use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("unbound input `{0}`")]
    UnboundInput(String),
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("non-finite function value while differencing coordinate {0}")]
    NonFiniteEvaluation(usize),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("class count mismatch: expected {expected}, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("single-class batch: {0}")]
    SingleClassBatch(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("learning-rate schedule step must be >= 1")]
    StepZero,
    #[error("too few records: need at least {needed}, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("record `{0}` has no embeddings")]
    UnembeddedRecord(String),
    #[error("degenerate fold: {0}")]
    DegenerateFold(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} outside [{min}, {max}]")]
    LabelOutOfRange { label: i64, min: i64, max: i64 },
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("invalid essay-set metadata: {0}")]
    InvalidMeta(String),
    #[error("unknown essay set {0}")]
    UnknownSet(u32),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
