use thiserror::Error;

pub type Result<T, E = SsmError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsmError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular bilinear pivot at state {index}: |1 - Δλ/2| = {magnitude:e}")]
    SingularPivot { index: usize, magnitude: f64 },

    #[error("degenerate Sherman-Morrison denominator (|1 + s*D⁻¹r| = {magnitude:e}) in channel {channel}")]
    DegenerateLowRank { channel: usize, magnitude: f64 },

    #[error("non-finite state at step {step}")]
    Divergence { step: usize },

    #[error("operation requires a time-invariant system")]
    NotTimeInvariant,

    #[error("conjugate-pair storage needs an even state dimension, got {0}")]
    OddStateDim(usize),

    #[error("state dimension {p} is not divisible into {blocks} blocks")]
    BlockDivisibility { p: usize, blocks: usize },

    #[error("empty or invalid LRU ring: r_min={r_min}, r_max={r_max}")]
    EmptyRing { r_min: f64, r_max: f64 },

    #[error("RG-LRU needs p = q, got p={p}, q={q}")]
    NonSquare { p: usize, q: usize },

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("token {token} out of vocabulary of size {vocab}")]
    OutOfVocabulary { token: usize, vocab: usize },

    #[error("loss must be a scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("gradient requested through unregistered op `{0}`")]
    UnregisteredOp(String),

    #[error("non-finite gradient in `{segment}` at index {index}")]
    NonFiniteGradient { segment: String, index: usize },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("malformed expression: {0}")]
    MalformedExpr(String),

    #[error("infeasible generator limits: {0}")]
    InfeasibleLimits(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl SsmError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        SsmError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

impl From<std::io::Error> for SsmError {
    fn from(e: std::io::Error) -> Self {
        SsmError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SsmError {
    fn from(e: serde_json::Error) -> Self {
        SsmError::Format(e.to_string())
    }
}
