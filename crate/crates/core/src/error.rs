use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {0:e} is at or below the normalization guard")]
    NormTooSmall(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class {0} has no text embeddings")]
    EmptyClassTexts(usize),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid embedding table: {0}")]
    InvalidTable(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("label list is empty")]
    EmptyLabelList,

    #[error("invalid label marginal: {0}")]
    InvalidMarginal(String),

    #[error("class {class} needs {needed} samples but the pool holds {available}")]
    InsufficientClassSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("repulsion needs at least two classes")]
    SingleClass,

    #[error("support set is empty")]
    EmptySupport,

    #[error("step {step} out of range for a {total}-step schedule")]
    StepOutOfRange { step: usize, total: usize },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("class {0} has no support samples; re-balancing is undefined")]
    MissingClassForRebalancing(usize),

    #[error("unknown adapter method `{0}`")]
    UnknownMethod(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("no records to aggregate")]
    EmptyGroup,

    #[error("scenario `{scenario}` missing for task `{task}` at K={k}")]
    MissingScenario {
        task: String,
        k: usize,
        scenario: String,
    },

    #[error("degenerate task configuration: {0}")]
    DegenerateConfig(String),

    #[error("bad magic bytes, not an embedding interchange file")]
    BadMagic,

    #[error("unsupported interchange format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("payload has {0} trailing bytes beyond the declared records")]
    TrailingBytes(u64),

    #[error("row {row} has norm {norm}, outside the accepted band")]
    NormViolation { row: usize, norm: f64 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("report has no records")]
    EmptyReport,

    #[error("insufficient pool: {0}")]
    InsufficientPool(String),

    #[error("malformed results file: {0}")]
    Results(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
