use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum AmcnError {
    #[error("vector norm {norm:e} is below the zero tolerance")]
    ZeroVector { norm: f64 },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("unknown class index {index} (C = {num_classes})")]
    UnknownClass { index: usize, num_classes: usize },
    #[error("ID and OOD name sets intersect at {0:?}")]
    NameCollision(String),
    #[error("contrastive ratio underflowed to zero")]
    DegenerateRatio,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("class {class} has {got} samples, need at least {need}")]
    InsufficientSamples {
        class: usize,
        got: usize,
        need: usize,
    },
    #[error("distribution score denominator tau0 + m_pse = {0} is not positive")]
    DegenerateDenominator(f64),
    #[error("class statistics missing or incomplete ({0})")]
    MissingStats(String),
    #[error("score set is empty on the {0} side")]
    EmptyScoreSet(&'static str),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range [0, {max})")]
    LabelOutOfRange { label: i64, max: usize },
    #[error("unit-norm invariant violated: deviation {0:e}")]
    NormViolation(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmcnError>;
