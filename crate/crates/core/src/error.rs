use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdlError {
    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,
    #[error("non-finite gradient in `{tensor}` at flat index {index}: {value}")]
    NonFiniteGradient {
        tensor: String,
        index: usize,
        value: f64,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("bin mismatch: {left} vs {right} bins")]
    BinMismatch { left: usize, right: usize },
    #[error("invalid label {label} for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DdlError> = std::result::Result<T, E>;
