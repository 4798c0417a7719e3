use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("IMU gap of {gap:.4} s exceeds the allowed {max:.4} s")]
    ImuGap { gap: f64, max: f64 },
    #[error("frames {0} and {1} share too few joint observations for an edge")]
    InsufficientObservations(u64, u64),
    #[error("two-pose factor was already revived")]
    AlreadyConsumed,
    #[error("loop rotation discrepancy of {0:.4} rad is ambiguous to split")]
    AmbiguousLoop(f64),
    #[error("optimization diverged")]
    Diverged,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
