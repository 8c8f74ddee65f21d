//! Error type shared across the library.

/// Library-wide error enum.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid cascade: {0}")]
    InvalidCascade(String),

    #[error("degenerate cascade: length {0} carries no order information")]
    DegenerateCascade(usize),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("diffusion step {t} outside schedule range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("noise scale {sigma} below floor {floor}")]
    SigmaBelowFloor { sigma: f64, floor: f64 },

    #[error("iteration did not converge: residual {residual:e} after {iters} iterations")]
    NonConvergence { residual: f64, iters: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
