use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}{}: {detail}", filter.map(|f| format!(", filter {f}")).unwrap_or_default())]
    ShapeMismatch {
        layer: usize,
        filter: Option<usize>,
        detail: String,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("point lies outside the projection ball (distance {distance} > radius {radius})")]
    OutsideBall { distance: f64, radius: f64 },

    #[error("alpha = {alpha} violates 1 - 4*alpha^2 > 0 (requires alpha < 0.5)")]
    AlphaDomain { alpha: f64 },

    #[error("training diverged at iteration {iteration}: non-finite value")]
    Divergence { iteration: usize },

    #[error("degenerate shadow split: {0}")]
    DegenerateSplit(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
