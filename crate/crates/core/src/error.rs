use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("fields live on different meshes")]
    MeshMismatch,
    #[error("cell {cell} has mean {mean} outside [-1, 1]")]
    BoundsViolation { cell: usize, mean: f64 },
    #[error("nonlinear solve stalled: residual {residual:.3e} after {iterations} iterations (tolerance {tolerance:.1e})")]
    NonlinearDivergence {
        residual: f64,
        iterations: usize,
        tolerance: f64,
    },
    #[error("linear solve failed: {0}")]
    LinearSolveFailure(String),
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("dense path limited to {limit} unknowns, got {size}")]
    TooLarge { size: usize, limit: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
