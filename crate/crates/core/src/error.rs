use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain violation: {0}")]
    DomainViolation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient seed must be a scalar, got {rows}x{cols}")]
    NonScalarSeed { rows: usize, cols: usize },
    #[error("timestamps must be strictly increasing: {prev} followed by {next}")]
    NonMonotoneTimestamp { prev: f64, next: f64 },
    #[error("memory buffer not full: holds {len} of {capacity}")]
    BufferNotFull { len: usize, capacity: usize },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("bound ordering violated: alpha_lo={lo}, alpha_hi={hi}")]
    BoundOrdering { lo: f64, hi: f64 },
    #[error("matrix conditioning {cond:.3e} exceeds 1e12")]
    IllConditioned { cond: f64 },
    #[error("tightened constraint box is empty on axis {axis}")]
    InfeasibleBox { axis: usize },
    #[error("reference generation failed: {0}")]
    ReferenceGeneration(String),
    #[error("rollout failed at step {step}: {source}")]
    Rollout { step: usize, source: Box<Error> },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
