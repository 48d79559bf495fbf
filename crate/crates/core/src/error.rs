//! Error type shared across the library.

/// Unified error for grid construction, solvers, basis computation, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix factorization failed: {0}")]
    Factorization(String),
    #[error(
        "explicit step matrix is singular or indefinite (theta = {theta}, dt = {dt}); \
         reduce dt or move theta towards 1"
    )]
    SingularExplicit { theta: f64, dt: f64 },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(
        "Newton did not converge within {max_iter} iterations at step {step} \
         (residual {residual:.3e})"
    )]
    NewtonDivergence {
        step: usize,
        max_iter: usize,
        residual: f64,
    },
    #[error("all eigenvalues fall below the cutoff; no basis vector can be retained")]
    EmptyBasis,
    #[error(
        "nonlinearity candidate count {count} exceeds the hard cap {cap}; \
         raise cutoff_first so the first-stage basis shrinks"
    )]
    CandidateCap { count: usize, cap: usize },
    #[error("adjoint iteration stalled at step {step} (residual {residual:.3e})")]
    AdjointStall { step: usize, residual: f64 },
    #[error("artifact {0} is missing or unreadable")]
    MissingArtifact(String),
    #[error("malformed data file {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
