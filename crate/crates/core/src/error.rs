use thiserror::Error;

/// Errors raised by grids, operators, solvers and the harness.
#[derive(Debug, Error)]
pub enum VmbError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("axis {axis} is outside the {dim} active spatial dimension(s)")]
    InactiveAxis { axis: usize, dim: usize },

    #[error("derivative order {order} exceeds the supported maximum {max}")]
    DerivativeOrder { order: usize, max: usize },

    #[error("non-neutral charge density: spatial mean {mean:e}")]
    NonNeutral { mean: f64 },

    #[error("dense operator needs {needed} bytes, budget is {budget} bytes")]
    MemoryBudget { needed: usize, budget: usize },

    #[error("assembled operator is not symmetric: relative defect {defect:e}")]
    Asymmetric { defect: f64 },

    #[error("kinetic exponent gamma = {0} is outside (-3, 1]")]
    Divergent(f64),

    #[error("CFL violation in force substep: dt = {dt:e} exceeds bound {bound:e}")]
    Cfl { dt: f64, bound: f64 },

    #[error("non-finite value after substep {substep} at step {step} (t = {t})")]
    NonFinite { substep: usize, step: u64, t: f64 },

    #[error("cascade level {level} advanced out of order: {detail}")]
    OutOfOrder { level: usize, detail: String },

    #[error("missing snapshot: {0}")]
    MissingSnapshot(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("run at epsilon = {epsilon} failed: {source}")]
    AtEpsilon { epsilon: f64, source: Box<VmbError> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VmbError {
    /// Process exit code: 2 for configuration problems, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            VmbError::Cfl { .. } | VmbError::NonFinite { .. } | VmbError::Asymmetric { .. } => 3,
            VmbError::AtEpsilon { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, VmbError>;
