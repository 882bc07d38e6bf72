use thiserror::Error;

/// Errors raised anywhere in the compile/simulate pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("model schema: {0}")]
    Schema(String),

    #[error("undefined {kind} `{name}`")]
    Undefined { kind: &'static str, name: String },

    #[error("axis `{axis}` has non-positive extent {extent}")]
    NonPositiveExtent { axis: String, extent: i64 },

    #[error("operator graph contains a cycle through `{0}`")]
    Cyclic(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid partition factor: {0}")]
    InvalidFactor(String),

    #[error("rotating pace: {0}")]
    RpAlignment(String),

    #[error("no feasible plan for operator `{0}`")]
    NoFeasiblePlan(String),

    #[error("model does not fit: {0}")]
    ModelDoesNotFit(String),

    #[error("operator `{op}`: core {core} reads {tensor}{index:?}, which is not resident")]
    NonlocalOperand {
        op: String,
        core: usize,
        tensor: String,
        index: Vec<usize>,
    },

    #[error("core {core}: capacity exceeded ({requested} bytes requested, {in_use} in use, capacity {capacity})")]
    CapacityExceeded {
        core: usize,
        requested: u64,
        in_use: u64,
        capacity: u64,
    },

    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("regression: {0}")]
    Regression(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
