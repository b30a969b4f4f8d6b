use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("non-finite derivative at t = {t}")]
    NonFiniteDerivative { t: f64 },

    #[error("requested time {requested} lies outside the solution span [{start}, {end}]")]
    OutOfRange { requested: f64, start: f64, end: f64 },

    #[error("Newton refinement of the fixed point near magnet {magnet} did not converge")]
    RootFindFailure { magnet: usize },

    #[error("state is not near a twisted state (winding sum {sum:.3})")]
    Unresolved { sum: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("trajectory of length {len} is too short; need at least {required} states")]
    TrajectoryTooShort { len: usize, required: usize },

    #[error("regularized Gram matrix is not positive definite")]
    IllConditioned,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(#[from] png::EncodingError),
}

impl Error {
    /// Process exit code used by the CLI: 2 for configuration problems,
    /// 3 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Json(_) => 2,
            Error::StepSizeUnderflow { .. }
            | Error::NonFiniteDerivative { .. }
            | Error::RootFindFailure { .. }
            | Error::IllConditioned
            | Error::Unresolved { .. } => 3,
            _ => 1,
        }
    }
}
