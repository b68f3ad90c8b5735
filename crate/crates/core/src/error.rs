use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("battery has no tasks")]
    EmptyTaskSet,
    #[error("task {task}: score {value} outside [0, 1]")]
    ScoreOutOfRange { task: usize, value: f64 },
    #[error("task {task}: threshold {value} outside [0, 1]")]
    ThresholdOutOfRange { task: usize, value: f64 },
    #[error("task {task}: needs at least 2 outputs, found {found}")]
    TooFewOutputs { task: usize, found: usize },
    #[error("sampling weight {index} is negative ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("sampling weights sum to {sum}, expected 1")]
    WeightSumMismatch { sum: f64 },
    #[error("battery too large: {0}")]
    BatteryTooLarge(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("vector is degenerate in the metric (norm {0:e})")]
    DegenerateVector(f64),
    #[error("metric is singular or ill-conditioned (smallest eigenvalue {0:e})")]
    SingularMetric(f64),
    #[error("unknown verifier kind `{0}`")]
    UnknownKind(String),
    #[error("missing or invalid parameter `{0}`")]
    MissingParameter(String),
    #[error("non-finite potential at position {0}")]
    NonFiniteScore(usize),
    #[error("logit {value} left the admissible range [-100, 100]")]
    NumericalOverflow { value: f64 },
    #[error("capability gradient is degenerate (norm {0:e})")]
    DegenerateGradient(f64),
    #[error("alignment must be positive, got {0}")]
    NonPositiveAlignment(f64),
    #[error("trajectory has fewer than two checkpoints or consumed nothing")]
    EmptyTrajectory,
    #[error("window {window} exceeds the {checkpoints} available checkpoints")]
    WindowTooLarge { window: usize, checkpoints: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
