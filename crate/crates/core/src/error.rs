use thiserror::Error;

/// Errors raised by the decomposition toolkit.
#[derive(Debug, Error)]
pub enum EmvError {
    #[error("no observations")]
    NoObservations,

    #[error("duplicate cell (age={age}, time={time})")]
    DuplicateCell { age: u32, time: u32 },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid cell (age={age}, time={time}): {message}")]
    InvalidCell { age: u32, time: u32, message: String },

    #[error("value {value} at (age={age}, time={time}) is outside the domain of the {transform} transform")]
    TransformDomain {
        age: u32,
        time: u32,
        transform: &'static str,
        value: f64,
    },

    #[error("insufficient data for EMV decomposition")]
    InsufficientData,

    #[error("null vector verification failed: max |Xc| = {residual:e}")]
    NullVectorCheck { residual: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerically zero design")]
    ZeroDesign,

    #[error("IRLS did not converge after {iterations} iterations (deviance trace: {trace:?})")]
    NonConvergence { iterations: usize, trace: Vec<f64> },

    #[error("IRLS diverged (|beta| = {norm:e}); the data are likely separated")]
    Separation { norm: f64 },

    #[error("function not estimable: component along null direction is {component:e}")]
    NotEstimable { component: f64 },

    #[error("constraint does not resolve EMV nonidentifiability")]
    NonIdentifying,

    #[error("{0}")]
    TooFewElements(String),

    #[error("decompositions are not c-equivalent (max residual {residual:e})")]
    NotCEquivalent { residual: f64 },

    #[error("covariate matrix is rank deficient; dependent columns: {}", .columns.join(", "))]
    RankDeficientCovariates { columns: Vec<String> },

    #[error("time index mismatch: {0}")]
    TimeMismatch(String),

    #[error("missing covariate values for time {time}")]
    MissingCovariate { time: u32 },

    #[error("REML criterion is not finite at {at}; trace: {trace:?}")]
    Reml { at: String, trace: Vec<(f64, f64, f64)> },

    #[error("random vintage effects need at least {required} observed vintages, found {found}")]
    TooFewVintages { required: usize, found: usize },

    #[error("prediction requires a stochastic vintage process")]
    PredictionRequiresProcess,

    #[error("vintage window is empty")]
    EmptyVintageWindow,

    #[error("insufficient tail points: need at least 2 ages above {a_star}, found {found}")]
    InsufficientTail { a_star: u32, found: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EmvError>;
