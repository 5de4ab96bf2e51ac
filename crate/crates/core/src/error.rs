use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: cannot parse `{value}` in column `{column}` as a number")]
    Parse { row: usize, column: String, value: String },

    #[error("row {row}: action must be 0 or 1, found `{value}`")]
    NonBinaryAction { row: usize, value: String },

    #[error("row {row}: non-finite value in column `{column}`")]
    NonFinite { row: usize, column: String },

    #[error("trajectory `{id}` has {found} decision steps, expected {expected}")]
    RaggedTrajectory { id: String, expected: usize, found: usize },

    #[error("trajectory `{id}`: {reason}")]
    MalformedTrajectory { id: String, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("state dimension {dim} has zero variance")]
    ZeroVariance { dim: usize },

    #[error("states are already scaled")]
    AlreadyScaled,

    #[error("cannot split {n} trajectories into three non-empty sets")]
    SplitTooSmall { n: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("newton iteration did not converge after {iterations} iterations (last iterate {last:?})")]
    NotConverged { iterations: usize, last: Vec<f64> },

    #[error("behavioral fit diverged (|coefficient| > {limit}); data look separable")]
    Separable { limit: f64 },

    #[error("importance weights are degenerate: log-ratio spread {spread:.1} exceeds {limit}")]
    DegenerateWeights { spread: f64, limit: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
