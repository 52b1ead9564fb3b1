use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing mandatory column `{column}`")]
    Schema { column: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("variable {variable} is entirely missing for city {city}; cannot impute")]
    Unimputable { city: String, variable: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature spec error: {0}")]
    Spec(String),

    #[error("degenerate column `{column}` (zero variance)")]
    DegenerateColumn { column: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("collinear regressors: {}", columns.join(", "))]
    Collinearity { columns: Vec<String> },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate target: response is constant")]
    DegenerateTarget,

    #[error("invalid state: {0}")]
    State(String),

    #[error("insufficient data for city {city}: need {needed} rows, have {got}")]
    InsufficientData {
        city: String,
        needed: usize,
        got: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("leakage: {0}")]
    Leakage(String),

    #[error("every tuning trial failed")]
    AllTrialsFailed,

    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
