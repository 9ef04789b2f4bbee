use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is not positive definite (pivot {pivot} <= 0 after jitter {jitter:e})")]
    NotPositiveDefinite { pivot: usize, jitter: f64 },

    #[error("backward requires a 1x1 output node, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("optimisation diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty NDVI window: {0}")]
    EmptyWindow(String),

    #[error("schema error in {file} at row {row}, column `{column}`: {message}")]
    Schema {
        file: String,
        row: usize,
        column: String,
        message: String,
    },

    #[error("length mismatch: {0} predictions vs {1} observations")]
    LengthMismatch(usize, usize),

    #[error("observed targets have zero variance; R2 and NRMSE are undefined")]
    ZeroVarianceTruth,

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. } | Error::Divergence { .. } | Error::NonFinite(_)
        )
    }
}
