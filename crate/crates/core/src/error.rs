use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("panel is empty after filtering: {0}")]
    EmptyPanel(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "lasso did not converge after {iterations} sweeps (max coordinate change {max_change:e})"
    )]
    NonConvergence {
        iterations: usize,
        max_change: f64,
        last_iterate: Vec<f64>,
    },

    #[error("degenerate asset {0}: zero variance")]
    DegenerateAsset(String),

    #[error("eigenvalue cleaning impossible: matrix has no positive eigenvalue")]
    NoPositiveEigenvalue,

    #[error("singular matrix in {context} (condition estimate {condition:e})")]
    Singular { context: String, condition: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(
        "MWC target unattainable: iota' Theta m = {0:e} <= 0, the minimum cannot be achieved \
         exactly under the full-investment constraint"
    )]
    UnattainableConstraint(f64),

    #[error("degenerate means: (m'Θm)(ι'Θι) - (m'Θι)^2 = {0:e} is numerically zero")]
    DegenerateMeans(f64),

    #[error("zero Sharpe: m'Θm = {0:e} is not positive")]
    ZeroSharpe(f64),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("undefined Sharpe ratio: portfolio returns have zero standard deviation")]
    UndefinedSharpe,

    #[error("pathological return at period {period}: 1 + r + rf = {value:e} <= 0")]
    PathologicalReturn { period: usize, value: f64 },

    #[error("lambda tuning failed for every grid point: {}", .0.join("; "))]
    Tuning(Vec<String>),

    #[error("rebalance at {date} failed: {source}")]
    Rebalance {
        date: String,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation aborted: {failed} of {total} replications failed at T={t}")]
    TooManyFailures {
        t: usize,
        failed: usize,
        total: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by input data rather than numerics or configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation(_)
                | Error::EmptyPanel(_)
                | Error::DegenerateAsset(_)
                | Error::Io { .. }
                | Error::Csv(_)
                | Error::Json(_)
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
