use thiserror::Error;

pub type Result<T> = std::result::Result<T, LmmError>;

#[derive(Debug, Error)]
pub enum LmmError {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    ParseCell {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}, column `{column}`: missing value")]
    MissingValue { row: usize, column: String },

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("rank deficient design: {0}")]
    RankDeficient(String),

    #[error("marginal covariance block for cluster `{cluster}` is not positive definite")]
    Singular { cluster: String },

    #[error("parameter index {index} out of range (K = {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("parameter vector has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{0}")]
    NotPositiveDefinite(String),

    #[error("meat matrix is degenerate: {0}")]
    DegenerateMeat(String),

    #[error("sandwich diagonal entry `{name}` is negative ({value:e})")]
    NegativeVariance { name: String, value: f64 },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
