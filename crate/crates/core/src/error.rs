use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("column `{0}` missing from header")]
    MissingColumn(String),

    #[error("row {row}, column `{column}`: expected a finite number, got `{value}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: duplicate id {id}")]
    DuplicateId { row: usize, id: u64 },

    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("enumeration budget exceeded: {needed} candidates > budget {budget}")]
    EnumerationBudget { needed: u128, budget: u64 },

    #[error("design `{0}` does not support exhaustive enumeration")]
    EnumerationUnsupported(String),

    #[error("predictor fingerprint does not match the training subsample; the assisting model must be fitted on s1 only")]
    FingerprintMismatch,

    #[error("variance estimator unavailable: {0}")]
    VarianceUnavailable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
