use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:.3e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("non-numeric cell in column `{column}` at data row {row}: `{value}`")]
    NonNumericCell { column: String, row: usize, value: String },

    #[error("model is not identifiable: {0}")]
    IdentifiabilityViolation(String),

    #[error("fixed-effects design does not have full column rank (rank {rank} < {p})")]
    RankDeficientX { rank: usize, p: usize },

    #[error("X'V^-1 X is singular")]
    SingularH,

    #[error("optimizer did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("dense N x N assembly requested for N = {n}, above the cap of {cap}")]
    DimensionGuard { n: usize, cap: usize },

    #[error("transform kit was not built for the {0} variant")]
    VariantMissing(&'static str),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid column subset: {0}")]
    InvalidSubset(String),

    #[error("null replicate {replicate} failed to refit: {reason}")]
    NullRefitFailure { replicate: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the data or configuration handed in by the
    /// caller, as opposed to numerical failures during fitting.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::NonNumericCell { .. }
                | Error::IdentifiabilityViolation(_)
                | Error::RankDeficientX { .. }
                | Error::LengthMismatch(_)
                | Error::InvalidSubset(_)
                | Error::InvalidInput(_)
                | Error::DimensionGuard { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }
}
