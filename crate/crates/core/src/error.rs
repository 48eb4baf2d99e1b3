use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: non-numeric value in column `{column}`: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: non-finite value in column `{column}`")]
    NonFinite { row: usize, column: String },
    #[error("row {row}: period out of range ({period})")]
    PeriodOutOfRange { row: usize, period: i64 },
    #[error("cluster `{cluster}`: inconsistent adoption time across rows")]
    InconsistentAdoption { cluster: String },
    #[error("cluster `{cluster}`: adoption time {z} outside 1..={n_periods}")]
    AdoptionOutOfRange {
        cluster: String,
        z: i64,
        n_periods: usize,
    },
    #[error("data validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("rank-deficient design: coefficient `{0}` is not identified")]
    RankDeficient(String),
    #[error("fit did not converge after {iterations} iterations (score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        last: Vec<f64>,
    },
    #[error("sandwich Jacobian singular")]
    SingularJacobian,
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// True for errors raised while fitting a model rather than reading data.
    pub fn is_fit_failure(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::NonConvergence { .. }
                | Error::SingularJacobian
                | Error::NotPositiveDefinite(_)
        )
    }

    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingColumn(_)
                | Error::NonNumeric { .. }
                | Error::NonFinite { .. }
                | Error::PeriodOutOfRange { .. }
                | Error::InconsistentAdoption { .. }
                | Error::AdoptionOutOfRange { .. }
                | Error::Validation(_)
                | Error::Csv(_)
        )
    }
}
