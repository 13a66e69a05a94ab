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

    #[error("non-binary {what} at row {row}: `{value}`")]
    NonBinary {
        what: &'static str,
        row: usize,
        value: String,
    },

    #[error("non-numeric value in column `{column}` at row {row}: `{value}`")]
    NonNumeric { column: String, row: usize, value: String },

    #[error("empty trial cell (s=1, a={a}): both trial arms need at least one observation")]
    EmptyTrialCell { a: u8 },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("estimation failed: {0}")]
    Estimation(String),
}

impl Error {
    /// True for errors caused by malformed or invalid user input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Csv(_)
                | Error::MissingColumn(_)
                | Error::NonBinary { .. }
                | Error::NonNumeric { .. }
                | Error::EmptyTrialCell { .. }
                | Error::InvalidData(_)
                | Error::InvalidArgument(_)
                | Error::DimensionMismatch { .. }
        )
    }
}
