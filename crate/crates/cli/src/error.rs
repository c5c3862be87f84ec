use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: row {row}, column {col}: {message}")]
    Parse { path: String, row: usize, col: usize, message: String },
    #[error("{path}: row {row}, column {col}: non-numeric cell '{value}'")]
    NonNumericCell { path: String, row: usize, col: usize, value: String },
    #[error("{path}: row {row}: date {date} appears more than once")]
    DuplicateDate { path: String, row: usize, date: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Domain(#[from] safcov::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CliError {
    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "ParseError",
            CliError::NonNumericCell { .. } => "NonNumericCell",
            CliError::DuplicateDate { .. } => "DuplicateDate",
            CliError::Usage(_) => "UsageError",
            CliError::Domain(_) => "DomainError",
            CliError::Io { .. } => "IoError",
            CliError::Json { .. } => "JsonError",
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
