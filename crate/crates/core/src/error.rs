use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("checkpoint load error: {0}")]
    Load(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Contract(_)
            | Error::Range(_)
            | Error::Lookup(_)
            | Error::Dimension(_)
            | Error::DegenerateBatch(_) => 1,
            Error::Parse { .. }
            | Error::Format(_)
            | Error::Load(_)
            | Error::UndefinedMetric(_)
            | Error::Io(_) => 2,
            Error::Numeric(_) | Error::OracleInvalid(_) | Error::Invariant(_) => 3,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::UnequalLengths { pos, expected_len, len } => Error::Format(format!(
                "ragged row{}: expected {expected_len} fields, found {len}",
                pos.as_ref()
                    .map(|p| format!(" at line {}", p.line()))
                    .unwrap_or_default()
            )),
            _ => Error::Format(e.to_string()),
        }
    }
}
