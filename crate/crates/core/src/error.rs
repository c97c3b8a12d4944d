use thiserror::Error;

/// Broad failure class, used by front ends to map errors onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate cell ({row}, {col}) at line {line}")]
    DuplicateCell { row: String, col: String, line: usize },

    #[error("incomplete grid: {present} of {expected} cells present (first missing: row {row}, col {col})")]
    IncompleteGrid { present: usize, expected: usize, row: String, col: String },

    #[error("invalid treatment value {value} at line {line}: binary mode requires 0 or 1")]
    InvalidTreatment { value: String, line: usize },

    #[error("schema error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    SchemaError { msg: String, line: Option<usize> },

    #[error("fold count {k} outside [2, {max}]")]
    InvalidFoldCount { k: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("gram matrix is singular (ridge {ridge})")]
    SingularGram { ridge: f64 },

    #[error("degenerate treatment: training subsample has a single class{}", block.map(|(k, l)| format!(" in block ({k}, {l})")).unwrap_or_default())]
    DegenerateTreatment { block: Option<(usize, usize)> },

    #[error("arm {arm} has {have} observations, need at least {need}")]
    InsufficientArmData { arm: u8, have: usize, need: usize },

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("degenerate variance at grid point x = {x}")]
    DegenerateVariance { x: f64 },

    #[error("invalid correlation {rho}: must lie in (-1, 1)")]
    InvalidCorrelation { rho: f64 },

    #[error("invalid configuration `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    #[error("replication {replication} failed: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::InvalidConfig { field: field.into(), msg: msg.into() }
    }

    pub fn schema(msg: impl Into<String>, line: Option<usize>) -> Self {
        Error::SchemaError { msg: msg.into(), line }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig { .. } | Error::InvalidFoldCount { .. } | Error::InvalidCorrelation { .. } => {
                ErrorClass::Config
            }
            Error::DuplicateCell { .. }
            | Error::IncompleteGrid { .. }
            | Error::InvalidTreatment { .. }
            | Error::SchemaError { .. }
            | Error::EmptyInput(_)
            | Error::DegenerateTreatment { .. }
            | Error::InsufficientArmData { .. }
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::SingularGram { .. } | Error::NumericalInstability(_) | Error::DegenerateVariance { .. } => {
                ErrorClass::Numeric
            }
            Error::Replication { source, .. } => source.class(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
