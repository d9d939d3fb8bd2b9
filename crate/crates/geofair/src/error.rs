use thiserror::Error;

/// Error type shared across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column '{0}'")]
    MissingColumn(String),
    #[error("integrity error: duplicate region id '{0}'")]
    DuplicateId(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate labels: {0}")]
    Degenerate(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("coverage error: regions without featurized tiles: {0:?}")]
    Coverage(Vec<String>),
    #[error("singular system at lambda=0; use lambda > 0")]
    Singular,
    #[error("class error: {0}")]
    Class(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("feasibility error: {0}")]
    Feasibility(String),
    #[error("unknown group '{0}' at calibration time")]
    UnknownGroup(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("run {seed} failed: {source}")]
    Run {
        seed: u64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 missing input, 4 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::MissingInput(_) => 3,
            Error::DuplicateId(_) | Error::Data(_) | Error::Parse { .. } => 4,
            Error::Run { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
