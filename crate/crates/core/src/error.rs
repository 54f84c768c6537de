use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Data,
    Solver,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{what} = {value} lies outside its admissible domain")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid knot sequence: {0}")]
    Knots(String),

    #[error("no aligned time grid for N_t = {requested}: {reason}")]
    Alignment { requested: usize, reason: String },

    #[error("jump step violates dt <= 1/lambda: dt = {dt}, limit = {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("zero or non-finite pivot at row {row}")]
    SingularPivot { row: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("non-finite value in {stage} at step {step}")]
    NonFinite { stage: &'static str, step: usize },

    #[error("time-grid cadence broken at row {row}: {detail}")]
    Cadence { row: usize, detail: String },

    #[error("incomplete day: {detail}")]
    Incomplete { detail: String },

    #[error("moving average needs {required} samples of history, only {available} given")]
    Lookback { required: usize, available: usize },

    #[error("snapshot payload has {actual} bytes, header implies {expected}")]
    SnapshotSize { expected: u64, actual: u64 },

    #[error("snapshot index order `{found}` is not the supported `n,i,j,k`")]
    SnapshotOrder { found: String },

    #[error("malformed snapshot: {0}")]
    SnapshotFormat(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidParameter { .. }
            | Error::Domain { .. }
            | Error::Alignment { .. }
            | Error::Config(_) => ErrorClass::Input,
            Error::Knots(_)
            | Error::Cadence { .. }
            | Error::Incomplete { .. }
            | Error::Lookback { .. }
            | Error::SnapshotSize { .. }
            | Error::SnapshotOrder { .. }
            | Error::SnapshotFormat(_)
            | Error::Data(_)
            | Error::Csv(_) => ErrorClass::Data,
            Error::Cfl { .. }
            | Error::SingularPivot { .. }
            | Error::Dimension { .. }
            | Error::NonFinite { .. } => ErrorClass::Solver,
            Error::Io(_) => ErrorClass::Io,
        }
    }

    /// Short stable tag for machine-readable error records.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Domain { .. } => "domain",
            Error::Knots(_) => "knots",
            Error::Alignment { .. } => "alignment",
            Error::Cfl { .. } => "cfl",
            Error::SingularPivot { .. } => "singular_pivot",
            Error::Dimension { .. } => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::Cadence { .. } => "cadence",
            Error::Incomplete { .. } => "incomplete",
            Error::Lookback { .. } => "lookback",
            Error::SnapshotSize { .. } => "snapshot_size",
            Error::SnapshotOrder { .. } => "snapshot_order",
            Error::SnapshotFormat(_) => "snapshot_format",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}
