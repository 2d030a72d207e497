use std::fmt;
use std::path::PathBuf;

/// One rejected row of an input file.
#[derive(Debug, Clone, PartialEq)]
pub struct RowViolation {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "row {}: {}", self.row, self.message)
    }
}

fn join_violations(v: &[RowViolation]) -> String {
    let shown: Vec<String> = v.iter().take(20).map(|r| r.to_string()).collect();
    let mut s = shown.join("; ");
    if v.len() > 20 {
        s.push_str(&format!("; ... and {} more", v.len() - 20));
    }
    s
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed file {path:?} at row {row}: {message}")]
    MalformedFile {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("invariant violation: {}", join_violations(.0))]
    InvariantViolation(Vec<RowViolation>),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("degenerate series for `{0}` (zero variance)")]
    DegenerateSeries(String),

    #[error("insufficient overlap between `{0}` and `{1}`: {2} common hours")]
    InsufficientOverlap(String, String, usize),

    #[error("empty series")]
    EmptySeries,

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("unknown zone `{0}`")]
    UnknownZone(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training data for {0} contains a single class")]
    SingleClassData(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty threshold grid")]
    EmptyGrid,

    #[error("split overlap: {0}")]
    SplitOverlap(String),

    #[error("supply and demand curves do not cross")]
    NoCrossing,

    #[error("invalid bid stack: {0}")]
    InvalidStack(String),

    #[error("no calibration hours with a bid stack in bucket {0}")]
    EmptyBucket(String),

    #[error("zone `{0}` has non-positive mean load")]
    ZeroLoad(String),

    #[error("reference zone `{0}` missing from mean loads")]
    MissingReference(String),

    #[error("degenerate regressor: {0}")]
    DegenerateRegressor(String),

    #[error("missing coefficient: {0}")]
    MissingCoefficient(String),

    #[error("empty support")]
    EmptySupport,

    #[error("empty trade set")]
    EmptyTrades,

    #[error("missing calibration: {0}")]
    MissingCalibration(String),

    #[error("leakage audit failed for columns: {}", .0.join(", "))]
    Leakage(Vec<String>),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
