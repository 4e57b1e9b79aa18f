use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least {needed} items, got {found}")]
    TooFew { needed: usize, found: usize },

    #[error("dimension mismatch at item {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at item {index}")]
    NonFinite { index: usize },

    #[error("zero-norm vector at index {index} cannot be used with the cosine metric")]
    ZeroNorm { index: usize },

    #[error("index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("exclusion set covers every node")]
    ExcludesAll,

    #[error("invalid affinity matrix: {0}")]
    InvalidAffinity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    NotConverged { estimate: f64, iterations: usize },

    #[error("degenerate payoff: x'Bx = {0} is not positive")]
    DegeneratePayoff(f64),

    #[error("subset of size {size} exceeds oracle limit {limit}")]
    OracleScale { size: usize, limit: usize },

    #[error("node {node} violates subset membership requirement: {reason}")]
    Membership { node: usize, reason: &'static str },

    #[error("solver failed for probes {probes:?}: {first}")]
    ProbeFailures {
        probes: Vec<usize>,
        first: Box<Error>,
    },

    #[error("average precision undefined for probe {probe}: no valid relevant gallery item")]
    UndefinedAp { probe: usize },

    #[error("no query has a defined average precision")]
    NoDefinedQueries,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("bad magic bytes, not a DCDS feature file")]
    BadMagic,

    #[error("unsupported format version {0}")]
    VersionMismatch(u32),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error comes from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. } | Error::DegeneratePayoff(_) | Error::ProbeFailures { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
