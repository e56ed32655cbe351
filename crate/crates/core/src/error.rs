use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} has norm {norm:e}, cannot normalize")]
    ZeroRow { row: usize, norm: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("backward called without a cached forward pass ({0})")]
    MissingForwardCache(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("spatial leakage: {0}")]
    LeakageDetected(String),

    #[error("unknown Braun-Blanquet class {0:?}")]
    UnknownClass(String),
    #[error("unknown species {0:?}")]
    UnknownSpecies(String),
    #[error("duplicate entry: {0}")]
    DuplicateEntry(String),
    #[error("need at least {needed} absences, have {available}")]
    InsufficientAbsences { needed: usize, available: usize },
    #[error("sample {0} has zero total abundance")]
    EmptySample(usize),
    #[error("{cells} cells cannot fill {folds} folds")]
    TooFewCells { cells: usize, folds: usize },
    #[error("empty training data")]
    EmptyData,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("zero variance: {0}")]
    ZeroVariance(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("clusters {0} and {1} share a centroid")]
    DegenerateCluster(usize, usize),
    #[error("all paired differences are zero")]
    AllZeroDifferences,

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("truncated file {0}")]
    TruncatedFile(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            ZeroRow { .. }
            | NonFinite(_)
            | NotNormalized { .. }
            | MissingForwardCache(_)
            | UndefinedMetric(_)
            | ZeroVariance(_)
            | Degenerate(_)
            | DegenerateCluster(..)
            | AllZeroDifferences => ErrorKind::Numeric,
            Config(_) | InvalidArgument(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}
