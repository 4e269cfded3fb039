use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, Error)]
pub enum PcpError {
    #[error("cannot normalize a zero-length vector")]
    DegenerateVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for {len} rows")]
    IndexError { index: usize, len: usize },
    #[error("epoch {epoch} outside schedule range 0..={total}")]
    ScheduleRange { epoch: usize, total: usize },
    #[error("requested {k} clusters for {n} samples")]
    TooManyClusters { k: usize, n: usize },
    #[error("cluster count must be at least 1")]
    InvalidK,
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("assignment history is empty")]
    NoHistory,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("numeric error: {0}")]
    NumericError(String),
    #[error("forward cache does not match the current parameters")]
    CacheInvalid,
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("ingest error at {location}: {message}")]
    IngestError { location: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("epoch {epoch}: {source}")]
    AtEpoch {
        epoch: usize,
        #[source]
        source: Box<PcpError>,
    },
}

impl PcpError {
    pub(crate) fn ingest(location: impl Into<String>, message: impl Into<String>) -> Self {
        PcpError::IngestError {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PcpError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_epoch(self, epoch: usize) -> Self {
        match self {
            e @ PcpError::AtEpoch { .. } => e,
            e => PcpError::AtEpoch {
                epoch,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping epoch context wrappers.
    pub fn root(&self) -> &PcpError {
        match self {
            PcpError::AtEpoch { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            PcpError::ConfigError(_) => 2,
            PcpError::IngestError { .. } => 3,
            PcpError::NumericError(_) | PcpError::DegenerateVector => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PcpError>;
