use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {class} has {count} events but the set capacity is {capacity}")]
    Capacity {
        class: usize,
        count: usize,
        capacity: usize,
    },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("degenerate segment ({start}, {end})")]
    DegenerateSegment { start: f64, end: f64 },

    #[error("non-finite value {value} at {location}")]
    NonFinite { location: String, value: f64 },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph has already been consumed by a backward pass")]
    GraphConsumed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
