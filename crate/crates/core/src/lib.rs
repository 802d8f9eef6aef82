pub mod baseline;
pub mod checkpoint;
pub mod decode;
pub mod diff;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod setmatch;
pub mod synthgen;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use decode::DetectionRecord;
pub use diff::Tensor;
pub use io::SequenceDetections;
pub use model::Model;
pub use setmatch::{LossBreakdown, PredictedEvent, PredictedSets};
pub use types::{EventSpan, LossWeights, MatchingMode, PositionalMode, RunConfig, SequenceSample};
