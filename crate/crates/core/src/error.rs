use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("no annotation file for audio {0}")]
    MissingAnnotation(PathBuf),

    #[error("{path}: malformed annotation row {row}: {reason}")]
    MalformedRow {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("{path}: cycle on row {row} ends at {t_end}s but the recording lasts {duration}s")]
    CycleOutOfBounds {
        path: PathBuf,
        row: usize,
        t_end: f64,
        duration: f64,
    },

    #[error("bad filename {0}: expected patient_recording_location_mode_device")]
    BadFilename(String),

    #[error("split listing references unknown recording {0}")]
    UnknownRecording(String),

    #[error("recording {0} has no entry in the split listing")]
    UnlistedRecording(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("label {0} out of range for 4 classes")]
    LabelOutOfRange(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {0} truth labels vs {1} predictions")]
    LengthMismatch(usize, usize),

    #[error("loss became {loss} at iteration {iteration} (lr {lr})")]
    NonFiniteLoss { iteration: usize, lr: f64, loss: f64 },

    #[error("epsilon {epsilon} is not on the profiling grid {grid:?}")]
    EpsilonOffGrid { epsilon: f64, grid: Vec<f64> },

    #[error("model has no attention head")]
    NoAttention,

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("bad feature cache: {0}")]
    Cache(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
