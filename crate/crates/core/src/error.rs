//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // navigation graph
    #[error("edge endpoint `{0}` is not a node of the graph")]
    UnknownEndpoint(String),
    #[error("self-loop on node `{0}`")]
    SelfLoop(String),
    #[error("duplicate edge between `{0}` and `{1}`")]
    DuplicateEdge(String, String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("no path between `{from}` and `{to}`")]
    NoPath { from: String, to: String },
    #[error("radius must be nonnegative, got {0}")]
    NegativeRadius(f64),

    // synthetic world
    #[error("infeasible world spec: {0}")]
    InfeasibleSpec(String),
    #[error("landmark index {index} out of range (have {count})")]
    BadLandmarkIndex { index: usize, count: usize },
    #[error("view index {0} out of range [0, 36)")]
    BadViewIndex(usize),

    // dataset
    #[error("positive set is empty")]
    EmptyPositiveSet,
    #[error("could not construct a valid episode after {0} attempts")]
    SamplingExhausted(usize),
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    // numerics and model
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("softmax over an empty axis")]
    EmptyAxis,
    #[error("embedding dim {dim} is not divisible by {heads} heads")]
    BadHeadCount { dim: usize, heads: usize },
    #[error("non-finite value: {0}")]
    NonFiniteValue(String),
    #[error("trajectory has {steps} steps, more than the maximum {max}")]
    TooManySteps { steps: usize, max: usize },
    #[error("cannot select a step from an empty prediction")]
    EmptyPrediction,

    // loss
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("probability {0} outside [0, 1]")]
    ProbOutOfRange(f64),

    // training
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss diverged at iteration {iteration}: {value}")]
    DivergedLoss { iteration: usize, value: f64 },

    // evaluation and correction
    #[error("trajectory starts at `{found}`, episode starts at `{expected}`")]
    StartMismatch { expected: String, found: String },
    #[error("predicted step {step} out of range for trajectory of length {len}")]
    BadStep { step: usize, len: usize },
    #[error("empty path")]
    EmptyPath,

    // configuration, recipes, io
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("{} assertion(s) failed: {}", .0.len(), .0.join("; "))]
    AssertionFailed(Vec<String>),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
