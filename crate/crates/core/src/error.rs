use thiserror::Error;

use crate::domain::JobId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("attribute name must not be empty")]
    EmptyAttributeName,
    #[error("attribute `{name}` has non-finite value {value}")]
    NonFiniteValue { name: String, value: f64 },
    #[error("invalid job spec: {0}")]
    InvalidJobSpec(&'static str),
    #[error("invalid client info: {0}")]
    InvalidClient(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse query `{input}` at byte {position}: {reason}")]
pub struct QueryParseError {
    pub input: String,
    pub position: usize,
    pub reason: &'static str,
}

/// Why an allocation-counter increment was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum IncrementRejected {
    #[error("job {0} does not exist")]
    UnknownJob(JobId),
    #[error("job {0} is not requesting clients")]
    NotRequesting(JobId),
    #[error("job {0} already holds its full demand")]
    Saturated(JobId),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApiError {
    #[error("job {0} does not exist")]
    UnknownJob(JobId),
    #[error("unknown job field `{0}`")]
    UnknownField(String),
    #[error("small-batch policies may not write scores")]
    ScoreWriteForbidden,
    #[error(transparent)]
    Query(#[from] QueryParseError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataPlaneError {
    #[error("plan for {job} round {round} has not been published")]
    NotReady { job: JobId, round: u32 },
    #[error("round {round} of {job} has been superseded by round {current}")]
    StaleRound { job: JobId, round: u32, current: u32 },
    #[error("contribution has {got} elements, model has {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("round {round} of {job} is closed; contribution dropped")]
    Late { job: JobId, round: u32 },
    #[error("node {0} is not part of the tree")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("round {round} of {job} has no aggregated weight")]
    ZeroWeight { job: JobId, round: u32 },
    #[error("individual contributions are not accessible while aggregation is offloaded")]
    Offloaded,
    #[error("invalid tree: {0}")]
    InvalidTree(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trace line {line}: {source}")]
    TraceParse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("trace line {line}: {source}")]
    TraceRecord {
        line: usize,
        #[source]
        source: DomainError,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    DataPlane(#[from] DataPlaneError),
}
