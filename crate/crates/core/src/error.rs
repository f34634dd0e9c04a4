use std::path::PathBuf;

use crate::skb::ClassId;
use crate::PairId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty knowledge base")]
    EmptyKnowledgeBase,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("attribute value is not a number at position {0}")]
    NotANumber(usize),

    #[error("no samples for class {0}")]
    NoSamples(ClassId),

    #[error("class {class} outside 1..={num_classes}")]
    ClassOutOfRange { class: u32, num_classes: usize },

    #[error("knowledge base with role {role} must hold all {expected} classes, found {found}")]
    IncompleteSkb {
        role: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("label lists differ in length: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },

    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("distance must be positive, got {0} m")]
    NonPositiveDistance(f64),

    #[error("zero-rate link")]
    ZeroRateLink,

    #[error("pair {0} has not been trained")]
    UntrainedPair(PairId),

    #[error("training reference is missing classes {missing:?}; merge it with a local SKB first")]
    PartialReference { missing: Vec<ClassId> },

    #[error("config error: {0}")]
    Config(String),

    #[error("round {round}: message for round {got} is stale")]
    StaleRound { round: u32, got: u32 },

    #[error("round {round} aborted: pair {pair} dropped out")]
    PairDropout { round: u32, pair: PairId },

    #[error("round {round}: transport failure (retriable): {source}")]
    Transport {
        round: u32,
        #[source]
        source: std::io::Error,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidThreshold(_) | Error::InvalidParameter { .. }
        )
    }

    /// Transport failures can be retried by re-running the round.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
