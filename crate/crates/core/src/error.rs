use thiserror::Error;

use crate::ring::IdPoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty ID space")]
    EmptyRing,
    #[error("duplicate ID {0} (64-bit collision)")]
    IdCollision(IdPoint),
    #[error("distance sample {0} outside (0, 1)")]
    InvalidSample(f64),
    #[error("no samples")]
    NoSamples,
    #[error("input graph needs at least 2 IDs, got {0}")]
    TooFewIds(usize),
    #[error("ID {0} is not in the graph")]
    UnknownId(IdPoint),
    #[error("routing divergence: {hops} hops from {origin} toward {key}")]
    RoutingDivergence {
        origin: IdPoint,
        key: IdPoint,
        hops: usize,
    },
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("search origin {0} is a red group")]
    RedOrigin(IdPoint),
    #[error("filter inconclusive: no strict majority among {0} senders")]
    FilterInconclusive(usize),
    #[error("empty input to majority filter")]
    EmptyFilterInput,
    #[error("epoch underrun: {0}")]
    EpochUnderrun(String),
    #[error("no strings observed")]
    NoStringsObserved,
    #[error("need at least {needed} groups for a bootstrap sample, have {available}")]
    TooFewGroups { needed: usize, available: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("infeasible target: {0}")]
    Infeasible(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no results to report")]
    EmptyResults,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
