use thiserror::Error;

use crate::workload::BlockId;

/// Errors raised while validating or transforming workloads and schedules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),

    #[error("invalid block table: {0}")]
    InvalidTable(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("child index {index} out of range for {children} children")]
    InvalidChildIndex { index: usize, children: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no register usage entry for tile ({m}, {n})")]
    MissingRegisterEntry { m: u32, n: u32 },

    #[error("feasible set is empty")]
    EmptyFeasibleSet,

    #[error("no feasible tile configuration: {0}")]
    NoFeasibleConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("attention span is empty")]
    EmptySpan,

    #[error("no partial results to merge")]
    EmptyList,

    #[error("merged softmax denominator is not positive ({0})")]
    NonPositiveDenominator(f64),

    #[error("query {query} is not fully covered: {detail}")]
    CoverageGap { query: usize, detail: String },

    #[error("unknown block id {0}")]
    UnknownBlock(BlockId),

    #[error("malformed binary dump: {0}")]
    Dump(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
