use thiserror::Error;

/// Errors raised by the cache, the attention pipeline and the fallback ladder.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite {what} at row {row}, channel {channel}")]
    NonFinite {
        what: &'static str,
        row: usize,
        channel: usize,
    },

    #[error("expected {expected} elements, got {actual} ({context})")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("group size {group_size} does not divide head dimension {head_dim}")]
    GroupSize { group_size: usize, head_dim: usize },

    #[error("cache holds no tokens")]
    EmptyCache,

    #[error("block {index} out of range ({full_blocks} full blocks)")]
    BlockOutOfRange { index: usize, full_blocks: usize },

    /// A promoted block was not resident when the attend pass needed it.
    #[error("promoted {kind} block {index} is not resident in scratch")]
    ScratchMiss { kind: &'static str, index: usize },

    /// Tier-2 originals are gone; no certified or dense output can be produced.
    #[error("tier-2 originals unavailable: {0}")]
    Tier2Unavailable(String),

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("perturbation bound must be non-negative, got {0}")]
    NegativeDelta(f64),

    #[error("ranking depth {depth} exceeds promoted set size {promoted}")]
    RankingDepth { depth: usize, promoted: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for failures of precondition P4, which must surface as a hard error.
    pub fn is_tier2_failure(&self) -> bool {
        matches!(self, Error::Tier2Unavailable(_))
    }
}
