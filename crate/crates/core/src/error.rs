//! Error type shared by every module in the crate.

/// Errors surfaced by placement, scheduling, search, and simulation code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violates a documented precondition (dimension mismatch,
    /// index out of range, negative budget, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation that requires data was handed an empty input.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// No placement satisfies the existence and capacity constraints.
    #[error("infeasible placement: {0}")]
    InfeasiblePlacement(String),

    /// Exhaustive enumeration would exceed the search-space guard.
    #[error("search space too large: {0}")]
    TooLarge(String),

    /// A latency-model or search parameter is out of its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A request lifecycle event arrived in a phase that does not accept it.
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// A scheduling call was made with no nodes of the required role.
    #[error("no capacity: {0}")]
    NoCapacity(String),

    /// A simulation or workload configuration is internally inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
