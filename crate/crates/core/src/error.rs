use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("no active beams")]
    NoActiveBeams,
    #[error("path exceeds cache budget")]
    PathExceedsBudget,
    #[error("cache budget held by pinned paths")]
    CachePinned,
    #[error("empty schedule instance")]
    EmptyInstance,
    #[error("oracle limit exceeded")]
    OracleLimitExceeded,
    #[error("memory budget insufficient")]
    MemoryInsufficient,
    #[error("workload trace underrun")]
    TraceUnderrun,
    #[error("no completed beams")]
    NoCompletedBeams,
    #[error("{field} out of range")]
    OutOfRange { field: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
}
