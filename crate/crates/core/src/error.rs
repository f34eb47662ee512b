use thiserror::Error;

use crate::transport::MessageType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Reason codes carried by an `ABORT` frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortReason {
    Unspecified = 0,
    ShareMismatch = 1,
    MalformedNode = 2,
    IntegrityCheck = 3,
    Protocol = 4,
    Capacity = 5,
    MinMaxInconsistent = 6,
    RateLimited = 7,
}

impl AbortReason {
    pub fn from_code(code: u8) -> Self {
        match code {
            1 => Self::ShareMismatch,
            2 => Self::MalformedNode,
            3 => Self::IntegrityCheck,
            4 => Self::Protocol,
            5 => Self::Capacity,
            6 => Self::MinMaxInconsistent,
            7 => Self::RateLimited,
            _ => Self::Unspecified,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Caller misused an API (wrong key, missing input, absent order, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("ciphertext was produced under a different public key")]
    KeyMismatch,

    /// Prime search gave up; retrying with fresh randomness may succeed.
    #[error("prime generation failed after {0} attempts")]
    PrimeGeneration(usize),

    #[error("order gap exhausted between {left} and {right}")]
    GapExhausted { left: u128, right: u128 },

    #[error("order space exhausted: {entries} entries cannot be spread over [1, {max_order})")]
    Capacity { entries: usize, max_order: u128 },

    #[error("comparison shares disagree in round {round}")]
    ShareMismatch { round: usize },
    #[error("malformed node: {0}")]
    MalformedNode(String),
    #[error("min-max selection inconsistent: {0}")]
    MinMaxInconsistent(String),
    #[error("session refused by rate limit")]
    RateLimited,
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("garbled output label did not decode")]
    DecodeFailed,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unexpected message: expected {expected:?}, got {got:?}")]
    UnexpectedMessage {
        expected: Vec<MessageType>,
        got: MessageType,
    },

    #[error("handshake failed: {0}")]
    Handshake(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("channel closed")]
    ChannelClosed,

    #[error("session aborted by peer: {0:?}")]
    Aborted(AbortReason),

    #[error("state file corrupted: {0}")]
    Corrupt(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Abort code to send to peers when this error ends a session.
    pub fn abort_reason(&self) -> AbortReason {
        match self {
            Error::Integrity(_) => AbortReason::IntegrityCheck,
            Error::Capacity { .. } | Error::GapExhausted { .. } => AbortReason::Capacity,
            Error::ShareMismatch { .. } => AbortReason::ShareMismatch,
            Error::MalformedNode(_) => AbortReason::MalformedNode,
            Error::MinMaxInconsistent(_) => AbortReason::MinMaxInconsistent,
            Error::RateLimited => AbortReason::RateLimited,
            Error::Aborted(r) => *r,
            Error::Protocol(_) | Error::UnexpectedMessage { .. } | Error::DecodeFailed => {
                AbortReason::Protocol
            }
            _ => AbortReason::Unspecified,
        }
    }
}
