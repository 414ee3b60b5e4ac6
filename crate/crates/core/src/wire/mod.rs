//! Shared wire layer: canonical serialization, stream framing, and the
//! message envelope every process exchanges.

pub mod canonical;
pub mod frame;
pub mod message;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("value not representable in canonical form: {0}")]
    NonRepresentable(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    FrameTooLarge { len: usize, max: usize },
    #[error("datagram of {len} bytes exceeds the {max} byte limit")]
    DatagramTooLarge { len: usize, max: usize },
    #[error("stream truncated mid-frame")]
    Truncated,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("message signature missing or invalid")]
    BadSignature,
    #[error("unexpected message: expected {expected}, got {got}")]
    UnexpectedMessage { expected: &'static str, got: String },
}

pub use canonical::{from_canonical_bytes, to_canonical_bytes};
pub use frame::{frame_recv, frame_send, MAX_DATAGRAM_BYTES, MAX_FRAME_BYTES};
pub use message::{MessagePayload, WireMessage};
