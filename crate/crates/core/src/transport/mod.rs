//! Typed, length-prefixed binary framing for all client/server messages.
//!
//! Wire layout: u32 LE payload length, u8 message type, u32 LE round,
//! u16 LE client id, payload bytes. Both channel backends move exactly
//! these bytes, so a run is a pure function of the configuration no matter
//! which backend carries it.

mod channel;

pub use channel::{inproc_pair, InprocLink, ReplayLink, SocketLink};

use std::time::Duration;

use thiserror::Error;

pub const FRAME_HEADER_LEN: usize = 11;
/// Payloads are capped at 2^31 bytes.
pub const MAX_PAYLOAD: usize = 1 << 31;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("length mismatch: header declares {declared} payload bytes, buffer holds {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload of {0} bytes exceeds the 2^31 limit")]
    PayloadTooLarge(usize),
    #[error("channel closed")]
    Closed,
    #[error("timed out after {0:?} waiting for a frame")]
    Timeout(Duration),
    #[error("socket error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Register = 1,
    SyntheticUpload = 2,
    ModelUpdate = 3,
    GlobalModel = 4,
    MetricsReport = 5,
    Shutdown = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self, TransportError> {
        Ok(match v {
            1 => MsgType::Register,
            2 => MsgType::SyntheticUpload,
            3 => MsgType::ModelUpdate,
            4 => MsgType::GlobalModel,
            5 => MsgType::MetricsReport,
            6 => MsgType::Shutdown,
            other => return Err(TransportError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub round: u32,
    pub client_id: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, round: u32, client_id: u16, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            round,
            client_id,
            payload,
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, TransportError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(TransportError::PayloadTooLarge(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.round.to_le_bytes());
    out.extend_from_slice(&frame.client_id.to_le_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, TransportError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(TransportError::Truncated {
            needed: FRAME_HEADER_LEN,
            have: bytes.len(),
        });
    }
    let declared = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if declared > MAX_PAYLOAD {
        return Err(TransportError::PayloadTooLarge(declared));
    }
    let msg_type = MsgType::from_u8(bytes[4])?;
    let round = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    let client_id = u16::from_le_bytes(bytes[9..11].try_into().unwrap());
    let actual = bytes.len() - FRAME_HEADER_LEN;
    if actual < declared {
        return Err(TransportError::Truncated {
            needed: FRAME_HEADER_LEN + declared,
            have: bytes.len(),
        });
    }
    if actual > declared {
        return Err(TransportError::LengthMismatch { declared, actual });
    }
    Ok(Frame {
        msg_type,
        round,
        client_id,
        payload: bytes[FRAME_HEADER_LEN..].to_vec(),
    })
}

/// One endpoint of a bidirectional frame channel.
pub trait FrameLink: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Frame, TransportError>;
}
