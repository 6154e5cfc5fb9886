//! `"OTP1" | msg_type u8 | session_id u64 | payload_len u32 | payload | CRC32`,
//! little-endian, CRC over every preceding byte.

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 4] = *b"OTP1";
pub const FRAME_HEADER_LEN: usize = 17;
pub const FRAME_TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("frame checksum mismatch")]
    CrcMismatch,
    #[error("payload of {0} bytes exceeds the frame limit")]
    Oversize(usize),
    #[error("transport closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("replay diverged at frame {0}")]
    ReplayDivergence(usize),
}

impl From<std::io::Error> for WireError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::BrokenPipe
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted => WireError::Closed,
            _ => WireError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u8,
    pub session_id: u64,
    pub payload: Vec<u8>,
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>, WireError> {
    if frame.payload.len() > MAX_PAYLOAD {
        return Err(WireError::Oversize(frame.payload.len()));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.payload.len() + FRAME_TRAILER_LEN);
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(frame.msg_type);
    out.extend_from_slice(&frame.session_id.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Payload length announced by a complete header, validated against the limit.
pub fn header_payload_len(header: &[u8]) -> Result<usize, WireError> {
    if header.len() < FRAME_HEADER_LEN {
        return Err(WireError::Malformed("short header".into()));
    }
    if header[..4] != FRAME_MAGIC {
        return Err(WireError::Malformed("bad magic".into()));
    }
    let len = u32::from_le_bytes(header[13..17].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len));
    }
    Ok(len)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, WireError> {
    let len = header_payload_len(bytes)?;
    if bytes.len() != FRAME_HEADER_LEN + len + FRAME_TRAILER_LEN {
        return Err(WireError::Malformed(format!(
            "frame is {} bytes, header announces {}",
            bytes.len(),
            FRAME_HEADER_LEN + len + FRAME_TRAILER_LEN
        )));
    }
    let body = FRAME_HEADER_LEN + len;
    let stored = u32::from_le_bytes(bytes[body..].try_into().expect("4 bytes"));
    if stored != crc32fast::hash(&bytes[..body]) {
        return Err(WireError::CrcMismatch);
    }
    Ok(Frame {
        msg_type: bytes[4],
        session_id: u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")),
        payload: bytes[FRAME_HEADER_LEN..body].to_vec(),
    })
}
