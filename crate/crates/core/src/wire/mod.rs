//! The classical channel: frames, typed messages, transports and scripted
//! two-party sessions.

mod frame;
mod message;
mod session;
mod transport;

pub use frame::{
    decode_frame, encode_frame, header_payload_len, Frame, WireError, FRAME_HEADER_LEN, FRAME_MAGIC,
    FRAME_TRAILER_LEN, MAX_PAYLOAD,
};
pub use message::{
    compress_ranges, decode_message, encode_message, fragment_propose, fragment_respond,
    fragment_reveal, AbortCode, Hello, LineRange, MessageType, ProposeBatch, Proposal, RespondBatch,
    Response, Reveal, RevealBatch, TestLine, TestLines, VerifyKind, VerifyResult, WireMessage,
    FLAG_MORE, PROTOCOL_VERSION,
};
pub use session::*;
pub use transport::{
    replay_transport, Direction, FrameSink, FrameSource, Link, Transcript, TranscriptFrame, Transport,
};
