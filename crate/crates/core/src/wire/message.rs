//! Typed payloads carried inside frames.

use super::frame::{decode_frame, encode_frame, Frame, WireError, MAX_PAYLOAD};
use crate::tabler::Party;

pub const PROTOCOL_VERSION: u16 = 1;
/// Flag bit on batch messages: more fragments of this batch follow.
pub const FLAG_MORE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    TableDigest = 2,
    DetectionDigest = 3,
    CoincConfirm = 4,
    ProposeBatch = 5,
    RespondBatch = 6,
    RevealBatch = 7,
    TestLines = 8,
    SignSubmit = 9,
    VerifyResult = 10,
    Abort = 11,
}

impl MessageType {
    pub fn from_code(code: u8) -> Option<MessageType> {
        use MessageType::*;
        Some(match code {
            1 => Hello,
            2 => TableDigest,
            3 => DetectionDigest,
            4 => CoincConfirm,
            5 => ProposeBatch,
            6 => RespondBatch,
            7 => RevealBatch,
            8 => TestLines,
            9 => SignSubmit,
            10 => VerifyResult,
            11 => Abort,
            _ => return None,
        })
    }
}

/// Reason carried by an ABORT frame. Security failures have their own codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum AbortCode {
    ProtocolViolation = 1,
    TableMismatch = 2,
    TableExhausted = 3,
    ChshFailure = 16,
    ThresholdFailure = 17,
    Internal = 255,
}

impl AbortCode {
    pub fn from_code(code: u8) -> Option<AbortCode> {
        use AbortCode::*;
        Some(match code {
            1 => ProtocolViolation,
            2 => TableMismatch,
            3 => TableExhausted,
            16 => ChshFailure,
            17 => ThresholdFailure,
            255 => Internal,
            _ => return None,
        })
    }

    pub fn is_security(self) -> bool {
        matches!(self, AbortCode::ChshFailure | AbortCode::ThresholdFailure)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub role: Party,
    pub version: u16,
    pub line_count: u64,
    pub table_seed: u64,
    pub digest: [u8; 32],
}

/// A run of consecutive line ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineRange {
    pub start: u64,
    pub len: u32,
}

impl LineRange {
    pub fn ids(&self) -> impl Iterator<Item = u64> {
        self.start..self.start + u64::from(self.len)
    }
}

/// Compresses ascending ids into maximal runs.
pub fn compress_ranges(ids: impl IntoIterator<Item = u64>) -> Vec<LineRange> {
    let mut out: Vec<LineRange> = Vec::new();
    for id in ids {
        match out.last_mut() {
            Some(r) if r.start + u64::from(r.len) == id && r.len < u32::MAX => r.len += 1,
            _ => out.push(LineRange { start: id, len: 1 }),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Proposal {
    pub request_id: u64,
    pub line_id: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProposeBatch {
    pub more: bool,
    pub round: u32,
    pub proposals: Vec<Proposal>,
    pub deleted: Vec<LineRange>,
    /// Requests Alice could not serve from the remaining table.
    pub exhausted: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Response {
    pub request_id: u64,
    pub line_id: u64,
    pub accept: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RespondBatch {
    pub more: bool,
    pub round: u32,
    pub responses: Vec<Response>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reveal {
    pub request_id: u64,
    pub pad: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevealBatch {
    pub more: bool,
    pub round: u32,
    pub reveals: Vec<Reveal>,
}

/// One test line as disclosed by its owner: Alice sends `(gate code, 0)`,
/// Bob sends `(input, output)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestLine {
    pub line_id: u64,
    pub a: u8,
    pub b: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestLines {
    pub party: Party,
    pub seed: u64,
    pub count: u32,
    pub lines: Vec<TestLine>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum VerifyKind {
    Signature = 0,
    Chsh = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    pub kind: VerifyKind,
    pub accept: bool,
    pub value: f64,
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello(Hello),
    TableDigest { round: u32, digest: [u8; 32] },
    DetectionDigest { party: Party, timestamps: Vec<i64> },
    CoincConfirm { bob_indices: Vec<u64> },
    ProposeBatch(ProposeBatch),
    RespondBatch(RespondBatch),
    RevealBatch(RevealBatch),
    TestLines(TestLines),
    SignSubmit(Vec<u8>),
    VerifyResult(VerifyResult),
    Abort { code: AbortCode, reason: String },
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn bool(&mut self, v: bool) {
        self.0.push(u8::from(v));
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(n as u32);
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

fn malformed(what: &str) -> WireError {
    WireError::Malformed(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.buf.len() - self.at < n {
            return Err(malformed("payload truncated"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(malformed("boolean byte out of range")),
        }
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    /// Element count, checked against the bytes that remain.
    fn count(&mut self, elem: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.at {
            return Err(malformed("element count exceeds payload"));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.count(1)?;
        self.take(n)
    }
    fn party(&mut self) -> Result<Party, WireError> {
        Party::from_code(self.u8()?).ok_or_else(|| malformed("unknown party"))
    }
    fn flags(&mut self) -> Result<bool, WireError> {
        let f = self.u8()?;
        if f & !FLAG_MORE != 0 {
            return Err(malformed("unknown flag bits"));
        }
        Ok(f & FLAG_MORE != 0)
    }
    fn finish(&self) -> Result<(), WireError> {
        if self.at != self.buf.len() {
            return Err(malformed("trailing payload bytes"));
        }
        Ok(())
    }
}

impl WireMessage {
    pub fn message_type(&self) -> MessageType {
        match self {
            WireMessage::Hello(_) => MessageType::Hello,
            WireMessage::TableDigest { .. } => MessageType::TableDigest,
            WireMessage::DetectionDigest { .. } => MessageType::DetectionDigest,
            WireMessage::CoincConfirm { .. } => MessageType::CoincConfirm,
            WireMessage::ProposeBatch(_) => MessageType::ProposeBatch,
            WireMessage::RespondBatch(_) => MessageType::RespondBatch,
            WireMessage::RevealBatch(_) => MessageType::RevealBatch,
            WireMessage::TestLines(_) => MessageType::TestLines,
            WireMessage::SignSubmit(_) => MessageType::SignSubmit,
            WireMessage::VerifyResult(_) => MessageType::VerifyResult,
            WireMessage::Abort { .. } => MessageType::Abort,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        match self {
            WireMessage::Hello(h) => {
                w.u8(h.role.code());
                w.u16(h.version);
                w.u64(h.line_count);
                w.u64(h.table_seed);
                w.0.extend_from_slice(&h.digest);
            }
            WireMessage::TableDigest { round, digest } => {
                w.u32(*round);
                w.0.extend_from_slice(digest);
            }
            WireMessage::DetectionDigest { party, timestamps } => {
                w.u8(party.code());
                w.len(timestamps.len());
                for t in timestamps {
                    w.u64(*t as u64);
                }
            }
            WireMessage::CoincConfirm { bob_indices } => {
                w.len(bob_indices.len());
                for i in bob_indices {
                    w.u64(*i);
                }
            }
            WireMessage::ProposeBatch(p) => {
                w.u8(if p.more { FLAG_MORE } else { 0 });
                w.u32(p.round);
                w.len(p.proposals.len());
                for x in &p.proposals {
                    w.u64(x.request_id);
                    w.u64(x.line_id);
                }
                w.len(p.deleted.len());
                for r in &p.deleted {
                    w.u64(r.start);
                    w.u32(r.len);
                }
                w.len(p.exhausted.len());
                for id in &p.exhausted {
                    w.u64(*id);
                }
            }
            WireMessage::RespondBatch(r) => {
                w.u8(if r.more { FLAG_MORE } else { 0 });
                w.u32(r.round);
                w.len(r.responses.len());
                for x in &r.responses {
                    w.u64(x.request_id);
                    w.u64(x.line_id);
                    w.bool(x.accept);
                }
            }
            WireMessage::RevealBatch(r) => {
                w.u8(if r.more { FLAG_MORE } else { 0 });
                w.u32(r.round);
                w.len(r.reveals.len());
                for x in &r.reveals {
                    w.u64(x.request_id);
                    w.bool(x.pad);
                }
            }
            WireMessage::TestLines(t) => {
                w.u8(t.party.code());
                w.u64(t.seed);
                w.u32(t.count);
                w.len(t.lines.len());
                for l in &t.lines {
                    w.u64(l.line_id);
                    w.u8(l.a);
                    w.u8(l.b);
                }
            }
            WireMessage::SignSubmit(bytes) => w.bytes(bytes),
            WireMessage::VerifyResult(v) => {
                w.u8(v.kind as u8);
                w.bool(v.accept);
                w.f64(v.value);
                w.len(v.fractions.len());
                for f in &v.fractions {
                    w.f64(*f);
                }
            }
            WireMessage::Abort { code, reason } => {
                w.u8(*code as u8);
                w.bytes(reason.as_bytes());
            }
        }
        w.0
    }

    pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<WireMessage, WireError> {
        let kind = MessageType::from_code(msg_type).ok_or_else(|| malformed("unknown message type"))?;
        let mut r = Reader { buf: payload, at: 0 };
        let msg = match kind {
            MessageType::Hello => WireMessage::Hello(Hello {
                role: r.party()?,
                version: r.u16()?,
                line_count: r.u64()?,
                table_seed: r.u64()?,
                digest: r.take(32)?.try_into().expect("32"),
            }),
            MessageType::TableDigest => WireMessage::TableDigest {
                round: r.u32()?,
                digest: r.take(32)?.try_into().expect("32"),
            },
            MessageType::DetectionDigest => {
                let party = r.party()?;
                let n = r.count(8)?;
                let timestamps = (0..n).map(|_| r.u64().map(|v| v as i64)).collect::<Result<_, _>>()?;
                WireMessage::DetectionDigest { party, timestamps }
            }
            MessageType::CoincConfirm => {
                let n = r.count(8)?;
                WireMessage::CoincConfirm {
                    bob_indices: (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?,
                }
            }
            MessageType::ProposeBatch => {
                let more = r.flags()?;
                let round = r.u32()?;
                let n = r.count(16)?;
                let proposals = (0..n)
                    .map(|_| {
                        Ok(Proposal {
                            request_id: r.u64()?,
                            line_id: r.u64()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                let n = r.count(12)?;
                let deleted = (0..n)
                    .map(|_| {
                        Ok(LineRange {
                            start: r.u64()?,
                            len: r.u32()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                let n = r.count(8)?;
                let exhausted = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
                WireMessage::ProposeBatch(ProposeBatch {
                    more,
                    round,
                    proposals,
                    deleted,
                    exhausted,
                })
            }
            MessageType::RespondBatch => {
                let more = r.flags()?;
                let round = r.u32()?;
                let n = r.count(17)?;
                let responses = (0..n)
                    .map(|_| {
                        Ok(Response {
                            request_id: r.u64()?,
                            line_id: r.u64()?,
                            accept: r.bool()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                WireMessage::RespondBatch(RespondBatch {
                    more,
                    round,
                    responses,
                })
            }
            MessageType::RevealBatch => {
                let more = r.flags()?;
                let round = r.u32()?;
                let n = r.count(9)?;
                let reveals = (0..n)
                    .map(|_| {
                        Ok(Reveal {
                            request_id: r.u64()?,
                            pad: r.bool()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                WireMessage::RevealBatch(RevealBatch { more, round, reveals })
            }
            MessageType::TestLines => {
                let party = r.party()?;
                let seed = r.u64()?;
                let count = r.u32()?;
                let n = r.count(10)?;
                let lines = (0..n)
                    .map(|_| {
                        Ok(TestLine {
                            line_id: r.u64()?,
                            a: r.u8()?,
                            b: r.u8()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                WireMessage::TestLines(TestLines {
                    party,
                    seed,
                    count,
                    lines,
                })
            }
            MessageType::SignSubmit => WireMessage::SignSubmit(r.bytes()?.to_vec()),
            MessageType::VerifyResult => {
                let kind = match r.u8()? {
                    0 => VerifyKind::Signature,
                    1 => VerifyKind::Chsh,
                    _ => return Err(malformed("unknown verification kind")),
                };
                let accept = r.bool()?;
                let value = r.f64()?;
                let n = r.count(8)?;
                let fractions = (0..n).map(|_| r.f64()).collect::<Result<_, _>>()?;
                WireMessage::VerifyResult(VerifyResult {
                    kind,
                    accept,
                    value,
                    fractions,
                })
            }
            MessageType::Abort => {
                let code = AbortCode::from_code(r.u8()?).ok_or_else(|| malformed("unknown abort code"))?;
                let reason = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| malformed("abort reason is not utf-8"))?;
                WireMessage::Abort { code, reason }
            }
        };
        r.finish()?;
        Ok(msg)
    }

    pub fn to_frame(&self, session_id: u64) -> Frame {
        Frame {
            msg_type: self.message_type() as u8,
            session_id,
            payload: self.encode_payload(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<WireMessage, WireError> {
        WireMessage::decode_payload(frame.msg_type, &frame.payload)
    }
}

pub fn encode_message(session_id: u64, msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    encode_frame(&msg.to_frame(session_id))
}

pub fn decode_message(bytes: &[u8]) -> Result<(u64, WireMessage), WireError> {
    let frame = decode_frame(bytes)?;
    Ok((frame.session_id, WireMessage::from_frame(&frame)?))
}

/// Splits a proposal batch so each fragment's payload fits in `budget` bytes.
pub fn fragment_propose(batch: ProposeBatch, budget: usize) -> Vec<ProposeBatch> {
    let budget = budget.clamp(64, MAX_PAYLOAD);
    // Fixed overhead: flags, round and three counts.
    let room = budget - 17;
    let cost = batch.proposals.len() * 16 + batch.deleted.len() * 12 + batch.exhausted.len() * 8;
    if cost <= room {
        return vec![batch];
    }
    let mut out = Vec::new();
    let mut cur = ProposeBatch {
        round: batch.round,
        ..Default::default()
    };
    let mut used = 0;
    let push = |cur: &mut ProposeBatch, used: &mut usize, size: usize, out: &mut Vec<ProposeBatch>| {
        if *used + size > room {
            let full = std::mem::replace(
                cur,
                ProposeBatch {
                    round: batch.round,
                    ..Default::default()
                },
            );
            out.push(full);
            *used = 0;
        }
        *used += size;
    };
    for p in batch.proposals {
        push(&mut cur, &mut used, 16, &mut out);
        cur.proposals.push(p);
    }
    for d in batch.deleted {
        push(&mut cur, &mut used, 12, &mut out);
        cur.deleted.push(d);
    }
    for e in batch.exhausted {
        push(&mut cur, &mut used, 8, &mut out);
        cur.exhausted.push(e);
    }
    out.push(cur);
    let last = out.len() - 1;
    for (i, f) in out.iter_mut().enumerate() {
        f.more = i != last;
    }
    out
}

pub fn fragment_respond(batch: RespondBatch, budget: usize) -> Vec<RespondBatch> {
    let per = ((budget.clamp(64, MAX_PAYLOAD) - 9) / 17).max(1);
    chunked(batch.responses, per, |responses, more| RespondBatch {
        more,
        round: batch.round,
        responses,
    })
}

pub fn fragment_reveal(batch: RevealBatch, budget: usize) -> Vec<RevealBatch> {
    let per = ((budget.clamp(64, MAX_PAYLOAD) - 9) / 9).max(1);
    chunked(batch.reveals, per, |reveals, more| RevealBatch {
        more,
        round: batch.round,
        reveals,
    })
}

fn chunked<T: Clone, B>(items: Vec<T>, per: usize, make: impl Fn(Vec<T>, bool) -> B) -> Vec<B> {
    if items.len() <= per {
        return vec![make(items, false)];
    }
    let chunks: Vec<&[T]> = items.chunks(per).collect();
    let last = chunks.len() - 1;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| make(c.to_vec(), i != last))
        .collect()
}
