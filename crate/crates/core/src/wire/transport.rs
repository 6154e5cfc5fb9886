//! Ordered, reliable frame transports and the session link on top of them.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::{header_payload_len, WireError, FRAME_HEADER_LEN, FRAME_TRAILER_LEN, MAX_PAYLOAD};
use super::message::{decode_message, encode_message, WireMessage};

/// Writing half of a transport. Each call carries one encoded frame.
pub trait FrameSink: Send {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<(), WireError>;
}

/// Reading half of a transport. Returns one complete encoded frame.
pub trait FrameSource: Send {
    fn recv_frame(&mut self) -> Result<Vec<u8>, WireError>;
}

pub struct Transport {
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

struct ChannelSink(Sender<Vec<u8>>);
struct ChannelSource {
    rx: Receiver<Vec<u8>>,
    timeout: Option<Duration>,
}

impl FrameSink for ChannelSink {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<(), WireError> {
        self.0.send(bytes).map_err(|_| WireError::Closed)
    }
}

impl FrameSource for ChannelSource {
    fn recv_frame(&mut self) -> Result<Vec<u8>, WireError> {
        match self.timeout {
            None => self.rx.recv().map_err(|_| WireError::Closed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => WireError::Io("receive timed out".into()),
                mpsc::RecvTimeoutError::Disconnected => WireError::Closed,
            }),
        }
    }
}

struct TcpSink(TcpStream);
struct TcpSource {
    stream: TcpStream,
    max_payload: usize,
}

impl FrameSink for TcpSink {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<(), WireError> {
        self.0.write_all(&bytes)?;
        self.0.flush()?;
        Ok(())
    }
}

impl FrameSource for TcpSource {
    fn recv_frame(&mut self) -> Result<Vec<u8>, WireError> {
        let mut buf = vec![0u8; FRAME_HEADER_LEN];
        self.stream.read_exact(&mut buf)?;
        let len = header_payload_len(&buf)?;
        if len > self.max_payload {
            return Err(WireError::Oversize(len));
        }
        buf.resize(FRAME_HEADER_LEN + len + FRAME_TRAILER_LEN, 0);
        self.stream.read_exact(&mut buf[FRAME_HEADER_LEN..])?;
        Ok(buf)
    }
}

impl Transport {
    /// Two connected in-process endpoints.
    pub fn memory_pair() -> (Transport, Transport) {
        let (atx, arx) = mpsc::channel();
        let (btx, brx) = mpsc::channel();
        (
            Transport {
                sink: Box::new(ChannelSink(atx)),
                source: Box::new(ChannelSource { rx: brx, timeout: None }),
            },
            Transport {
                sink: Box::new(ChannelSink(btx)),
                source: Box::new(ChannelSource { rx: arx, timeout: None }),
            },
        )
    }

    /// A framed byte stream. `read_timeout` doubles as the session keepalive.
    pub fn tcp(stream: TcpStream, max_payload: usize, read_timeout: Option<Duration>) -> Result<Transport, WireError> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(read_timeout)?;
        let reader = stream.try_clone()?;
        Ok(Transport {
            sink: Box::new(TcpSink(stream)),
            source: Box::new(TcpSource {
                stream: reader,
                max_payload: max_payload.min(MAX_PAYLOAD),
            }),
        })
    }

    /// Delays every outgoing frame by `delay` plus uniform jitter in
    /// `[0, jitter]`. Delivery times never decrease, so order is kept.
    pub fn with_latency(self, delay: Duration, jitter: Duration, seed: u64) -> Transport {
        if delay.is_zero() && jitter.is_zero() {
            return self;
        }
        Transport {
            sink: Box::new(LatencySink::spawn(self.sink, delay, jitter, seed)),
            source: self.source,
        }
    }
}

struct LatencySink {
    tx: Option<Sender<(Instant, Vec<u8>)>>,
    failed: Arc<Mutex<Option<WireError>>>,
    worker: Option<thread::JoinHandle<()>>,
    delay: Duration,
    jitter: Duration,
    rng: ChaCha8Rng,
    last_due: Instant,
}

impl LatencySink {
    fn spawn(mut inner: Box<dyn FrameSink>, delay: Duration, jitter: Duration, seed: u64) -> LatencySink {
        let (tx, rx) = mpsc::channel::<(Instant, Vec<u8>)>();
        let failed = Arc::new(Mutex::new(None));
        let flag = Arc::clone(&failed);
        let worker = thread::spawn(move || {
            for (due, bytes) in rx {
                let now = Instant::now();
                if due > now {
                    thread::sleep(due - now);
                }
                if let Err(e) = inner.send_frame(bytes) {
                    *flag.lock().expect("latency flag") = Some(e);
                    return;
                }
            }
        });
        LatencySink {
            tx: Some(tx),
            failed,
            worker: Some(worker),
            delay,
            jitter,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_due: Instant::now(),
        }
    }
}

impl FrameSink for LatencySink {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<(), WireError> {
        if let Some(e) = self.failed.lock().expect("latency flag").clone() {
            return Err(e);
        }
        let extra = if self.jitter.is_zero() {
            Duration::ZERO
        } else {
            self.jitter.mul_f64(self.rng.random::<f64>())
        };
        let due = (Instant::now() + self.delay + extra).max(self.last_due);
        self.last_due = due;
        self.tx
            .as_ref()
            .expect("open until drop")
            .send((due, bytes))
            .map_err(|_| WireError::Closed)
    }
}

impl Drop for LatencySink {
    fn drop(&mut self) {
        // Let queued frames go out before the peer sees the channel close.
        self.tx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptFrame {
    /// Microseconds since the link was opened. Not part of replay checks.
    pub elapsed_us: u64,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub frames: Vec<TranscriptFrame>,
}

const TRANSCRIPT_MAGIC: [u8; 4] = *b"OTPR";

impl Transcript {
    pub fn sent(&self) -> impl Iterator<Item = &TranscriptFrame> {
        self.frames.iter().filter(|f| f.direction == Direction::Sent)
    }

    /// `"OTPR" | count u64 | (direction u8, elapsed_us u64, len u32, bytes)* | CRC32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TRANSCRIPT_MAGIC.to_vec();
        out.extend_from_slice(&(self.frames.len() as u64).to_le_bytes());
        for f in &self.frames {
            out.push(match f.direction {
                Direction::Sent => 0,
                Direction::Received => 1,
            });
            out.extend_from_slice(&f.elapsed_us.to_le_bytes());
            out.extend_from_slice(&(f.bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&f.bytes);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Transcript, WireError> {
        let bad = |m: &str| WireError::Malformed(format!("transcript: {m}"));
        if bytes.len() < 16 || bytes[..4] != TRANSCRIPT_MAGIC {
            return Err(bad("bad header"));
        }
        let body = bytes.len() - 4;
        if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().expect("4")) {
            return Err(WireError::CrcMismatch);
        }
        let count = u64::from_le_bytes(bytes[4..12].try_into().expect("8"));
        let mut at = 12;
        let mut frames = Vec::new();
        for _ in 0..count {
            if body - at < 13 {
                return Err(bad("truncated"));
            }
            let direction = match bytes[at] {
                0 => Direction::Sent,
                1 => Direction::Received,
                _ => return Err(bad("bad direction")),
            };
            let elapsed_us = u64::from_le_bytes(bytes[at + 1..at + 9].try_into().expect("8"));
            let len = u32::from_le_bytes(bytes[at + 9..at + 13].try_into().expect("4")) as usize;
            at += 13;
            if body - at < len {
                return Err(bad("truncated"));
            }
            frames.push(TranscriptFrame {
                elapsed_us,
                direction,
                bytes: bytes[at..at + len].to_vec(),
            });
            at += len;
        }
        if at != body {
            return Err(bad("trailing bytes"));
        }
        Ok(Transcript { frames })
    }
}

struct ReplayState {
    frames: Vec<TranscriptFrame>,
    next: usize,
}

impl ReplayState {
    fn expect(&mut self, dir: Direction) -> Result<(usize, &TranscriptFrame), WireError> {
        let i = self.next;
        match self.frames.get(i) {
            Some(f) if f.direction == dir => {
                self.next += 1;
                Ok((i, &self.frames[i]))
            }
            _ => Err(WireError::ReplayDivergence(i)),
        }
    }
}

struct ReplaySink(Arc<Mutex<ReplayState>>);
struct ReplaySource(Arc<Mutex<ReplayState>>);

impl FrameSink for ReplaySink {
    fn send_frame(&mut self, bytes: Vec<u8>) -> Result<(), WireError> {
        let mut st = self.0.lock().expect("replay state");
        let (i, f) = st.expect(Direction::Sent)?;
        if f.bytes != bytes {
            return Err(WireError::ReplayDivergence(i));
        }
        Ok(())
    }
}

impl FrameSource for ReplaySource {
    fn recv_frame(&mut self) -> Result<Vec<u8>, WireError> {
        let mut st = self.0.lock().expect("replay state");
        if st.next == st.frames.len() {
            return Err(WireError::Closed);
        }
        st.expect(Direction::Received).map(|(_, f)| f.bytes.clone())
    }
}

/// Feeds recorded incoming frames back and checks every outgoing frame
/// against the recording, byte for byte.
pub fn replay_transport(transcript: &Transcript) -> Transport {
    let st = Arc::new(Mutex::new(ReplayState {
        frames: transcript.frames.clone(),
        next: 0,
    }));
    Transport {
        sink: Box::new(ReplaySink(Arc::clone(&st))),
        source: Box::new(ReplaySource(st)),
    }
}

/// One session's view of a transport: typed messages, session-id checks and
/// a transcript of every frame.
pub struct Link {
    transport: Transport,
    session_id: u64,
    opened: Instant,
    transcript: Transcript,
}

impl Link {
    pub fn new(transport: Transport, session_id: u64) -> Link {
        Link {
            transport,
            session_id,
            opened: Instant::now(),
            transcript: Transcript::default(),
        }
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    fn log(&mut self, direction: Direction, bytes: Vec<u8>) {
        self.transcript.frames.push(TranscriptFrame {
            elapsed_us: self.opened.elapsed().as_micros() as u64,
            direction,
            bytes,
        });
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        let bytes = encode_message(self.session_id, msg)?;
        self.log(Direction::Sent, bytes.clone());
        self.transport.sink.send_frame(bytes)
    }

    pub fn recv(&mut self) -> Result<WireMessage, WireError> {
        let bytes = self.transport.source.recv_frame()?;
        self.log(Direction::Received, bytes.clone());
        let (sid, msg) = decode_message(&bytes)?;
        if sid != self.session_id {
            return Err(WireError::Malformed(format!(
                "frame for session {sid} on session {}",
                self.session_id
            )));
        }
        Ok(msg)
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::message::AbortCode;

    fn abort(n: u8) -> WireMessage {
        WireMessage::Abort {
            code: AbortCode::Internal,
            reason: format!("{n}"),
        }
    }

    #[test]
    fn memory_pair_round_trip() {
        let (a, b) = Transport::memory_pair();
        let mut la = Link::new(a, 9);
        let mut lb = Link::new(b, 9);
        la.send(&abort(1)).unwrap();
        assert_eq!(lb.recv().unwrap(), abort(1));
        drop(la);
        assert_eq!(lb.recv(), Err(WireError::Closed));
    }

    #[test]
    fn session_id_checked() {
        let (a, b) = Transport::memory_pair();
        let mut la = Link::new(a, 1);
        let mut lb = Link::new(b, 2);
        la.send(&abort(0)).unwrap();
        assert!(matches!(lb.recv(), Err(WireError::Malformed(_))));
    }

    #[test]
    fn latency_delays_and_keeps_order() {
        let (a, b) = Transport::memory_pair();
        let a = a.with_latency(Duration::from_millis(20), Duration::from_millis(5), 3);
        let mut la = Link::new(a, 0);
        let mut lb = Link::new(b, 0);
        let t0 = Instant::now();
        for i in 0..20 {
            la.send(&abort(i)).unwrap();
        }
        for i in 0..20 {
            assert_eq!(lb.recv().unwrap(), abort(i));
        }
        assert!(t0.elapsed() >= Duration::from_millis(20));
    }

    #[test]
    fn tcp_round_trip() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let h = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            let mut l = Link::new(Transport::tcp(s, MAX_PAYLOAD, None).unwrap(), 4);
            let m = l.recv().unwrap();
            l.send(&m).unwrap();
        });
        let s = TcpStream::connect(addr).unwrap();
        let mut l = Link::new(Transport::tcp(s, MAX_PAYLOAD, None).unwrap(), 4);
        l.send(&abort(7)).unwrap();
        assert_eq!(l.recv().unwrap(), abort(7));
        h.join().unwrap();
    }

    #[test]
    fn transcript_bytes_and_replay() {
        let (a, b) = Transport::memory_pair();
        let mut la = Link::new(a, 5);
        let mut lb = Link::new(b, 5);
        la.send(&abort(1)).unwrap();
        lb.recv().unwrap();
        lb.send(&abort(2)).unwrap();
        la.recv().unwrap();
        let t = la.into_transcript();
        let back = Transcript::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);

        let mut r = Link::new(replay_transport(&t), 5);
        r.send(&abort(1)).unwrap();
        assert_eq!(r.recv().unwrap(), abort(2));
        assert_eq!(r.recv(), Err(WireError::Closed));

        let mut r = Link::new(replay_transport(&t), 5);
        assert_eq!(r.send(&abort(3)), Err(WireError::ReplayDivergence(0)));
    }
}
