//! Scripted sessions.
//!
//! A script is the ordered list of things one party does over a session. Both
//! parties run their own script against a link; the transcript each side
//! records is enough to re-run that side later and get the same outputs, since
//! every random choice comes from the script's seed.

use std::thread;

use thiserror::Error;

use super::{replay_transport, AbortCode, Link, TestLine, TestLines, Transcript, Transport, VerifyKind, VerifyResult, WireError, WireMessage};
use crate::engine::{AliceSession, BobSession, Circuit, CircuitShape, EngineError, ExecOptions, GkGateSpec, GkPlan};
use crate::qsim::GateG1;
use crate::security::{draw_test_lines, mark_test_lines, ChshAccumulator, ChshEstimate, SecurityError};
use crate::sig::{SigError, Signature, SignatureParams, SigningKey, Verification};
use crate::tabler::{
    reconcile_bob, run_pipeline, DetectionEvent, Party, PipelineOutput, SharedTableAlice, SharedTableBob, SyncError,
    TrackingParams,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error("CHSH value {s:.4} is below the abort threshold {threshold}")]
    ChshFailure { s: f64, threshold: f64 },
}

impl From<WireError> for SessionError {
    fn from(e: WireError) -> Self {
        SessionError::Engine(e.into())
    }
}

impl SessionError {
    /// The ABORT code the peer saw or sent, if the session ended in one.
    pub fn abort_code(&self) -> Option<AbortCode> {
        let engine = match self {
            SessionError::Engine(e) => e,
            SessionError::Sig(SigError::Engine(e)) => e,
            SessionError::ChshFailure { .. } => return Some(AbortCode::ChshFailure),
            _ => return None,
        };
        match engine {
            EngineError::Aborted { code, .. } => Some(*code),
            EngineError::Protocol(_) => Some(AbortCode::ProtocolViolation),
            EngineError::TableExhausted { .. } => Some(AbortCode::TableExhausted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AliceStep {
    Hello,
    Gates(Vec<GateG1>),
    Gk(GkGateSpec),
    Circuit(Circuit),
    /// Spend `lines` seeded random lines on a CHSH estimate.
    BellTest { lines: usize, seed: u64, threshold: f64 },
    /// Serve the signing batch, then verify what Bob submits.
    Sign { key: SigningKey, tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BobStep {
    Hello,
    Inputs(Vec<bool>),
    Gk { k: usize, x: Vec<bool> },
    Circuit { shape: CircuitShape, inputs: Vec<bool> },
    BellTest,
    Sign { message: Vec<u8>, params: SignatureParams },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Hello,
    /// Alice's view of a batch she served.
    Served { requests: usize, rounds: u32, failed: Vec<u64> },
    /// Bob's outputs, `None` where the table ran out.
    Outputs { outputs: Vec<Option<bool>>, rounds: u32 },
    Gk(bool),
    Circuit(Vec<bool>),
    Bell(ChshEstimate),
    Verified(Verification),
    Signed { signature: Signature, result: VerifyResult },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AliceScript {
    pub session_id: u64,
    /// Seeds the pads and every other choice Alice makes.
    pub seed: u64,
    pub options: ExecOptions,
    pub steps: Vec<AliceStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BobScript {
    pub session_id: u64,
    pub options: ExecOptions,
    pub steps: Vec<BobStep>,
}

/// What one party saw: the outcomes of the steps that completed and, if a
/// step failed, the error that ended the session.
#[derive(Debug)]
pub struct SessionRecord {
    pub outcomes: Vec<StepOutcome>,
    pub transcript: Transcript,
    pub error: Option<SessionError>,
}

impl SessionRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn test_lines_msg(party: Party, seed: u64, lines: Vec<TestLine>) -> WireMessage {
    WireMessage::TestLines(TestLines {
        party,
        seed,
        count: lines.len() as u32,
        lines,
    })
}

fn protocol(msg: String) -> SessionError {
    SessionError::Engine(EngineError::Protocol(msg))
}

/// Alice's side of a Bell test: announce the draw with her gates, collect
/// Bob's records, and abort if the estimate is too low.
pub fn alice_bell_test(
    s: &mut AliceSession<'_>,
    lines: usize,
    seed: u64,
    threshold: f64,
) -> Result<ChshEstimate, SessionError> {
    let ids = draw_test_lines(s.table(), lines, seed)?;
    mark_test_lines(s.table_mut(), &ids)?;
    let ours: Vec<TestLine> = ids
        .iter()
        .map(|&id| TestLine {
            line_id: id,
            a: s.table().get(id).expect("drawn from the table").gate.code(),
            b: 0,
        })
        .collect();
    s.link().send(&test_lines_msg(Party::Alice, seed, ours.clone()))?;
    let theirs = match s.recv()? {
        WireMessage::TestLines(t) if t.party == Party::Bob => t,
        m => {
            let e = protocol(format!("expected Bob's TEST_LINES, got {:?}", m.message_type()));
            let _ = s.abort(AbortCode::ProtocolViolation, &e.to_string());
            return Err(e);
        }
    };
    if theirs.lines.len() != ours.len() || theirs.lines.iter().zip(&ours).any(|(b, a)| b.line_id != a.line_id) {
        let _ = s.abort(AbortCode::ProtocolViolation, "test lines differ from the draw");
        return Err(protocol("Bob's test lines differ from the draw".into()));
    }
    let mut acc = ChshAccumulator::default();
    for (a, b) in ours.iter().zip(&theirs.lines) {
        let gate = GateG1::from_code(a.a).expect("own record");
        if b.b > 3 {
            let _ = s.abort(AbortCode::ProtocolViolation, "bad test-line record");
            return Err(protocol(format!("bad record {} for line {}", b.b, b.line_id)));
        }
        acc.add(gate, b.b & 2 != 0, b.b & 1 != 0);
    }
    let est = match acc.finish() {
        Ok(e) => e,
        Err(e) => {
            let _ = s.abort(AbortCode::Internal, &e.to_string());
            return Err(e.into());
        }
    };
    if !est.passes(threshold) {
        let _ = s.abort(AbortCode::ChshFailure, &format!("S = {:.4}", est.s));
        return Err(SessionError::ChshFailure { s: est.s, threshold });
    }
    s.link().send(&WireMessage::VerifyResult(VerifyResult {
        kind: VerifyKind::Chsh,
        accept: true,
        value: est.s,
        fractions: est.correlators.to_vec(),
    }))?;
    Ok(est)
}

/// Bob's side: check Alice's draw against his own table, answer with his
/// records and wait for her verdict.
pub fn bob_bell_test(s: &mut BobSession<'_>) -> Result<ChshEstimate, SessionError> {
    let theirs = match s.recv()? {
        WireMessage::TestLines(t) if t.party == Party::Alice => t,
        m => {
            let e = protocol(format!("expected Alice's TEST_LINES, got {:?}", m.message_type()));
            let _ = s.abort(AbortCode::ProtocolViolation, &e.to_string());
            return Err(e);
        }
    };
    let ids = match draw_test_lines(s.table(), theirs.count as usize, theirs.seed) {
        Ok(ids) => ids,
        Err(e) => {
            let _ = s.abort(AbortCode::TableMismatch, &e.to_string());
            return Err(e.into());
        }
    };
    if theirs.lines.len() != ids.len() || theirs.lines.iter().zip(&ids).any(|(l, &id)| l.line_id != id) {
        let _ = s.abort(AbortCode::TableMismatch, "test-line draw differs");
        return Err(protocol("Alice's test lines differ from the draw".into()));
    }
    let mut gates = Vec::with_capacity(ids.len());
    for l in &theirs.lines {
        match GateG1::from_code(l.a) {
            Some(g) => gates.push(g),
            None => {
                let _ = s.abort(AbortCode::ProtocolViolation, "bad gate code");
                return Err(protocol(format!("bad gate code {} on line {}", l.a, l.line_id)));
            }
        }
    }
    mark_test_lines(s.table_mut(), &ids)?;
    let mut acc = ChshAccumulator::default();
    let mut ours = Vec::with_capacity(ids.len());
    for (&id, &g) in ids.iter().zip(&gates) {
        let r = s.table().get(id).expect("drawn from the table");
        acc.add(g, r.input, r.output);
        ours.push(TestLine {
            line_id: id,
            a: 0,
            b: (u8::from(r.input) << 1) | u8::from(r.output),
        });
    }
    s.link().send(&test_lines_msg(Party::Bob, theirs.seed, ours))?;
    let est = acc.finish();
    match s.recv()? {
        WireMessage::VerifyResult(v) if v.kind == VerifyKind::Chsh && v.accept => Ok(est?),
        m => Err(protocol(format!("expected VERIFY_RESULT, got {:?}", m.message_type()))),
    }
}

/// Alice's half of reconciliation over the wire: she receives Bob's
/// timestamps, matches them against her own detections and tells him which
/// of his events became table lines.
pub fn alice_reconcile(
    link: &mut Link,
    alice: &[DetectionEvent],
    table_start: i64,
    window: i64,
    tracking: Option<&TrackingParams>,
    seed: u64,
) -> Result<PipelineOutput, SessionError> {
    let timestamps = match link.recv()? {
        WireMessage::DetectionDigest { party: Party::Bob, timestamps } => timestamps,
        WireMessage::Abort { code, reason } => return Err(EngineError::Aborted { code, reason }.into()),
        m => {
            let e = protocol(format!("expected DETECTION_DIGEST, got {:?}", m.message_type()));
            let _ = link.send(&WireMessage::Abort {
                code: AbortCode::ProtocolViolation,
                reason: e.to_string(),
            });
            return Err(e);
        }
    };
    // Channels are Bob's secret; timing is all the matching needs.
    let bob: Vec<DetectionEvent> = timestamps
        .iter()
        .map(|&t| DetectionEvent {
            timestamp: t,
            channel: 0,
            party: Party::Bob,
            multi_photon: false,
        })
        .collect();
    let out = match run_pipeline(alice, &bob, table_start, window, tracking, seed) {
        Ok(o) => o,
        Err(e) => {
            let _ = link.send(&WireMessage::Abort {
                code: AbortCode::Internal,
                reason: e.to_string(),
            });
            return Err(e.into());
        }
    };
    let bob_indices = out
        .pairs
        .iter()
        .filter(|p| alice[p.alice].timestamp >= table_start)
        .map(|p| p.bob as u64)
        .collect();
    link.send(&WireMessage::CoincConfirm { bob_indices })?;
    Ok(out)
}

/// Bob's half: publish timestamps, then build his table from the pairing.
pub fn bob_reconcile(link: &mut Link, bob: &[DetectionEvent], seed: u64) -> Result<SharedTableBob, SessionError> {
    link.send(&WireMessage::DetectionDigest {
        party: Party::Bob,
        timestamps: bob.iter().map(|e| e.timestamp).collect(),
    })?;
    let indices = match link.recv()? {
        WireMessage::CoincConfirm { bob_indices } => bob_indices,
        WireMessage::Abort { code, reason } => return Err(EngineError::Aborted { code, reason }.into()),
        m => return Err(protocol(format!("expected COINC_CONFIRM, got {:?}", m.message_type()))),
    };
    let mut idx = Vec::with_capacity(indices.len());
    for &i in &indices {
        if i >= bob.len() as u64 || idx.last().is_some_and(|&last| last >= i as usize) {
            let _ = link.send(&WireMessage::Abort {
                code: AbortCode::ProtocolViolation,
                reason: format!("bad event index {i}"),
            });
            return Err(protocol(format!("bad event index {i}")));
        }
        idx.push(i as usize);
    }
    Ok(reconcile_bob(bob, &idx, seed))
}

fn run_alice_steps(s: &mut AliceSession<'_>, steps: &[AliceStep], out: &mut Vec<StepOutcome>) -> Result<(), SessionError> {
    for step in steps {
        let outcome = match step {
            AliceStep::Hello => {
                s.hello()?;
                StepOutcome::Hello
            }
            AliceStep::Gates(gates) => {
                let b = s.execute_batch(gates)?;
                served(&b)
            }
            AliceStep::Gk(spec) => {
                let plan = match GkPlan::new(spec.clone()) {
                    Ok(p) => p,
                    Err(e) => {
                        let _ = s.abort(AbortCode::Internal, &e.to_string());
                        return Err(e.into());
                    }
                };
                served(&s.execute_gk(&plan)?)
            }
            AliceStep::Circuit(c) => {
                let before = s.audit().len();
                s.evaluate_circuit(c)?;
                StepOutcome::Served {
                    requests: s.audit().len() - before,
                    rounds: 0,
                    failed: Vec::new(),
                }
            }
            AliceStep::BellTest { lines, seed, threshold } => {
                StepOutcome::Bell(alice_bell_test(s, *lines, *seed, *threshold)?)
            }
            AliceStep::Sign { key, tau } => {
                s.serve_signature(key)?;
                let (_, v) = s.verify_submission(key, *tau)?;
                StepOutcome::Verified(v)
            }
        };
        out.push(outcome);
    }
    Ok(())
}

fn served(b: &crate::engine::AliceBatch) -> StepOutcome {
    StepOutcome::Served {
        requests: b.requests.len(),
        rounds: b.rounds,
        failed: b.failed(),
    }
}

fn run_bob_steps(s: &mut BobSession<'_>, steps: &[BobStep], out: &mut Vec<StepOutcome>) -> Result<(), SessionError> {
    for step in steps {
        let outcome = match step {
            BobStep::Hello => {
                s.hello()?;
                StepOutcome::Hello
            }
            BobStep::Inputs(inputs) => {
                let b = s.execute_batch(inputs)?;
                StepOutcome::Outputs {
                    outputs: b.outputs(),
                    rounds: b.rounds,
                }
            }
            BobStep::Gk { k, x } => StepOutcome::Gk(s.execute_gk(*k, x)?),
            BobStep::Circuit { shape, inputs } => StepOutcome::Circuit(s.evaluate_circuit(shape, inputs)?),
            BobStep::BellTest => StepOutcome::Bell(bob_bell_test(s)?),
            BobStep::Sign { message, params } => {
                let signature = s.sign(message, params)?;
                let result = s.submit_signature(&signature)?;
                StepOutcome::Signed { signature, result }
            }
        };
        out.push(outcome);
    }
    Ok(())
}

/// Runs Alice's script to completion or first failure.
pub fn run_alice(table: &mut SharedTableAlice, script: &AliceScript, transport: Transport) -> SessionRecord {
    let mut link = Link::new(transport, script.session_id);
    let mut outcomes = Vec::new();
    let error = {
        let mut s = AliceSession::new(table, &mut link, script.seed, script.options);
        run_alice_steps(&mut s, &script.steps, &mut outcomes).err()
    };
    SessionRecord {
        outcomes,
        transcript: link.into_transcript(),
        error,
    }
}

pub fn run_bob(table: &mut SharedTableBob, script: &BobScript, transport: Transport) -> SessionRecord {
    let mut link = Link::new(transport, script.session_id);
    let mut outcomes = Vec::new();
    let error = {
        let mut s = BobSession::new(table, &mut link, script.options);
        run_bob_steps(&mut s, &script.steps, &mut outcomes).err()
    };
    SessionRecord {
        outcomes,
        transcript: link.into_transcript(),
        error,
    }
}

/// Both parties on threads of this process, joined by the given transports.
pub fn run_pair(
    alice: &mut SharedTableAlice,
    alice_script: &AliceScript,
    alice_transport: Transport,
    bob: &mut SharedTableBob,
    bob_script: &BobScript,
    bob_transport: Transport,
) -> (SessionRecord, SessionRecord) {
    thread::scope(|scope| {
        let bh = scope.spawn(move || run_bob(bob, bob_script, bob_transport));
        let ra = run_alice(alice, alice_script, alice_transport);
        let rb = bh.join().expect("bob thread panicked");
        (ra, rb)
    })
}

/// [`run_pair`] over an in-memory channel.
pub fn run_loopback(
    alice: &mut SharedTableAlice,
    alice_script: &AliceScript,
    bob: &mut SharedTableBob,
    bob_script: &BobScript,
) -> (SessionRecord, SessionRecord) {
    let (ta, tb) = Transport::memory_pair();
    run_pair(alice, alice_script, ta, bob, bob_script, tb)
}

/// Re-runs Alice from the table state she started with, feeding her the
/// frames she received. Anything she sends that differs from the recording
/// ends the replay with `ReplayDivergence`.
pub fn replay_alice(table: &mut SharedTableAlice, script: &AliceScript, transcript: &Transcript) -> SessionRecord {
    run_alice(table, script, replay_transport(transcript))
}

pub fn replay_bob(table: &mut SharedTableBob, script: &BobScript, transcript: &Transcript) -> SessionRecord {
    run_bob(table, script, replay_transport(transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::GateG1::*;
    use crate::tabler::LineStatus;

    fn tables() -> (SharedTableAlice, SharedTableBob) {
        let gates = [Const0, Const1, Id, Not];
        let n = 400;
        let a = SharedTableAlice::from_gates(3, (0..n).map(|i| gates[(i * 7 + i / 5) % 4]));
        // Bob's record agrees with Alice's gate on every line.
        let b = SharedTableBob::from_pairs(
            3,
            a.records().iter().enumerate().map(|(i, r)| {
                let x = (i / 3) % 2 == 1;
                (x, r.gate.eval(x))
            }),
        );
        (a, b)
    }

    fn scripts(alice: Vec<AliceStep>, bob: Vec<BobStep>) -> (AliceScript, BobScript) {
        (
            AliceScript {
                session_id: 11,
                seed: 99,
                options: ExecOptions::default(),
                steps: alice,
            },
            BobScript {
                session_id: 11,
                options: ExecOptions::default(),
                steps: bob,
            },
        )
    }

    #[test]
    fn perfect_table_gives_exact_outputs_and_replays() {
        let (mut a, mut b) = tables();
        let (a0, b0) = (a.clone(), b.clone());
        let targets = vec![Not, Id, Const1, Const0, Not];
        let inputs = vec![true, false, true, false, false];
        let (sa, sb) = scripts(
            vec![AliceStep::Hello, AliceStep::Gates(targets.clone())],
            vec![BobStep::Hello, BobStep::Inputs(inputs.clone())],
        );
        let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
        assert!(ra.is_ok() && rb.is_ok(), "{:?} {:?}", ra.error, rb.error);
        let want: Vec<Option<bool>> = targets.iter().zip(&inputs).map(|(g, &x)| Some(g.eval(x))).collect();
        match &rb.outcomes[1] {
            StepOutcome::Outputs { outputs, .. } => assert_eq!(outputs, &want),
            o => panic!("{o:?}"),
        }
        assert_eq!(a.status_digest(), b.status_digest());

        let (mut a1, mut b1) = (a0.clone(), b0.clone());
        let ra2 = replay_alice(&mut a1, &sa, &ra.transcript);
        let rb2 = replay_bob(&mut b1, &sb, &rb.transcript);
        assert!(ra2.is_ok() && rb2.is_ok());
        assert_eq!(ra2.outcomes, ra.outcomes);
        assert_eq!(rb2.outcomes, rb.outcomes);
        assert_eq!(a1.status_digest(), a.status_digest());

        // A different seed sends different pads and diverges.
        let mut a2 = a0;
        let mut other = sa.clone();
        other.seed = 100;
        let r = replay_alice(&mut a2, &other, &ra.transcript);
        assert!(matches!(
            r.error,
            Some(SessionError::Engine(EngineError::Wire(WireError::ReplayDivergence(_))))
        ));
    }

    #[test]
    fn bell_test_on_perfectly_correlated_records() {
        let (mut a, mut b) = tables();
        let (sa, sb) = scripts(
            vec![AliceStep::BellTest {
                lines: 100,
                seed: 4,
                threshold: 0.0,
            }],
            vec![BobStep::BellTest],
        );
        let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
        assert!(ra.is_ok() && rb.is_ok(), "{:?} {:?}", ra.error, rb.error);
        assert_eq!(ra.outcomes, rb.outcomes);
        assert_eq!(a.count(LineStatus::Consumed), 100);
        assert_eq!(a.status_digest(), b.status_digest());
    }

    #[test]
    fn low_chsh_aborts_both_sides() {
        let (mut a, mut b) = tables();
        let (sa, sb) = scripts(
            vec![AliceStep::BellTest {
                lines: 100,
                seed: 4,
                threshold: 5.0,
            }],
            vec![BobStep::BellTest],
        );
        let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
        assert!(matches!(ra.error, Some(SessionError::ChshFailure { .. })));
        assert_eq!(rb.error.as_ref().and_then(|e| e.abort_code()), Some(AbortCode::ChshFailure));
    }

    #[test]
    fn mismatched_tables_abort_at_hello() {
        let (mut a, _) = tables();
        let mut b = SharedTableBob::from_pairs(3, (0..399).map(|_| (false, false)));
        let (sa, sb) = scripts(vec![AliceStep::Hello], vec![BobStep::Hello]);
        let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
        assert_eq!(ra.error.unwrap().abort_code(), Some(AbortCode::TableMismatch));
        assert!(rb.error.is_some());
    }
}
