//! Batched execution: every unfinished request gets a proposal each round,
//! and one round is one PROPOSE / RESPOND / REVEAL exchange.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    alice_handle_responses, alice_reveal, bob_apply_deletions, bob_handle_reveal,
    bob_respond_candidates, scan_candidates, AliceRequest, AliceState, BobRequest, BobState,
    EngineError,
};
use crate::qsim::GateG1;
use crate::security::{AuditTranscript, DeclinedLine, RequestAttempts};
use crate::tabler::{Party, SharedTableAlice, SharedTableBob};
use crate::wire::{
    compress_ranges, fragment_propose, fragment_respond, fragment_reveal, AbortCode, Hello, Link,
    ProposeBatch, Proposal, RespondBatch, Response, Reveal, RevealBatch, WireMessage, MAX_PAYLOAD,
    PROTOCOL_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchMode {
    /// One candidate line per request per round.
    Single,
    /// `ceil(c · log2 L)` candidates per request per round, so almost every
    /// request completes in the first round.
    ConstantRound { c: f64 },
}

impl BatchMode {
    pub fn candidates(&self, batch_len: usize) -> usize {
        match *self {
            BatchMode::Single => 1,
            BatchMode::ConstantRound { c } => {
                let l = batch_len.max(2) as f64;
                ((c * l.log2()).ceil() as usize).max(1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOptions {
    pub mode: BatchMode,
    /// Exchange table status digests after every round.
    pub verify_digests: bool,
    /// Largest payload per frame; larger batches are split.
    pub frame_budget: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            mode: BatchMode::Single,
            verify_digests: false,
            frame_budget: MAX_PAYLOAD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliceAuditEntry {
    pub request_id: u64,
    pub line_id: u64,
    pub target: GateG1,
    pub pad: bool,
    pub accepted: bool,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BobAuditEntry {
    pub request_id: u64,
    pub line_id: u64,
    pub desired_input: bool,
    pub line_input: bool,
    pub recorded_output: bool,
    pub accepted: bool,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliceBatch {
    pub requests: Vec<AliceRequest>,
    /// Rounds that carried at least one proposal.
    pub rounds: u32,
}

impl AliceBatch {
    pub fn failed(&self) -> Vec<u64> {
        self.requests
            .iter()
            .filter(|r| r.state == AliceState::Failed)
            .map(|r| r.request_id)
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.requests
            .iter()
            .all(|r| matches!(r.state, AliceState::Revealed { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BobBatch {
    pub requests: Vec<BobRequest>,
    pub rounds: u32,
}

impl BobBatch {
    /// Final outputs; `None` marks a request that failed for lack of lines.
    pub fn outputs(&self) -> Vec<Option<bool>> {
        self.requests.iter().map(|r| r.output()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.requests.iter().all(|r| r.output().is_some())
    }

    /// All outputs, or `TableExhausted` for the first failed request.
    pub fn require_outputs(&self) -> Result<Vec<bool>, EngineError> {
        self.requests
            .iter()
            .map(|r| {
                r.output().ok_or(EngineError::TableExhausted {
                    request_id: r.request_id,
                })
            })
            .collect()
    }
}

fn recv(link: &mut Link) -> Result<WireMessage, EngineError> {
    match link.recv()? {
        WireMessage::Abort { code, reason } => Err(EngineError::Aborted { code, reason }),
        m => Ok(m),
    }
}

fn unexpected(what: &str, got: &WireMessage) -> EngineError {
    EngineError::Protocol(format!("expected {what}, got {:?}", got.message_type()))
}

/// Sends the ABORT matching a local failure, if the peer should hear one.
fn abort_for(link: &mut Link, e: &EngineError) {
    let code = match e {
        EngineError::Protocol(_)
        | EngineError::InvalidState(_)
        | EngineError::UnknownLine(_)
        | EngineError::Table(_) => AbortCode::ProtocolViolation,
        EngineError::Circuit(_) | EngineError::Qsim(_) | EngineError::DecompositionUnavailable => {
            AbortCode::Internal
        }
        _ => return,
    };
    let _ = link.send(&WireMessage::Abort {
        code,
        reason: e.to_string(),
    });
}

/// Violations by the peer are reported as protocol errors.
fn peer_fault(e: EngineError) -> EngineError {
    match e {
        EngineError::InvalidState(m) => EngineError::Protocol(m),
        EngineError::UnknownLine(id) => EngineError::Protocol(format!("unknown line {id}")),
        EngineError::Table(t) => EngineError::Protocol(t.to_string()),
        other => other,
    }
}

fn request_index(first: u64, len: usize, id: u64) -> Result<usize, EngineError> {
    id.checked_sub(first)
        .filter(|&i| i < len as u64)
        .map(|i| i as usize)
        .ok_or_else(|| EngineError::Protocol(format!("request {id} is not in this batch")))
}

fn hello_for(role: Party, line_count: usize, seed: u64, digest: [u8; 32]) -> WireMessage {
    WireMessage::Hello(Hello {
        role,
        version: PROTOCOL_VERSION,
        line_count: line_count as u64,
        table_seed: seed,
        digest,
    })
}

fn check_hello(link: &mut Link, me: Party, ours: &WireMessage) -> Result<(), EngineError> {
    let theirs = match recv(link)? {
        WireMessage::Hello(h) => h,
        m => return Err(unexpected("HELLO", &m)),
    };
    let WireMessage::Hello(ours) = ours else {
        unreachable!("built by hello_for")
    };
    if theirs.role != me.other() || theirs.version != PROTOCOL_VERSION {
        return Err(EngineError::Protocol(format!(
            "peer announced role {} version {}",
            theirs.role, theirs.version
        )));
    }
    if theirs.line_count != ours.line_count
        || theirs.table_seed != ours.table_seed
        || theirs.digest != ours.digest
    {
        let reason = format!(
            "tables differ: {} lines seed {} vs {} lines seed {}",
            ours.line_count, ours.table_seed, theirs.line_count, theirs.table_seed
        );
        let _ = link.send(&WireMessage::Abort {
            code: AbortCode::TableMismatch,
            reason: reason.clone(),
        });
        return Err(EngineError::Aborted {
            code: AbortCode::TableMismatch,
            reason,
        });
    }
    Ok(())
}

fn digest_mismatch(link: &mut Link, round: u32) -> EngineError {
    let reason = format!("line statuses diverged after round {round}");
    let _ = link.send(&WireMessage::Abort {
        code: AbortCode::TableMismatch,
        reason: reason.clone(),
    });
    EngineError::Aborted {
        code: AbortCode::TableMismatch,
        reason,
    }
}

/// Alice's end of a session: she owns the gate records and the pads.
pub struct AliceSession<'a> {
    table: &'a mut SharedTableAlice,
    link: &'a mut Link,
    rng: ChaCha20Rng,
    options: ExecOptions,
    next_request_id: u64,
    audit: Vec<AliceAuditEntry>,
}

impl<'a> AliceSession<'a> {
    pub fn new(
        table: &'a mut SharedTableAlice,
        link: &'a mut Link,
        seed: u64,
        options: ExecOptions,
    ) -> AliceSession<'a> {
        AliceSession {
            table,
            link,
            rng: ChaCha20Rng::seed_from_u64(seed),
            options,
            next_request_id: 0,
            audit: Vec::new(),
        }
    }

    pub fn table(&self) -> &SharedTableAlice {
        self.table
    }

    pub fn table_mut(&mut self) -> &mut SharedTableAlice {
        self.table
    }

    pub fn link(&mut self) -> &mut Link {
        self.link
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }

    pub fn options(&self) -> &ExecOptions {
        &self.options
    }

    pub fn audit(&self) -> &[AliceAuditEntry] {
        &self.audit
    }

    pub fn recv(&mut self) -> Result<WireMessage, EngineError> {
        recv(self.link)
    }

    pub fn abort(&mut self, code: AbortCode, reason: &str) -> Result<(), EngineError> {
        self.link.send(&WireMessage::Abort {
            code,
            reason: reason.to_string(),
        })?;
        Ok(())
    }

    /// Exchanges HELLO and checks both sides hold the same table.
    pub fn hello(&mut self) -> Result<(), EngineError> {
        let ours = hello_for(
            Party::Alice,
            self.table.len(),
            self.table.seed(),
            self.table.status_digest(),
        );
        self.link.send(&ours)?;
        check_hello(self.link, Party::Alice, &ours).inspect_err(|e| abort_for(self.link, e))
    }

    /// Evaluates one gate per target. Requests that run out of lines are
    /// returned as `Failed`; everything else ends `Revealed`.
    pub fn execute_batch(&mut self, targets: &[GateG1]) -> Result<AliceBatch, EngineError> {
        let r = self.run_batch(targets);
        if let Err(e) = &r {
            abort_for(self.link, e);
        }
        r
    }

    fn run_batch(&mut self, targets: &[GateG1]) -> Result<AliceBatch, EngineError> {
        let n = targets.len();
        let first = self.next_request_id;
        self.next_request_id += n as u64;
        let mut reqs: Vec<AliceRequest> = targets
            .iter()
            .enumerate()
            .map(|(i, &g)| AliceRequest::new(first + i as u64, g))
            .collect();
        let per_request = self.options.mode.candidates(n);
        let budget = self.options.frame_budget;
        let mut round = 0u32;
        let mut rounds_used = 0u32;
        let mut pads: HashMap<u64, bool> = HashMap::new();
        loop {
            let pending: Vec<usize> = (0..n)
                .filter(|&i| reqs[i].state == AliceState::Pending)
                .collect();
            if pending.is_empty() {
                break;
            }
            round += 1;
            let mut batch = ProposeBatch {
                round,
                ..Default::default()
            };
            let mut from = self.table.cursor();
            let mut deleted = Vec::new();
            for &i in &pending {
                match scan_candidates(
                    self.table,
                    &mut reqs[i],
                    per_request,
                    &mut self.rng,
                    &mut from,
                    &mut deleted,
                ) {
                    Ok(cands) => {
                        for (line_id, pad) in cands {
                            pads.insert(line_id, pad);
                            batch.proposals.push(Proposal {
                                request_id: reqs[i].request_id,
                                line_id,
                            });
                        }
                    }
                    Err(EngineError::TableExhausted { request_id }) => batch.exhausted.push(request_id),
                    Err(e) => return Err(e),
                }
            }
            batch.deleted = compress_ranges(deleted);
            if !batch.proposals.is_empty() {
                rounds_used += 1;
            }
            for frag in fragment_propose(batch, budget) {
                self.link.send(&WireMessage::ProposeBatch(frag))?;
            }

            let responses = self.recv_responses(round)?;
            let mut at = 0;
            while at < responses.len() {
                let id = responses[at].request_id;
                let end = responses[at..]
                    .iter()
                    .position(|r| r.request_id != id)
                    .map_or(responses.len(), |p| at + p);
                let idx = request_index(first, n, id)?;
                let group: Vec<(u64, bool)> = responses[at..end]
                    .iter()
                    .map(|r| (r.line_id, r.accept))
                    .collect();
                alice_handle_responses(self.table, &mut reqs[idx], &group).map_err(peer_fault)?;
                for &(line_id, accepted) in &group {
                    self.audit.push(AliceAuditEntry {
                        request_id: id,
                        line_id,
                        target: reqs[idx].target,
                        pad: pads.remove(&line_id).expect("proposed line has a pad"),
                        accepted,
                        round,
                    });
                }
                at = end;
            }
            if let Some(r) = pending
                .iter()
                .find(|&&i| matches!(reqs[i].state, AliceState::Proposed { .. }))
            {
                return Err(EngineError::Protocol(format!(
                    "no response for request {}",
                    reqs[*r].request_id
                )));
            }

            let mut reveals = RevealBatch {
                round,
                ..Default::default()
            };
            for &i in &pending {
                if matches!(reqs[i].state, AliceState::Accepted { .. }) {
                    let pad = alice_reveal(&mut reqs[i])?;
                    reveals.reveals.push(Reveal {
                        request_id: reqs[i].request_id,
                        pad,
                    });
                }
            }
            for frag in fragment_reveal(reveals, budget) {
                self.link.send(&WireMessage::RevealBatch(frag))?;
            }

            if self.options.verify_digests {
                let digest = self.table.status_digest();
                self.link.send(&WireMessage::TableDigest { round, digest })?;
                match recv(self.link)? {
                    WireMessage::TableDigest { round: r, digest: d } if r == round => {
                        if d != digest {
                            return Err(digest_mismatch(self.link, round));
                        }
                    }
                    m => return Err(unexpected("TABLE_DIGEST", &m)),
                }
            }
        }
        Ok(AliceBatch {
            requests: reqs,
            rounds: rounds_used,
        })
    }

    fn recv_responses(&mut self, round: u32) -> Result<Vec<Response>, EngineError> {
        let mut out = Vec::new();
        loop {
            match recv(self.link)? {
                WireMessage::RespondBatch(b) if b.round == round => {
                    out.extend(b.responses);
                    if !b.more {
                        return Ok(out);
                    }
                }
                m => return Err(unexpected("RESPOND_BATCH", &m)),
            }
        }
    }
}

/// Bob's end of a session: he owns the recorded inputs and outputs.
pub struct BobSession<'a> {
    table: &'a mut SharedTableBob,
    link: &'a mut Link,
    options: ExecOptions,
    next_request_id: u64,
    audit: Vec<BobAuditEntry>,
}

impl<'a> BobSession<'a> {
    pub fn new(table: &'a mut SharedTableBob, link: &'a mut Link, options: ExecOptions) -> BobSession<'a> {
        BobSession {
            table,
            link,
            options,
            next_request_id: 0,
            audit: Vec::new(),
        }
    }

    pub fn table(&self) -> &SharedTableBob {
        self.table
    }

    pub fn table_mut(&mut self) -> &mut SharedTableBob {
        self.table
    }

    pub fn link(&mut self) -> &mut Link {
        self.link
    }

    pub fn audit(&self) -> &[BobAuditEntry] {
        &self.audit
    }

    pub fn recv(&mut self) -> Result<WireMessage, EngineError> {
        recv(self.link)
    }

    pub fn abort(&mut self, code: AbortCode, reason: &str) -> Result<(), EngineError> {
        self.link.send(&WireMessage::Abort {
            code,
            reason: reason.to_string(),
        })?;
        Ok(())
    }

    pub fn hello(&mut self) -> Result<(), EngineError> {
        let ours = hello_for(
            Party::Bob,
            self.table.len(),
            self.table.seed(),
            self.table.status_digest(),
        );
        self.link.send(&ours)?;
        check_hello(self.link, Party::Bob, &ours).inspect_err(|e| abort_for(self.link, e))
    }

    /// Evaluates one gate per input against whatever Alice proposes.
    pub fn execute_batch(&mut self, inputs: &[bool]) -> Result<BobBatch, EngineError> {
        let r = self.run_batch(inputs);
        if let Err(e) = &r {
            abort_for(self.link, e);
        }
        r
    }

    fn run_batch(&mut self, inputs: &[bool]) -> Result<BobBatch, EngineError> {
        let n = inputs.len();
        let first = self.next_request_id;
        self.next_request_id += n as u64;
        let mut reqs: Vec<BobRequest> = inputs
            .iter()
            .enumerate()
            .map(|(i, &x)| BobRequest::new(first + i as u64, x))
            .collect();
        let budget = self.options.frame_budget;
        let mut last_round = vec![0u32; n];
        let mut round = 0u32;
        let mut rounds_used = 0u32;
        while reqs.iter().any(|r| !r.is_terminal()) {
            round += 1;
            let batch = self.recv_proposals(round)?;
            if !batch.proposals.is_empty() {
                rounds_used += 1;
            }
            bob_apply_deletions(self.table, batch.deleted.iter().flat_map(|r| r.ids())).map_err(peer_fault)?;
            for &id in &batch.exhausted {
                let idx = request_index(first, n, id)?;
                if reqs[idx].state != BobState::Pending || last_round[idx] == round {
                    return Err(EngineError::Protocol(format!("request {id} cannot be exhausted now")));
                }
                last_round[idx] = round;
                reqs[idx].state = BobState::Failed;
            }
            let mut responses = RespondBatch {
                round,
                ..Default::default()
            };
            let props = &batch.proposals;
            let mut at = 0;
            while at < props.len() {
                let id = props[at].request_id;
                let end = props[at..]
                    .iter()
                    .position(|p| p.request_id != id)
                    .map_or(props.len(), |p| at + p);
                let idx = request_index(first, n, id)?;
                if last_round[idx] == round {
                    return Err(EngineError::Protocol(format!("request {id} proposed twice in round {round}")));
                }
                last_round[idx] = round;
                let lines: Vec<u64> = props[at..end].iter().map(|p| p.line_id).collect();
                let answers = bob_respond_candidates(self.table, &mut reqs[idx], &lines).map_err(peer_fault)?;
                for (&line_id, &accept) in lines.iter().zip(&answers) {
                    let rec = self.table.get(line_id).expect("line was just answered");
                    self.audit.push(BobAuditEntry {
                        request_id: id,
                        line_id,
                        desired_input: reqs[idx].desired_input,
                        line_input: rec.input,
                        recorded_output: rec.output,
                        accepted: accept,
                        round,
                    });
                    responses.responses.push(Response {
                        request_id: id,
                        line_id,
                        accept,
                    });
                }
                at = end;
            }
            if let Some(i) = (0..n).find(|&i| reqs[i].state == BobState::Pending && last_round[i] != round) {
                return Err(EngineError::Protocol(format!(
                    "request {} neither proposed nor exhausted in round {round}",
                    reqs[i].request_id
                )));
            }
            for frag in fragment_respond(responses, budget) {
                self.link.send(&WireMessage::RespondBatch(frag))?;
            }

            loop {
                match recv(self.link)? {
                    WireMessage::RevealBatch(b) if b.round == round => {
                        for r in &b.reveals {
                            let idx = request_index(first, n, r.request_id)?;
                            bob_handle_reveal(&mut reqs[idx], r.pad)?;
                        }
                        if !b.more {
                            break;
                        }
                    }
                    m => return Err(unexpected("REVEAL_BATCH", &m)),
                }
            }
            if let Some(r) = reqs.iter().find(|r| matches!(r.state, BobState::Accepted { .. })) {
                return Err(EngineError::Protocol(format!(
                    "accepted request {} was never revealed",
                    r.request_id
                )));
            }

            if self.options.verify_digests {
                let digest = self.table.status_digest();
                match recv(self.link)? {
                    WireMessage::TableDigest { round: r, digest: d } if r == round => {
                        if d != digest {
                            return Err(digest_mismatch(self.link, round));
                        }
                    }
                    m => return Err(unexpected("TABLE_DIGEST", &m)),
                }
                self.link.send(&WireMessage::TableDigest { round, digest })?;
            }
        }
        Ok(BobBatch {
            requests: reqs,
            rounds: rounds_used,
        })
    }

    fn recv_proposals(&mut self, round: u32) -> Result<ProposeBatch, EngineError> {
        let mut all = ProposeBatch {
            round,
            ..Default::default()
        };
        loop {
            match recv(self.link)? {
                WireMessage::ProposeBatch(b) if b.round == round => {
                    all.proposals.extend(b.proposals);
                    all.deleted.extend(b.deleted);
                    all.exhausted.extend(b.exhausted);
                    if !b.more {
                        return Ok(all);
                    }
                }
                m => return Err(unexpected("PROPOSE_BATCH", &m)),
            }
        }
    }
}

/// Joins both parties' logs into the ground-truth view the privacy audit needs.
pub fn build_audit_transcript(alice: &[AliceAuditEntry], bob: &[BobAuditEntry]) -> AuditTranscript {
    let by_line: HashMap<u64, &AliceAuditEntry> = alice.iter().map(|e| (e.line_id, e)).collect();
    let mut declined = Vec::new();
    let mut per_request: BTreeMap<u64, (bool, u32, bool)> = BTreeMap::new();
    for b in bob {
        let slot = per_request
            .entry(b.request_id)
            .or_insert((b.desired_input, 0, false));
        if b.accepted {
            slot.2 = true;
            continue;
        }
        slot.1 += 1;
        if let Some(a) = by_line.get(&b.line_id) {
            declined.push(DeclinedLine {
                target: a.target,
                line_input: b.line_input,
                recorded_output: b.recorded_output,
                leaked_pad: None,
            });
        }
    }
    let attempts = per_request
        .into_values()
        .filter(|&(_, _, done)| done)
        .map(|(desired_input, declines, _)| RequestAttempts {
            desired_input,
            declines,
        })
        .collect();
    AuditTranscript { declined, attempts }
}

/// Checks the state-machine logs: every line is offered at most once, both
/// sides agree on every answer, and no request accepts twice.
pub fn verify_audit(alice: &[AliceAuditEntry], bob: &[BobAuditEntry]) -> Result<(), String> {
    if alice.len() != bob.len() {
        return Err(format!("{} proposals logged by Alice, {} by Bob", alice.len(), bob.len()));
    }
    let mut lines = HashSet::new();
    let mut accepted = HashSet::new();
    for (a, b) in alice.iter().zip(bob) {
        if a.line_id != b.line_id || a.request_id != b.request_id || a.accepted != b.accepted {
            return Err(format!("logs disagree on line {}", a.line_id));
        }
        if !lines.insert(a.line_id) {
            return Err(format!("line {} offered twice", a.line_id));
        }
        if a.accepted && !accepted.insert(a.request_id) {
            return Err(format!("request {} accepted twice", a.request_id));
        }
    }
    Ok(())
}
