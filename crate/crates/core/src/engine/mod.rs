//! The classical execution protocol over shared-table lines.
//!
//! For each gate evaluation Alice draws a pad `r`, looks for a line whose
//! recorded gate is the target (or its opposite when `r = 1`) and offers it to
//! Bob. Bob takes the line only if its recorded input equals the input he
//! wants; Alice then reveals `r` and Bob corrects his recorded output.

mod batch;
mod circuit;
mod gk;

pub use batch::{
    build_audit_transcript, verify_audit, AliceAuditEntry, AliceBatch, AliceSession, BatchMode,
    BobAuditEntry, BobBatch, BobSession, ExecOptions,
};
pub use circuit::{
    randomize_circuit, randomize_circuit_with_probability, Circuit, CircuitGate, CircuitShape,
    ShapeGate,
};
pub use gk::{gk_combine, gk_slot_gates, gk_slot_inputs, simulate_gk, GkGateSpec, GkPlan};

use rand::Rng;
use thiserror::Error;

use crate::qsim::{GateG1, QsimError};
use crate::tabler::{LineStatus, SharedTableAlice, SharedTableBob, TableError};
use crate::wire::{AbortCode, WireError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("no suitable line left for request {request_id}")]
    TableExhausted { request_id: u64 },
    #[error("line {0} is unknown")]
    UnknownLine(u64),
    #[error("invalid request state: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("peer aborted ({code:?}): {reason}")]
    Aborted { code: AbortCode, reason: String },
    #[error("no product-state decomposition for this gate")]
    DecompositionUnavailable,
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error("circuit: {0}")]
    Circuit(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AliceState {
    Pending,
    /// Offered lines and the pad drawn for each.
    Proposed { candidates: Vec<(u64, bool)> },
    Accepted { line_id: u64, pad: bool },
    Revealed { line_id: u64, pad: bool },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliceRequest {
    pub request_id: u64,
    pub target: GateG1,
    pub state: AliceState,
}

impl AliceRequest {
    pub fn new(request_id: u64, target: GateG1) -> AliceRequest {
        AliceRequest {
            request_id,
            target,
            state: AliceState::Pending,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, AliceState::Revealed { .. } | AliceState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BobState {
    Pending,
    Proposed { candidates: Vec<u64> },
    Accepted { line_id: u64, recorded_output: bool },
    Done(bool),
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BobRequest {
    pub request_id: u64,
    pub desired_input: bool,
    pub state: BobState,
    pub declines: u32,
}

impl BobRequest {
    pub fn new(request_id: u64, desired_input: bool) -> BobRequest {
        BobRequest {
            request_id,
            desired_input,
            state: BobState::Pending,
            declines: 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, BobState::Done(_) | BobState::Failed)
    }

    pub fn output(&self) -> Option<bool> {
        match self.state {
            BobState::Done(b) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineProposal {
    pub request_id: u64,
    pub line_id: u64,
    /// Lines skipped (and deleted) by the scan that found this one.
    pub deleted: Vec<u64>,
}

/// Finds up to `count` lines for `req`, scanning from table index `*from`.
///
/// Each candidate gets its own fresh pad. Skipped available lines are
/// deleted, but only if at least one candidate was found; an exhausted
/// request leaves the table untouched. On return `*from` is just past the
/// last candidate, and everything before it has left `Available`.
pub(crate) fn scan_candidates<R: Rng + ?Sized>(
    table: &mut SharedTableAlice,
    req: &mut AliceRequest,
    count: usize,
    rng: &mut R,
    from: &mut usize,
    deleted: &mut Vec<u64>,
) -> Result<Vec<(u64, bool)>, EngineError> {
    if req.state != AliceState::Pending {
        return Err(EngineError::InvalidState(format!(
            "request {} is not pending",
            req.request_id
        )));
    }
    let mut found: Vec<(usize, bool)> = Vec::with_capacity(count);
    let mut skipped: Vec<usize> = Vec::new();
    let mut idx = (*from).max(table.cursor());
    let records = table.records();
    let mut pad: bool = rng.random();
    while found.len() < count && idx < records.len() {
        let rec = &records[idx];
        if rec.status == LineStatus::Available {
            let wanted = if pad { req.target.opposite() } else { req.target };
            if rec.gate == wanted {
                found.push((idx, pad));
                if found.len() < count {
                    pad = rng.random();
                }
            } else {
                skipped.push(idx);
            }
        }
        idx += 1;
    }
    if found.is_empty() {
        req.state = AliceState::Failed;
        return Err(EngineError::TableExhausted {
            request_id: req.request_id,
        });
    }
    // Lines past the last candidate were only looked at, not skipped.
    let last = found.last().expect("non-empty").0;
    skipped.retain(|&i| i < last);
    for &i in &skipped {
        deleted.push(table.records()[i].line_id);
        table.set_status_at(i, LineStatus::Deleted)?;
    }
    let mut candidates = Vec::with_capacity(found.len());
    for &(i, p) in &found {
        candidates.push((table.records()[i].line_id, p));
        table.set_status_at(i, LineStatus::Proposed)?;
    }
    *from = last + 1;
    req.state = AliceState::Proposed {
        candidates: candidates.clone(),
    };
    Ok(candidates)
}

/// One proposal for a pending request, scanning from the head of the table.
pub fn alice_next_proposal<R: Rng + ?Sized>(
    table: &mut SharedTableAlice,
    req: &mut AliceRequest,
    rng: &mut R,
) -> Result<LineProposal, EngineError> {
    let mut from = table.cursor();
    let mut deleted = Vec::new();
    let c = scan_candidates(table, req, 1, rng, &mut from, &mut deleted)?;
    Ok(LineProposal {
        request_id: req.request_id,
        line_id: c[0].0,
        deleted,
    })
}

/// Deletes lines Alice skipped. Each must still be available on Bob's side.
pub fn bob_apply_deletions(
    table: &mut SharedTableBob,
    ids: impl IntoIterator<Item = u64>,
) -> Result<(), EngineError> {
    for id in ids {
        let idx = table.position(id).ok_or(EngineError::UnknownLine(id))?;
        table.set_status_at(idx, LineStatus::Deleted)?;
    }
    Ok(())
}

/// Bob's answers to the candidates offered for one request, in order. He
/// accepts the first whose recorded input matches and declines the rest.
pub fn bob_respond_candidates(
    table: &mut SharedTableBob,
    req: &mut BobRequest,
    line_ids: &[u64],
) -> Result<Vec<bool>, EngineError> {
    if req.state != BobState::Pending {
        return Err(EngineError::InvalidState(format!(
            "request {} is not pending",
            req.request_id
        )));
    }
    let mut answers = Vec::with_capacity(line_ids.len());
    let mut accepted = None;
    for &id in line_ids {
        let idx = table.position(id).ok_or(EngineError::UnknownLine(id))?;
        let rec = table.records()[idx];
        if rec.status != LineStatus::Available {
            return Err(EngineError::InvalidState(format!("line {id} is not available")));
        }
        table.set_status_at(idx, LineStatus::Proposed)?;
        let accept = accepted.is_none() && rec.input == req.desired_input;
        if accept {
            accepted = Some((id, rec.output));
            table.set_status_at(idx, LineStatus::Consumed)?;
        } else {
            table.set_status_at(idx, LineStatus::Deleted)?;
            req.declines += 1;
        }
        answers.push(accept);
    }
    req.state = match accepted {
        Some((line_id, recorded_output)) => BobState::Accepted {
            line_id,
            recorded_output,
        },
        None => BobState::Pending,
    };
    Ok(answers)
}

/// Applies a proposal on Bob's side and answers it.
pub fn bob_respond(
    table: &mut SharedTableBob,
    proposal: &LineProposal,
    req: &mut BobRequest,
) -> Result<bool, EngineError> {
    bob_apply_deletions(table, proposal.deleted.iter().copied())?;
    Ok(bob_respond_candidates(table, req, &[proposal.line_id])?[0])
}

/// Records Bob's answers on Alice's side. At most one candidate may be
/// accepted; declined lines are deleted and their pads thrown away.
pub fn alice_handle_responses(
    table: &mut SharedTableAlice,
    req: &mut AliceRequest,
    answers: &[(u64, bool)],
) -> Result<(), EngineError> {
    let candidates = match &req.state {
        AliceState::Proposed { candidates } => candidates.clone(),
        _ => {
            return Err(EngineError::InvalidState(format!(
                "response for request {} which has no open proposal",
                req.request_id
            )))
        }
    };
    if answers.len() != candidates.len()
        || answers.iter().zip(&candidates).any(|(a, c)| a.0 != c.0)
    {
        return Err(EngineError::Protocol(format!(
            "responses for request {} do not match its proposals",
            req.request_id
        )));
    }
    let mut accepted = None;
    for (&(line_id, accept), &(_, pad)) in answers.iter().zip(&candidates) {
        if accept {
            if accepted.is_some() {
                return Err(EngineError::Protocol(format!(
                    "request {} accepted twice",
                    req.request_id
                )));
            }
            accepted = Some((line_id, pad));
        }
    }
    for &(line_id, accept) in answers {
        let next = if accept {
            LineStatus::Consumed
        } else {
            LineStatus::Deleted
        };
        table.set_status(line_id, next)?;
    }
    req.state = match accepted {
        Some((line_id, pad)) => AliceState::Accepted { line_id, pad },
        None => AliceState::Pending,
    };
    Ok(())
}

pub fn alice_handle_response(
    table: &mut SharedTableAlice,
    req: &mut AliceRequest,
    line_id: u64,
    accept: bool,
) -> Result<(), EngineError> {
    alice_handle_responses(table, req, &[(line_id, accept)])
}

/// The pad for an accepted request. Anything else is refused.
pub fn alice_reveal(req: &mut AliceRequest) -> Result<bool, EngineError> {
    match req.state {
        AliceState::Accepted { line_id, pad } => {
            req.state = AliceState::Revealed { line_id, pad };
            Ok(pad)
        }
        _ => Err(EngineError::InvalidState(format!(
            "request {} has no accepted line to reveal",
            req.request_id
        ))),
    }
}

pub fn bob_finalize(recorded_output: bool, r: bool) -> bool {
    recorded_output ^ r
}

/// Applies a revealed pad to an accepted request.
pub fn bob_handle_reveal(req: &mut BobRequest, r: bool) -> Result<bool, EngineError> {
    match req.state {
        BobState::Accepted { recorded_output, .. } => {
            let out = bob_finalize(recorded_output, r);
            req.state = BobState::Done(out);
            Ok(out)
        }
        _ => Err(EngineError::Protocol(format!(
            "pad revealed for request {} which Bob has not accepted",
            req.request_id
        ))),
    }
}
