//! The quantum-phase session and the shared tables it leaves behind.
//!
//! A session produces two time-tagged detection streams. After the clock
//! offset between the parties is recovered, coincident detections are paired
//! and each confirmed pair becomes one line in both parties' tables.

mod file;
mod generate;
mod session;
mod sync;

pub use file::{
    load_events, load_table, peek_party, read_events, read_table, save_events, save_table,
    write_events, write_table, RecordCodec, TableFileError, EVENTS_MAGIC, TABLE_HEADER_LEN,
    TABLE_MAGIC, TABLE_VERSION,
};
pub use generate::{DriftModel, TableGenerator};
pub use session::{
    clock_error, reconcile, reconcile_bob, run_pipeline, simulate_session, simulate_session_with,
    DetectionEvent, PipelineOutput, PipelineReport, ReconcileReport, SessionCapture,
    SessionParams, CALIBRATION_PS, GAP_PS, LEAD_IN_PS,
};
pub use sync::{
    find_calibration_edge, find_clock_offset, match_coincidences, track_clock_offset, ClockMap,
    Coincidence, PiecewiseClock, SyncError, TrackingParams,
};

use std::fmt;

use serde::{Deserialize, Serialize};
use sha3::{Digest, Sha3_256};
use thiserror::Error;

use crate::qsim::GateG1;

pub const PS_PER_SECOND: i64 = 1_000_000_000_000;
pub const PS_PER_MS: i64 = 1_000_000_000;
pub const PS_PER_NS: i64 = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Alice,
    Bob,
}

impl Party {
    pub fn code(self) -> u8 {
        match self {
            Party::Alice => 0,
            Party::Bob => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Party> {
        match code {
            0 => Some(Party::Alice),
            1 => Some(Party::Bob),
            _ => None,
        }
    }

    pub fn other(self) -> Party {
        match self {
            Party::Alice => Party::Bob,
            Party::Bob => Party::Alice,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Party::Alice => "alice",
            Party::Bob => "bob",
        })
    }
}

/// Lifecycle of a table line. Allowed moves: `Available → Proposed →
/// {Consumed, Deleted}` and `Available → Deleted`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineStatus {
    Available,
    Proposed,
    Consumed,
    Deleted,
}

impl LineStatus {
    pub fn code(self) -> u8 {
        match self {
            LineStatus::Available => 0,
            LineStatus::Proposed => 1,
            LineStatus::Consumed => 2,
            LineStatus::Deleted => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<LineStatus> {
        match code {
            0 => Some(LineStatus::Available),
            1 => Some(LineStatus::Proposed),
            2 => Some(LineStatus::Consumed),
            3 => Some(LineStatus::Deleted),
            _ => None,
        }
    }

    pub fn can_become(self, next: LineStatus) -> bool {
        matches!(
            (self, next),
            (LineStatus::Available, LineStatus::Proposed)
                | (LineStatus::Available, LineStatus::Deleted)
                | (LineStatus::Proposed, LineStatus::Consumed)
                | (LineStatus::Proposed, LineStatus::Deleted)
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("line {0} is not in the table")]
    UnknownLine(u64),
    #[error("line {line_id}: illegal status change {from:?} -> {to:?}")]
    InvalidTransition {
        line_id: u64,
        from: LineStatus,
        to: LineStatus,
    },
    #[error("line ids must be strictly increasing")]
    Unsorted,
}

/// Alice's record of one line: the gate whose state Bob received.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineRecordAlice {
    pub line_id: u64,
    pub gate: GateG1,
    pub status: LineStatus,
}

/// Bob's record of one line: his random input and the measured output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineRecordBob {
    pub line_id: u64,
    pub input: bool,
    pub output: bool,
    pub status: LineStatus,
}

pub trait LineRecord: Copy {
    const PARTY: Party;
    fn line_id(&self) -> u64;
    fn status(&self) -> LineStatus;
    fn status_mut(&mut self) -> &mut LineStatus;
}

impl LineRecord for LineRecordAlice {
    const PARTY: Party = Party::Alice;
    fn line_id(&self) -> u64 {
        self.line_id
    }
    fn status(&self) -> LineStatus {
        self.status
    }
    fn status_mut(&mut self) -> &mut LineStatus {
        &mut self.status
    }
}

impl LineRecord for LineRecordBob {
    const PARTY: Party = Party::Bob;
    fn line_id(&self) -> u64 {
        self.line_id
    }
    fn status(&self) -> LineStatus {
        self.status
    }
    fn status_mut(&mut self) -> &mut LineStatus {
        &mut self.status
    }
}

/// One party's half of the shared table, sorted by `line_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedTable<R> {
    seed: u64,
    records: Vec<R>,
    /// Every line before this index has left `Available`.
    cursor: usize,
}

pub type SharedTableAlice = SharedTable<LineRecordAlice>;
pub type SharedTableBob = SharedTable<LineRecordBob>;

impl<R: LineRecord> SharedTable<R> {
    pub fn new(seed: u64, records: Vec<R>) -> Result<Self, TableError> {
        if records.windows(2).any(|w| w[0].line_id() >= w[1].line_id()) {
            return Err(TableError::Unsorted);
        }
        let mut table = SharedTable {
            seed,
            records,
            cursor: 0,
        };
        table.advance_cursor();
        Ok(table)
    }

    pub fn party(&self) -> Party {
        R::PARTY
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn position(&self, line_id: u64) -> Option<usize> {
        self.records
            .binary_search_by_key(&line_id, |r| r.line_id())
            .ok()
    }

    pub fn get(&self, line_id: u64) -> Option<&R> {
        self.position(line_id).map(|i| &self.records[i])
    }

    pub fn status(&self, line_id: u64) -> Result<LineStatus, TableError> {
        self.get(line_id)
            .map(|r| r.status())
            .ok_or(TableError::UnknownLine(line_id))
    }

    pub fn set_status(&mut self, line_id: u64, next: LineStatus) -> Result<(), TableError> {
        let idx = self.position(line_id).ok_or(TableError::UnknownLine(line_id))?;
        self.set_status_at(idx, next)
    }

    pub(crate) fn set_status_at(&mut self, idx: usize, next: LineStatus) -> Result<(), TableError> {
        let record = &mut self.records[idx];
        let current = record.status();
        if !current.can_become(next) {
            return Err(TableError::InvalidTransition {
                line_id: record.line_id(),
                from: current,
                to: next,
            });
        }
        *record.status_mut() = next;
        if idx == self.cursor {
            self.advance_cursor();
        }
        Ok(())
    }

    fn advance_cursor(&mut self) {
        while self.cursor < self.records.len()
            && self.records[self.cursor].status() != LineStatus::Available
        {
            self.cursor += 1;
        }
    }

    /// Index of the lowest line that may still be `Available`.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn count(&self, status: LineStatus) -> usize {
        self.records.iter().filter(|r| r.status() == status).count()
    }

    pub fn available_ids(&self) -> Vec<u64> {
        self.records[self.cursor..]
            .iter()
            .filter(|r| r.status() == LineStatus::Available)
            .map(|r| r.line_id())
            .collect()
    }

    /// SHA3-256 over `(line_id, status)` for every line; both parties'
    /// digests agree exactly when their views of line statuses agree.
    pub fn status_digest(&self) -> [u8; 32] {
        let mut hasher = Sha3_256::new();
        for r in &self.records {
            hasher.update(r.line_id().to_le_bytes());
            hasher.update([r.status().code()]);
        }
        hasher.finalize().into()
    }
}

impl SharedTableAlice {
    pub fn from_gates(seed: u64, gates: impl IntoIterator<Item = GateG1>) -> SharedTableAlice {
        let records = gates
            .into_iter()
            .enumerate()
            .map(|(i, gate)| LineRecordAlice {
                line_id: i as u64,
                gate,
                status: LineStatus::Available,
            })
            .collect();
        SharedTable::new(seed, records).expect("sequential ids")
    }
}

impl SharedTableBob {
    pub fn from_pairs(seed: u64, pairs: impl IntoIterator<Item = (bool, bool)>) -> SharedTableBob {
        let records = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (input, output))| LineRecordBob {
                line_id: i as u64,
                input,
                output,
                status: LineStatus::Available,
            })
            .collect();
        SharedTable::new(seed, records).expect("sequential ids")
    }
}

/// Fraction of lines whose recorded output equals the ideal gate output,
/// split by `(gate, input)`. Both tables must cover the same line ids.
pub fn success_statistics(alice: &SharedTableAlice, bob: &SharedTableBob) -> SuccessStats {
    let mut stats = SuccessStats::default();
    for (a, b) in alice.records().iter().zip(bob.records()) {
        debug_assert_eq!(a.line_id, b.line_id);
        let cell = &mut stats.cells[a.gate.code() as usize][usize::from(b.input)];
        cell.0 += 1;
        if a.gate.eval(b.input) == b.output {
            cell.1 += 1;
        }
    }
    stats
}

/// `(lines, correct)` per gate and input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuccessStats {
    pub cells: [[(u64, u64); 2]; 4],
}

impl SuccessStats {
    pub fn total(&self) -> u64 {
        self.cells.iter().flatten().map(|c| c.0).sum()
    }

    pub fn overall(&self) -> f64 {
        let correct: u64 = self.cells.iter().flatten().map(|c| c.1).sum();
        correct as f64 / self.total().max(1) as f64
    }

    pub fn rate(&self, gate: GateG1, input: bool) -> f64 {
        let (n, k) = self.cells[gate.code() as usize][usize::from(input)];
        k as f64 / n.max(1) as f64
    }
}
