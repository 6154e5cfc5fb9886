//! Simulated detection streams for one quantum-phase session, and the
//! reconciliation that turns matched detections into table lines.
//!
//! Timeline on Alice's clock: a dark lead-in, a calibration burst with the
//! source unblocked, a dark gap, then the table phase of `duration` seconds.
//! Only coincidences inside the table phase become lines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use super::sync::{
    find_clock_offset, match_coincidences, track_clock_offset, ClockMap, Coincidence,
    PiecewiseClock, SyncError, TrackingParams,
};
use super::{
    LineRecordAlice, LineRecordBob, LineStatus, Party, SharedTable, SharedTableAlice,
    SharedTableBob, PS_PER_MS, PS_PER_NS, PS_PER_SECOND,
};
use crate::qsim::{AliceBasis, NoiseModel, QsimError, QuantumChannel};

pub const LEAD_IN_PS: i64 = 20 * PS_PER_MS;
pub const CALIBRATION_PS: i64 = 100 * PS_PER_MS;
pub const GAP_PS: i64 = 20 * PS_PER_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionEvent {
    /// Picoseconds on the detecting party's own clock.
    pub timestamp: i64,
    /// Detector index: basis in bit 1, outcome in bit 0.
    pub channel: u8,
    pub party: Party,
    /// Set on both sides when the pair was a multi-photon emission.
    pub multi_photon: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    /// Emitted pairs per second.
    pub pair_rate: f64,
    /// Length of the table phase in seconds.
    pub duration: f64,
    pub coincidence_window: i64,
    /// Bob's clock minus Alice's, in ps.
    pub clock_offset: i64,
    /// Bob's clock rate error in ppm.
    pub clock_skew: f64,
    /// Gaussian timestamp jitter per detection, in ps.
    pub jitter_sigma: f64,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl Default for SessionParams {
    fn default() -> Self {
        SessionParams {
            pair_rate: 10_000.0,
            duration: 10.0,
            coincidence_window: 6 * PS_PER_NS,
            clock_offset: 0,
            clock_skew: 0.0,
            jitter_sigma: 100.0,
            noise: NoiseModel::ideal().with_loss(crate::qsim::DETECTOR_LOSS),
            seed: 0,
        }
    }
}

impl SessionParams {
    pub fn validate(&self) -> Result<(), QsimError> {
        self.noise.validate()?;
        let bad = |m: &str| Err(QsimError::InvalidParameter(m.into()));
        if self.coincidence_window <= 0 {
            return bad("coincidence_window must be positive");
        }
        if !(self.pair_rate > 0.0 && self.pair_rate.is_finite()) {
            return bad("pair_rate must be positive");
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad("duration must be non-negative");
        }
        if !(self.jitter_sigma >= 0.0) || !self.clock_skew.is_finite() || self.clock_skew.abs() >= 1e5 {
            return bad("jitter or skew out of range");
        }
        Ok(())
    }

    /// Alice-clock time at which the table phase opens.
    pub fn table_start(&self) -> i64 {
        LEAD_IN_PS + CALIBRATION_PS + GAP_PS
    }

    pub fn table_end(&self) -> i64 {
        self.table_start() + (self.duration * PS_PER_SECOND as f64).round() as i64
    }

    fn bob_clock(&self, true_ps: f64) -> f64 {
        (true_ps + self.clock_offset as f64) * (1.0 + self.clock_skew * 1e-6)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionCapture {
    pub params: SessionParams,
    pub alice: Vec<DetectionEvent>,
    pub bob: Vec<DetectionEvent>,
    /// On Alice's clock.
    pub table_start: i64,
    pub pairs_emitted: usize,
    pub pairs_received: usize,
}

/// Generates both detection streams. Pair emissions are Poisson in time;
/// each pair is sampled through the noise model, lost qubits leave an
/// Alice-only detection and dark counts are uniform over the session.
pub fn simulate_session(params: &SessionParams) -> Result<SessionCapture, QsimError> {
    simulate_session_with(params, QuantumChannel::new(params.noise))
}

pub fn simulate_session_with(
    params: &SessionParams,
    channel: QuantumChannel,
) -> Result<SessionCapture, QsimError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let gap = Exp::new(params.pair_rate / PS_PER_SECOND as f64)
        .map_err(|e| QsimError::InvalidParameter(e.to_string()))?;
    let jitter = Normal::new(0.0, params.jitter_sigma)
        .map_err(|e| QsimError::InvalidParameter(e.to_string()))?;

    let open = [
        (LEAD_IN_PS, LEAD_IN_PS + CALIBRATION_PS),
        (params.table_start(), params.table_end()),
    ];
    let session_end = params.table_end();
    let mut alice = Vec::new();
    let mut bob = Vec::new();
    let (mut emitted, mut received) = (0, 0);

    for (from, to) in open {
        let mut t = from as f64;
        loop {
            t += gap.sample(&mut rng);
            if t >= to as f64 {
                break;
            }
            emitted += 1;
            let ta = (t + jitter.sample(&mut rng)).round() as i64;
            match channel.sample_line(&mut rng) {
                Some(line) => {
                    received += 1;
                    let (basis, sign) = line.alice_gate.alice_projection();
                    let a_channel = match basis {
                        AliceBasis::A1 => 0,
                        AliceBasis::A2 => 2,
                    } + u8::from(sign < 0);
                    let b_channel = 2 * u8::from(line.bob_input()) + u8::from(line.bob_output);
                    alice.push(DetectionEvent {
                        timestamp: ta,
                        channel: a_channel,
                        party: Party::Alice,
                        multi_photon: line.multi_photon,
                    });
                    let tb = params.bob_clock(t) + jitter.sample(&mut rng);
                    bob.push(DetectionEvent {
                        timestamp: tb.round() as i64,
                        channel: b_channel,
                        party: Party::Bob,
                        multi_photon: line.multi_photon,
                    });
                }
                None => {
                    // Alice still detects her half; which basis and outcome is uniform.
                    let c: u8 = rng.random_range(0..4);
                    alice.push(DetectionEvent {
                        timestamp: ta,
                        channel: c,
                        party: Party::Alice,
                        multi_photon: false,
                    });
                }
            }
        }
    }

    let rate = params.noise.dark_count_rate;
    if rate > 0.0 {
        let expected = rate * session_end as f64 / PS_PER_SECOND as f64;
        for (party, stream) in [(Party::Alice, &mut alice), (Party::Bob, &mut bob)] {
            let n = rand_distr::Poisson::new(expected)
                .map_err(|e| QsimError::InvalidParameter(e.to_string()))?
                .sample(&mut rng) as usize;
            for _ in 0..n {
                let t = rng.random_range(0.0..session_end as f64);
                let ts = match party {
                    Party::Alice => t,
                    Party::Bob => params.bob_clock(t),
                };
                stream.push(DetectionEvent {
                    timestamp: ts.round() as i64,
                    channel: rng.random_range(0..4),
                    party,
                    multi_photon: false,
                });
            }
        }
    }

    alice.sort_by_key(|e| e.timestamp);
    bob.sort_by_key(|e| e.timestamp);
    Ok(SessionCapture {
        params: *params,
        alice,
        bob,
        table_start: params.table_start(),
        pairs_emitted: emitted,
        pairs_received: received,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub lines: usize,
    pub multi_photon_lines: usize,
    pub alice_events: usize,
    pub bob_events: usize,
    /// Lines over Alice's table-phase detections.
    pub matched_fraction: f64,
}

/// Decodes a pair of channel indices into table records.
fn decode_line(a: &DetectionEvent, b: &DetectionEvent, line_id: u64) -> (LineRecordAlice, LineRecordBob) {
    let basis = if a.channel & 2 == 0 {
        AliceBasis::A1
    } else {
        AliceBasis::A2
    };
    let gate = basis.recorded_gate(a.channel & 1 == 0);
    (
        LineRecordAlice {
            line_id,
            gate,
            status: LineStatus::Available,
        },
        LineRecordBob {
            line_id,
            input: b.channel & 2 != 0,
            output: b.channel & 1 != 0,
            status: LineStatus::Available,
        },
    )
}

/// Keeps only matched pairs whose Alice detection falls in the table phase
/// and numbers them from 0 in time order.
pub fn reconcile(
    alice: &[DetectionEvent],
    bob: &[DetectionEvent],
    pairs: &[Coincidence],
    table_start: i64,
    seed: u64,
) -> (SharedTableAlice, SharedTableBob, ReconcileReport) {
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    let mut multi = 0;
    for p in pairs.iter().filter(|p| alice[p.alice].timestamp >= table_start) {
        let (a, b) = (&alice[p.alice], &bob[p.bob]);
        let (la, lb) = decode_line(a, b, ra.len() as u64);
        multi += usize::from(a.multi_photon || b.multi_photon);
        ra.push(la);
        rb.push(lb);
    }
    let alice_events = alice.iter().filter(|e| e.timestamp >= table_start).count();
    let report = ReconcileReport {
        lines: ra.len(),
        multi_photon_lines: multi,
        alice_events,
        bob_events: pairs.len(),
        matched_fraction: ra.len() as f64 / alice_events.max(1) as f64,
    };
    (
        SharedTable::new(seed, ra).expect("sequential ids"),
        SharedTable::new(seed, rb).expect("sequential ids"),
        report,
    )
}

/// Just Bob's half of [`reconcile`], for when he only receives the pairing.
pub fn reconcile_bob(bob: &[DetectionEvent], bob_indices: &[usize], seed: u64) -> SharedTableBob {
    let records = bob_indices
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let b = &bob[j];
            LineRecordBob {
                line_id: i as u64,
                input: b.channel & 2 != 0,
                output: b.channel & 1 != 0,
                status: LineStatus::Available,
            }
        })
        .collect();
    SharedTable::new(seed, records).expect("sequential ids")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub estimated_offset: i64,
    pub anchors: usize,
    pub reconcile: ReconcileReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub alice: SharedTableAlice,
    pub bob: SharedTableBob,
    pub clock: PiecewiseClock,
    pub pairs: Vec<Coincidence>,
    pub report: PipelineReport,
}

/// Offset recovery, optional drift tracking, matching and reconciliation.
pub fn run_pipeline(
    alice: &[DetectionEvent],
    bob: &[DetectionEvent],
    table_start: i64,
    window: i64,
    tracking: Option<&TrackingParams>,
    seed: u64,
) -> Result<PipelineOutput, SyncError> {
    let offset = find_clock_offset(alice, bob, 2 * PS_PER_MS)?;
    let clock = match tracking {
        Some(params) => track_clock_offset(alice, bob, offset, params)?,
        None => PiecewiseClock::constant(offset),
    };
    let pairs = match_coincidences(alice, bob, &clock, window);
    let (ta, tb, rec) = reconcile(alice, bob, &pairs, table_start, seed);
    Ok(PipelineOutput {
        alice: ta,
        bob: tb,
        report: PipelineReport {
            estimated_offset: offset,
            anchors: clock.anchors().len(),
            reconcile: rec,
        },
        clock,
        pairs,
    })
}

impl SessionCapture {
    pub fn pipeline(&self, tracking: Option<&TrackingParams>) -> Result<PipelineOutput, SyncError> {
        run_pipeline(
            &self.alice,
            &self.bob,
            self.table_start,
            self.params.coincidence_window,
            tracking,
            self.params.seed,
        )
    }

    /// Bob-clock reading of Alice time `t`, from the injected parameters.
    pub fn true_bob_time(&self, alice_ts: i64) -> i64 {
        self.params.bob_clock(alice_ts as f64).round() as i64
    }
}

/// Checks an estimated clock map against the injected one at `t`.
pub fn clock_error<C: ClockMap + ?Sized>(capture: &SessionCapture, clock: &C, alice_ts: i64) -> i64 {
    clock.to_bob(alice_ts) - capture.true_bob_time(alice_ts)
}
