//! Eavesdropper detection from table lines, attack channels, and audits of
//! what each party can learn from the execution transcript.

mod privacy;

pub use privacy::{
    ks_two_sample, privacy_audit, AuditTranscript, DeclinedLine, KsResult, PrivacyReport,
    RequestAttempts, MIN_AUDIT_DECLINES,
};

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::qsim::{AliceBasis, Bloch, BobBasis, GateG1, LineSample, NoiseModel, QuantumChannel};
use crate::tabler::{LineRecord, LineStatus, SharedTable, SharedTableAlice, SharedTableBob, TableError};

/// Default abort rule: a CHSH estimate below this value aborts the session.
pub const DEFAULT_ABORT_THRESHOLD: f64 = 2.5;
/// A setting cell needs at least this many lines for a variance estimate.
pub const MIN_CELL_LINES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecurityError {
    #[error("setting cell ({alice:?}, {bob:?}) has {lines} lines, need at least {needed}")]
    InsufficientLines {
        alice: AliceBasis,
        bob: BobBasis,
        lines: usize,
        needed: usize,
    },
    #[error("requested {requested} test lines but only {available} are available")]
    NotEnoughAvailable { requested: usize, available: usize },
    #[error("audit needs at least {needed} declined lines, got {got}")]
    SampleTooSmall { needed: usize, got: usize },
    #[error("tables disagree on line {0}")]
    Misaligned(u64),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// A measure-and-resend adversary on the link to Bob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttackChannel {
    #[default]
    None,
    /// Eve measures in Z or X uniformly at random and resends the eigenstate.
    InterceptResendZX,
    /// Eve always measures in one basis.
    InterceptResendFixed(BobBasis),
}

impl AttackChannel {
    /// Maps Bob's (possibly mixed) Bloch vector through Eve's measurement and
    /// re-preparation. The result is always a pure eigenstate of Eve's basis.
    pub fn apply<R: Rng + ?Sized>(&self, state: Bloch, rng: &mut R) -> Bloch {
        let basis = match self {
            AttackChannel::None => return state,
            AttackChannel::InterceptResendZX => {
                if rng.random::<bool>() {
                    BobBasis::X
                } else {
                    BobBasis::Z
                }
            }
            AttackChannel::InterceptResendFixed(b) => *b,
        };
        let e = basis.direction();
        let p_plus = 0.5 * (1.0 + state.dot(e));
        if rng.random::<f64>() < p_plus {
            e
        } else {
            e.neg()
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackChannel::None => "none",
            AttackChannel::InterceptResendZX => "intercept-zx",
            AttackChannel::InterceptResendFixed(BobBasis::Z) => "intercept-z",
            AttackChannel::InterceptResendFixed(BobBasis::X) => "intercept-x",
        }
    }
}

impl fmt::Display for AttackChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(AttackChannel::None),
            "intercept-zx" => Ok(AttackChannel::InterceptResendZX),
            "intercept-z" => Ok(AttackChannel::InterceptResendFixed(BobBasis::Z)),
            "intercept-x" => Ok(AttackChannel::InterceptResendFixed(BobBasis::X)),
            other => Err(format!("unknown attack '{other}'")),
        }
    }
}

/// The sampling channel with a random-basis intercept-resend attacker.
pub fn intercept_resend_attack(noise: NoiseModel) -> QuantumChannel {
    QuantumChannel::new(noise).with_attack(AttackChannel::InterceptResendZX)
}

/// Setting cells in CHSH order: `(A1,Z), (A1,X), (A2,Z), (A2,X)`.
pub const CHSH_SETTINGS: [(AliceBasis, BobBasis); 4] = [
    (AliceBasis::A1, BobBasis::Z),
    (AliceBasis::A1, BobBasis::X),
    (AliceBasis::A2, BobBasis::Z),
    (AliceBasis::A2, BobBasis::X),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChshEstimate {
    /// `|E(A1,Z) + E(A1,X) + E(A2,Z) − E(A2,X)|`.
    pub s: f64,
    pub std_error: f64,
    pub correlators: [f64; 4],
    pub lines_used: [usize; 4],
}

impl ChshEstimate {
    /// Standard deviations by which `s` exceeds the local bound 2.
    pub fn violation_sigmas(&self) -> f64 {
        (self.s - 2.0) / self.std_error
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.s >= threshold
    }
}

/// Accumulates `(Alice sign, Bob sign)` products per setting cell.
#[derive(Debug, Clone, Default)]
pub struct ChshAccumulator {
    sums: [i64; 4],
    counts: [usize; 4],
}

impl ChshAccumulator {
    /// Alice's sign is `+1` when she projected onto `Ψ0` or `Ψ_Id`; Bob's is
    /// `+1` for output 0.
    pub fn add(&mut self, alice_gate: GateG1, bob_input: bool, bob_output: bool) {
        // Const1 / Not on record mean Alice saw the +1 element of her basis.
        let (basis, sign_a) = alice_gate.alice_projection();
        let sign_a = i64::from(sign_a);
        let sign_b = if bob_output { -1 } else { 1 };
        let cell = 2 * usize::from(basis == AliceBasis::A2) + usize::from(bob_input);
        self.sums[cell] += sign_a * sign_b;
        self.counts[cell] += 1;
    }

    pub fn add_sample(&mut self, s: &LineSample) {
        self.add(s.alice_gate, s.bob_input(), s.bob_output);
    }

    pub fn finish(&self) -> Result<ChshEstimate, SecurityError> {
        let mut correlators = [0.0; 4];
        let mut var = 0.0;
        for (i, &(a, b)) in CHSH_SETTINGS.iter().enumerate() {
            let n = self.counts[i];
            if n < MIN_CELL_LINES {
                return Err(SecurityError::InsufficientLines {
                    alice: a,
                    bob: b,
                    lines: n,
                    needed: MIN_CELL_LINES,
                });
            }
            let e = self.sums[i] as f64 / n as f64;
            correlators[i] = e;
            var += (1.0 - e * e) / n as f64;
        }
        let signed = correlators[0] + correlators[1] + correlators[2] - correlators[3];
        Ok(ChshEstimate {
            s: signed.abs(),
            std_error: var.sqrt(),
            correlators,
            lines_used: self.counts,
        })
    }
}

/// CHSH estimate over the given line ids, which must be present in both
/// tables and already withdrawn from program use.
pub fn chsh_from_table(
    alice: &SharedTableAlice,
    bob: &SharedTableBob,
    line_ids: &[u64],
) -> Result<ChshEstimate, SecurityError> {
    let mut acc = ChshAccumulator::default();
    for &id in line_ids {
        let a = alice.get(id).ok_or(TableError::UnknownLine(id))?;
        let b = bob.get(id).ok_or(TableError::UnknownLine(id))?;
        acc.add(a.gate, b.input, b.output);
    }
    acc.finish()
}

pub fn chsh_from_samples<'a>(samples: impl IntoIterator<Item = &'a LineSample>) -> Result<ChshEstimate, SecurityError> {
    let mut acc = ChshAccumulator::default();
    for s in samples {
        acc.add_sample(s);
    }
    acc.finish()
}

/// Samples `lines` received pairs through `channel` and estimates S.
pub fn simulate_chsh<R: Rng + ?Sized>(
    channel: &QuantumChannel,
    lines: usize,
    rng: &mut R,
) -> Result<ChshEstimate, SecurityError> {
    let mut acc = ChshAccumulator::default();
    let mut got = 0;
    while got < lines {
        if let Some(s) = channel.sample_line(rng) {
            acc.add_sample(&s);
            got += 1;
        }
    }
    acc.finish()
}

/// Exact S for a channel from its correlators.
pub fn exact_chsh(channel: &QuantumChannel) -> f64 {
    let e: Vec<f64> = CHSH_SETTINGS
        .iter()
        .map(|(a, b)| {
            // Alice's +1 element for this basis is the direction of Ψ0 / Ψ_Id.
            channel.correlator(a.direction(), b.direction())
        })
        .collect();
    (e[0] + e[1] + e[2] - e[3]).abs()
}

/// Seeded public draw of test lines among the currently available ones.
/// Both parties run the same draw from the announced seed.
pub fn draw_test_lines<R: LineRecord>(
    table: &SharedTable<R>,
    count: usize,
    seed: u64,
) -> Result<Vec<u64>, SecurityError> {
    let available = table.available_ids();
    if count > available.len() {
        return Err(SecurityError::NotEnoughAvailable {
            requested: count,
            available: available.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u64> = index::sample(&mut rng, available.len(), count)
        .into_iter()
        .map(|i| available[i])
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Withdraws lines from program use by moving them to `Consumed`.
pub fn mark_test_lines<R: LineRecord>(table: &mut SharedTable<R>, ids: &[u64]) -> Result<(), SecurityError> {
    for &id in ids {
        table.set_status(id, LineStatus::Proposed)?;
        table.set_status(id, LineStatus::Consumed)?;
    }
    Ok(())
}

/// Draws, marks on both sides and returns the chosen test lines.
pub fn select_test_lines(
    alice: &mut SharedTableAlice,
    bob: &mut SharedTableBob,
    count: usize,
    seed: u64,
) -> Result<Vec<u64>, SecurityError> {
    let ids = draw_test_lines(alice, count, seed)?;
    mark_test_lines(alice, &ids)?;
    mark_test_lines(bob, &ids)?;
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingReport {
    pub alice: String,
    pub bob: String,
    pub lines: usize,
    pub correlator: f64,
}

/// The report handed to the CLI for a Bell test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BellReport {
    pub schema: u32,
    pub s: f64,
    pub std_error: f64,
    pub violation_sigmas: f64,
    pub threshold: f64,
    pub verdict: &'static str,
    pub settings: Vec<SettingReport>,
}

impl BellReport {
    pub fn new(est: &ChshEstimate, threshold: f64) -> BellReport {
        BellReport {
            schema: 1,
            s: est.s,
            std_error: est.std_error,
            violation_sigmas: est.violation_sigmas(),
            threshold,
            verdict: if est.passes(threshold) { "pass" } else { "abort" },
            settings: CHSH_SETTINGS
                .iter()
                .enumerate()
                .map(|(i, (a, b))| SettingReport {
                    alice: format!("{a:?}"),
                    bob: format!("{b:?}"),
                    lines: est.lines_used[i],
                    correlator: est.correlators[i],
                })
                .collect(),
        }
    }
}

/// Repeated finite-size Bell tests through one channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionStats {
    pub trials: usize,
    pub lines_per_trial: usize,
    pub threshold: f64,
    /// Trials with `S < threshold`.
    pub detected: usize,
    /// Trials with `S >= 2`.
    pub trials_s_at_least_2: usize,
    pub s_mean: f64,
    pub s_sd: f64,
    pub s_max: f64,
    /// Normal-tail estimate of `P(S >= 2)` from the sample mean and spread.
    pub normal_tail_s_at_least_2: f64,
}

impl DetectionStats {
    pub fn detection_rate(&self) -> f64 {
        self.detected as f64 / self.trials.max(1) as f64
    }
}

pub fn detection_trials(
    channel: &QuantumChannel,
    lines: usize,
    trials: usize,
    threshold: f64,
    seed: u64,
) -> Result<DetectionStats, SecurityError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(trials);
    for _ in 0..trials {
        values.push(simulate_chsh(channel, lines, &mut rng)?.s);
    }
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let z = (2.0 - mean) / sd.max(1e-300);
    Ok(DetectionStats {
        trials,
        lines_per_trial: lines,
        threshold,
        detected: values.iter().filter(|&&s| s < threshold).count(),
        trials_s_at_least_2: values.iter().filter(|&&s| s >= 2.0).count(),
        s_mean: mean,
        s_sd: sd,
        s_max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        normal_tail_s_at_least_2: 0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2),
    })
}
