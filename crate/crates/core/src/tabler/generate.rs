//! Direct table generation without timestamps, for large batches where the
//! detection pipeline is not under test.

use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LineRecordAlice, LineRecordBob, LineStatus, SharedTable, SharedTableAlice, SharedTableBob};
use crate::qsim::{QsimError, QuantumChannel};

/// Slow sinusoidal modulation of the source visibility,
/// `v(i) = v0 + amplitude * sin(2π (offset + i) / period)` over line index `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftModel {
    pub amplitude: f64,
    pub period_lines: f64,
    pub line_offset: u64,
}

impl DriftModel {
    pub fn visibility(&self, base: f64, line: u64) -> f64 {
        let phase = TAU * (self.line_offset + line) as f64 / self.period_lines;
        (base + self.amplitude * phase.sin()).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct TableGenerator {
    channel: QuantumChannel,
    drift: Option<DriftModel>,
}

impl TableGenerator {
    pub fn new(channel: QuantumChannel) -> TableGenerator {
        TableGenerator {
            channel,
            drift: None,
        }
    }

    pub fn with_drift(mut self, drift: DriftModel) -> TableGenerator {
        self.drift = Some(drift);
        self
    }

    /// Samples pairs until `lines` of them reached Bob; both tables carry
    /// sequential ids from 0. The number of multi-photon lines is returned
    /// alongside.
    pub fn generate(
        &self,
        lines: usize,
        seed: u64,
    ) -> Result<(SharedTableAlice, SharedTableBob, usize), QsimError> {
        self.channel.noise.validate()?;
        if self.channel.noise.loss_prob >= 1.0 && lines > 0 {
            return Err(QsimError::InvalidParameter(
                "cannot fill a table through a channel with total loss".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alice = Vec::with_capacity(lines);
        let mut bob = Vec::with_capacity(lines);
        let mut multi = 0;
        let base = self.channel.noise.visibility;
        while alice.len() < lines {
            let line_id = alice.len() as u64;
            let v = self.drift.map_or(base, |d| d.visibility(base, line_id));
            let Some(sample) = self.channel.sample_line_with_visibility(v, &mut rng) else {
                continue;
            };
            multi += usize::from(sample.multi_photon);
            alice.push(LineRecordAlice {
                line_id,
                gate: sample.alice_gate,
                status: LineStatus::Available,
            });
            bob.push(LineRecordBob {
                line_id,
                input: sample.bob_input(),
                output: sample.bob_output,
                status: LineStatus::Available,
            });
        }
        let alice = SharedTable::new(seed, alice).expect("sequential ids");
        let bob = SharedTable::new(seed, bob).expect("sequential ids");
        Ok((alice, bob, multi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::NoiseModel;
    use crate::tabler::success_statistics;

    #[test]
    fn generated_tables_align() {
        let gen = TableGenerator::new(QuantumChannel::new(NoiseModel::success_fit()));
        let (a, b, _) = gen.generate(5000, 3).unwrap();
        assert_eq!(a.len(), 5000);
        assert!(a.records().iter().zip(b.records()).all(|(x, y)| x.line_id == y.line_id));
        let p = success_statistics(&a, &b).overall();
        assert!((p - 0.831).abs() < 0.025, "p = {p}");
        let (a2, _, _) = gen.generate(5000, 3).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn drift_stays_in_range() {
        let d = DriftModel {
            amplitude: 0.1,
            period_lines: 100.0,
            line_offset: 25,
        };
        assert!((d.visibility(0.95, 0) - 1.0).abs() < 1e-12);
        assert!((d.visibility(0.5, 50) - 0.4).abs() < 1e-9);
    }

    #[test]
    fn total_loss_is_rejected() {
        let gen = TableGenerator::new(QuantumChannel::new(NoiseModel::ideal().with_loss(1.0)));
        assert!(gen.generate(10, 0).is_err());
        assert!(gen.generate(0, 0).unwrap().0.is_empty());
    }
}
