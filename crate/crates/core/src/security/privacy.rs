//! Statistical checks that declined lines tell Bob nothing about the gate
//! and that the proposal pattern tells Alice nothing about Bob's input.

use serde::Serialize;

use super::SecurityError;
use crate::qsim::GateG1;

pub const MIN_AUDIT_DECLINES: usize = 10_000;

/// Bob's view of one declined line, plus the ground truth needed to score it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeclinedLine {
    pub target: GateG1,
    /// The line's recorded input, which differed from Bob's desired input.
    pub line_input: bool,
    pub recorded_output: bool,
    /// The attempt's pad if it was (wrongly) disclosed to Bob.
    pub leaked_pad: Option<bool>,
}

impl DeclinedLine {
    /// Bob's best guess at the gate output on this line.
    fn guess(&self) -> bool {
        self.recorded_output ^ self.leaked_pad.unwrap_or(false)
    }
}

/// Declines seen before one request completed, grouped by Bob's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequestAttempts {
    pub desired_input: bool,
    pub declines: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditTranscript {
    pub declined: Vec<DeclinedLine>,
    pub attempts: Vec<RequestAttempts>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub critical_1pct: f64,
    pub p_value: f64,
    pub n0: usize,
    pub n1: usize,
}

impl KsResult {
    pub fn passes(&self) -> bool {
        self.statistic < self.critical_1pct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyReport {
    pub schema: u32,
    pub declined_lines: usize,
    /// Fraction of declined lines where Bob's guess matched the target gate.
    pub declined_correlation: f64,
    /// 95% half-width of `declined_correlation`.
    pub declined_ci95: f64,
    pub leakage_flagged: bool,
    /// Half the total-variation distance between the decline-count
    /// distributions for input 0 and input 1: Alice's best guessing edge.
    pub input_inference_advantage: f64,
    pub mean_declines: [f64; 2],
    pub ks: KsResult,
    pub input_independent: bool,
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len(), y.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let v = x[i].min(y[j]);
        while i < n && x[i] <= v {
            i += 1;
        }
        while j < m && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = if n == 0 || m == 0 {
        0.0
    } else {
        (n * m) as f64 / (n + m) as f64
    };
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt().max(1e-12)) * d;
    KsResult {
        statistic: d,
        critical_1pct: 1.628 / ne.sqrt().max(1e-12),
        p_value: kolmogorov_q(lambda),
        n0: n,
        n1: m,
    }
}

// Q_KS(λ) = 2 Σ_{k≥1} (−1)^(k−1) exp(−2 k² λ²).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn privacy_audit(t: &AuditTranscript) -> Result<PrivacyReport, SecurityError> {
    let n = t.declined.len();
    if n < MIN_AUDIT_DECLINES {
        return Err(SecurityError::SampleTooSmall {
            needed: MIN_AUDIT_DECLINES,
            got: n,
        });
    }
    let hits = t
        .declined
        .iter()
        .filter(|d| d.guess() == d.target.eval(d.line_input))
        .count();
    let corr = hits as f64 / n as f64;
    let ci = 1.96 * (corr * (1.0 - corr) / n as f64).sqrt();
    // Honest runs sit at 1/2; anything outside a wide band is leakage.
    let flagged = (corr - 0.5).abs() > (4.0 * 0.5 / (n as f64).sqrt()).max(0.01);

    let by_input = |x: bool| -> Vec<f64> {
        t.attempts
            .iter()
            .filter(|a| a.desired_input == x)
            .map(|a| a.declines as f64)
            .collect()
    };
    let (d0, d1) = (by_input(false), by_input(true));
    let ks = ks_two_sample(&d0, &d1);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;

    let max_d = t.attempts.iter().map(|a| a.declines).max().unwrap_or(0) as usize;
    let mut h = vec![[0usize; 2]; max_d + 1];
    for a in &t.attempts {
        h[a.declines as usize][usize::from(a.desired_input)] += 1;
    }
    let (c0, c1) = (d0.len().max(1) as f64, d1.len().max(1) as f64);
    let tv: f64 = h.iter().map(|c| (c[0] as f64 / c0 - c[1] as f64 / c1).abs()).sum::<f64>() / 2.0;

    Ok(PrivacyReport {
        schema: 1,
        declined_lines: n,
        declined_correlation: corr,
        declined_ci95: ci,
        leakage_flagged: flagged,
        input_inference_advantage: tv / 2.0,
        mean_declines: [mean(&d0), mean(&d1)],
        input_independent: ks.passes(),
        ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_identical_and_shifted() {
        let a: Vec<f64> = (0..1000).map(|i| (i % 7) as f64).collect();
        let r = ks_two_sample(&a, &a);
        assert_eq!(r.statistic, 0.0);
        assert!(r.passes());
        let b: Vec<f64> = a.iter().map(|x| x + 3.0).collect();
        let r = ks_two_sample(&a, &b);
        assert!(!r.passes());
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        // Standard table: Q(1.36) ≈ 0.05, Q(1.63) ≈ 0.01.
        assert!((kolmogorov_q(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.01).abs() < 5e-4);
    }

    #[test]
    fn small_samples_rejected() {
        assert!(matches!(
            privacy_audit(&AuditTranscript::default()),
            Err(SecurityError::SampleTooSmall { got: 0, .. })
        ));
    }
}
