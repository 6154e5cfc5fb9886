//! Acceptance probabilities for honest and two-message signers.
//!
//! A hash bit passes when at least `ceil(τN)` of its `N` gate outputs are
//! correct. Tails are summed exactly in log space.

use serde::Serialize;
use statrs::function::erf::erfc;

use super::SigError;
use crate::qsim::IDEAL_SUCCESS;

/// Smallest passing count for threshold `tau` over `n` gates.
pub fn threshold_count(tau: f64, n: u32) -> u32 {
    ((tau * f64::from(n) - 1e-9).ceil().max(0.0) as u32).min(n + 1)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `P(Bin(n, p) >= k)` for every `k` in `0..=n+1`.
pub fn binomial_tails(n: u32, p: f64) -> Vec<f64> {
    let n_us = n as usize;
    let mut tails = vec![0.0; n_us + 2];
    if p <= 0.0 {
        tails[0] = 1.0;
        return tails;
    }
    if p >= 1.0 {
        tails[..=n_us].fill(1.0);
        return tails;
    }
    // log pmf by the ratio recurrence pmf(k+1)/pmf(k) = (n-k)/(k+1) · p/(1-p).
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let mut log_pmf = vec![0.0; n_us + 1];
    log_pmf[0] = f64::from(n) * lq;
    for k in 0..n_us {
        log_pmf[k + 1] = log_pmf[k] + ((n_us - k) as f64).ln() - ((k + 1) as f64).ln() + lp - lq;
    }
    let mut acc = f64::NEG_INFINITY;
    for k in (0..=n_us).rev() {
        acc = log_add(acc, log_pmf[k]);
        tails[k] = acc.exp().min(1.0);
    }
    // Below the mean the upper tail is close to 1; one minus the small lower
    // tail keeps those values accurate.
    let mean = f64::from(n) * p;
    let mut below = f64::NEG_INFINITY;
    for k in 1..=n_us {
        below = log_add(below, log_pmf[k - 1]);
        if k as f64 > mean {
            break;
        }
        tails[k] = (1.0 - below.exp()).max(0.0);
    }
    tails
}

pub fn binomial_tail(n: u32, p: f64, k: u32) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    binomial_tails(n, p)[k as usize]
}

/// Per-bit pass probabilities for every count threshold, with the success
/// rate jittered by a Gaussian of width `sigma_extra` (trapezoid over ±8σ,
/// clamped to [0, 1]).
fn pass_probabilities(n: u32, p: f64, sigma_extra: f64) -> Vec<f64> {
    if sigma_extra <= 0.0 {
        return binomial_tails(n, p);
    }
    let steps = 400;
    let h = 16.0 / steps as f64;
    let mut total = vec![0.0; n as usize + 2];
    let mut weight = 0.0;
    for i in 0..=steps {
        let z = -8.0 + h * i as f64;
        let w = (-0.5 * z * z).exp() * if i == 0 || i == steps { 0.5 } else { 1.0 };
        for (t, v) in total.iter_mut().zip(binomial_tails(n, (p + sigma_extra * z).clamp(0.0, 1.0))) {
            *t += w * v;
        }
        weight += w;
    }
    total.iter().map(|t| t / weight).collect()
}

fn pass_probability(n: u32, k: u32, p: f64, sigma_extra: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    pass_probabilities(n, p, sigma_extra)[k as usize]
}

fn check_unit(name: &str, v: f64) -> Result<(), SigError> {
    if !(0.0..=1.0).contains(&v) || v.is_nan() {
        return Err(SigError::Params(format!("{name} = {v} is outside [0, 1]")));
    }
    Ok(())
}

/// Probability that every one of `m` bits passes for an honest signer.
pub fn honest_accept_probability(n: u32, m: u32, tau: f64, p: f64, sigma_extra: f64) -> Result<f64, SigError> {
    check_unit("tau", tau)?;
    check_unit("p", p)?;
    let k = threshold_count(tau, n);
    Ok(pass_probability(n, k, p, sigma_extra).powi(m as i32))
}

/// The same quantity from a normal fit to the per-bit success fractions.
pub fn honest_accept_normal_fit(m: u32, tau: f64, mean: f64, sigma: f64) -> f64 {
    let z = (mean - tau) / sigma;
    (1.0 - 0.5 * erfc(z / std::f64::consts::SQRT_2)).powi(m as i32)
}

/// A Bob who signs two messages whose hashes differ in one bit.
///
/// On the differing bit each gate must be right for input 0 (rate `q0`) and
/// for input 1 (rate `q1`), with `q0 + q1 <= 3/2`. All other bits pass at
/// `p_other`. A fraction `multi_photon_fraction` of gates behaves honestly
/// for both evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheatModel {
    pub q0: f64,
    pub q1: f64,
    pub p_other: f64,
    pub multi_photon_fraction: f64,
}

impl Default for CheatModel {
    fn default() -> Self {
        CheatModel {
            q0: 0.75,
            q1: 0.75,
            p_other: IDEAL_SUCCESS,
            multi_photon_fraction: 0.0,
        }
    }
}

impl CheatModel {
    pub fn validate(&self) -> Result<(), SigError> {
        check_unit("q0", self.q0)?;
        check_unit("q1", self.q1)?;
        check_unit("p_other", self.p_other)?;
        check_unit("multi_photon_fraction", self.multi_photon_fraction)?;
        if self.q0 + self.q1 > 1.5 + 1e-12 {
            return Err(SigError::Params(format!(
                "q0 + q1 = {} exceeds 3/2",
                self.q0 + self.q1
            )));
        }
        Ok(())
    }

    /// Per-gate rates after the multi-photon correction.
    pub fn effective(&self) -> (f64, f64) {
        let f = self.multi_photon_fraction;
        (
            (1.0 - f) * self.q0 + f * self.p_other,
            (1.0 - f) * self.q1 + f * self.p_other,
        )
    }
}

pub fn cheat_accept_probability(n: u32, m: u32, tau: f64, model: &CheatModel) -> Result<f64, SigError> {
    check_unit("tau", tau)?;
    model.validate()?;
    let k = threshold_count(tau, n);
    let (q0, q1) = model.effective();
    let common = binomial_tail(n, model.p_other, k).powi(m.saturating_sub(1) as i32);
    Ok(binomial_tail(n, q0, k) * binomial_tail(n, q1, k) * common)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdPoint {
    pub tau: f64,
    pub honest: f64,
    pub cheat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdAnalysis {
    pub tau_star: f64,
    pub honest: f64,
    pub cheat: f64,
    pub difference: f64,
    pub curve: Vec<ThresholdPoint>,
}

/// Scans `τ = k/N` and keeps the largest honest-minus-cheat gap; ties go to
/// the smaller `τ`.
pub fn optimize_threshold(
    n: u32,
    m: u32,
    p_honest: f64,
    model: &CheatModel,
    sigma_extra: f64,
) -> Result<ThresholdAnalysis, SigError> {
    check_unit("p", p_honest)?;
    model.validate()?;
    let (q0, q1) = model.effective();
    let t0 = binomial_tails(n, q0);
    let t1 = binomial_tails(n, q1);
    let tp = binomial_tails(n, model.p_other);
    let honest_tails = pass_probabilities(n, p_honest, sigma_extra);
    let mut curve = Vec::with_capacity(n as usize + 1);
    let mut best: Option<ThresholdPoint> = None;
    for k in 0..=n as usize {
        let honest = honest_tails[k].powi(m as i32);
        let cheat = t0[k] * t1[k] * tp[k].powi(m.saturating_sub(1) as i32);
        let point = ThresholdPoint {
            tau: k as f64 / f64::from(n),
            honest,
            cheat,
        };
        if best
            .as_ref()
            .is_none_or(|b| point.honest - point.cheat > b.honest - b.cheat)
        {
            best = Some(point.clone());
        }
        curve.push(point);
    }
    let b = best.expect("at least one threshold");
    Ok(ThresholdAnalysis {
        tau_star: b.tau,
        honest: b.honest,
        cheat: b.cheat,
        difference: b.honest - b.cheat,
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub cumulative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramReport {
    pub samples: usize,
    pub mean: f64,
    pub sigma: f64,
    /// `sqrt(p(1-p)/N)` at the sample mean.
    pub binomial_sigma: f64,
    pub min: f64,
    pub max: f64,
    pub bins: Vec<HistogramBin>,
}

/// Pools per-bit success fractions from several signature runs.
pub fn histogram_report(runs: &[Vec<f64>], n: u32, bins: usize) -> Result<HistogramReport, SigError> {
    let all: Vec<f64> = runs.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(SigError::Params("histogram needs at least one run".into()));
    }
    let count = all.len() as f64;
    let mean = all.iter().sum::<f64>() / count;
    let var = if all.len() > 1 {
        all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = bins.max(1);
    let width = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in &all {
        counts[((x / width) as usize).min(bins - 1)] += 1;
    }
    let mut cumulative = 0;
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            cumulative += c;
            HistogramBin {
                lo: i as f64 * width,
                hi: (i + 1) as f64 * width,
                count: c,
                cumulative,
            }
        })
        .collect();
    Ok(HistogramReport {
        samples: all.len(),
        mean,
        sigma: var.sqrt(),
        binomial_sigma: (mean * (1.0 - mean) / f64::from(n)).sqrt(),
        min,
        max,
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_tail(n: u32, p: f64, k: u32) -> f64 {
        // Direct product-form pmf, fine for small n.
        let mut total = 0.0;
        for j in k..=n {
            let mut c = 1.0;
            for i in 0..j {
                c *= f64::from(n - i) / f64::from(i + 1);
            }
            total += c * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
        }
        total
    }

    #[test]
    fn tails_match_direct_sum() {
        for &(n, p) in &[(10u32, 0.3), (25, 0.85), (40, 0.5)] {
            let t = binomial_tails(n, p);
            for k in 0..=n {
                assert!((t[k as usize] - naive_tail(n, p, k)).abs() < 1e-12, "n={n} p={p} k={k}");
            }
            assert_eq!(t[n as usize + 1], 0.0);
        }
        assert_eq!(binomial_tail(5, 0.0, 1), 0.0);
        assert_eq!(binomial_tail(5, 1.0, 5), 1.0);
    }

    #[test]
    fn threshold_counts() {
        assert_eq!(threshold_count(0.776, 1000), 776);
        assert_eq!(threshold_count(0.0, 1000), 0);
        assert_eq!(threshold_count(1.0, 1000), 1000);
        assert_eq!(threshold_count(0.7765, 1000), 777);
    }

    #[test]
    fn trivial_thresholds() {
        assert_eq!(honest_accept_probability(1000, 224, 0.0, 0.3, 0.0).unwrap(), 1.0);
        let c = cheat_accept_probability(1000, 224, 1.0, &CheatModel::default()).unwrap();
        assert!(c < 1e-100);
        assert!(CheatModel { q0: 0.8, q1: 0.8, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn ideal_signer_margin() {
        let p = honest_accept_probability(1000, 224, 0.776, IDEAL_SUCCESS, 0.0).unwrap();
        assert!(p >= 0.9999);
    }

    #[test]
    fn normal_fit_reference() {
        // Φ(0.055/0.013)^224 evaluated independently.
        let z = 0.055f64 / 0.013;
        let tail = 0.5 * erfc(z / 2f64.sqrt());
        assert!((honest_accept_normal_fit(224, 0.776, 0.831, 0.013) - (1.0 - tail).powi(224)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_optimum() {
        let model = CheatModel {
            q0: 0.5,
            q1: 0.5,
            p_other: 1.0,
            multi_photon_fraction: 0.0,
        };
        let a = optimize_threshold(100, 8, 1.0, &model, 0.0).unwrap();
        assert!(a.tau_star > 0.7);
        assert!(a.difference > 0.999_999);
    }

    #[test]
    fn histogram_of_perfect_run() {
        let h = histogram_report(&[vec![1.0; 224]], 1000, 50).unwrap();
        assert_eq!(h.mean, 1.0);
        assert_eq!(h.sigma, 0.0);
        assert_eq!(h.bins.last().unwrap().count, 224);
        assert!(histogram_report(&[], 1000, 10).is_err());
    }
}
