//! `G_k` gates built from `2^k - 1` single-gate evaluations.
//!
//! Table mode: Alice picks one branch of a product-state decomposition of
//! `ρ_G` and runs one ordinary handshake per qubit slot with that branch's
//! gate. Bob measures slot `j` in the basis named by letter `j` of the
//! measurement string for his input; the parity of the non-identity slots
//! is the gate output.

use rand::Rng;

use super::{AliceBatch, AliceSession, BobSession, EngineError};
use crate::qsim::{
    build_gate_density, build_measurement_set, decompose_product_states, input_index, GateG1,
    Pauli, ProductDecomposition, MAX_MEASUREMENT_K,
};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GkGateSpec {
    pub k: usize,
    /// Output for each input index, first input bit most significant.
    pub truth_table: Vec<bool>,
}

impl GkGateSpec {
    pub fn new(k: usize, truth_table: Vec<bool>) -> Result<GkGateSpec, EngineError> {
        if !(1..=MAX_MEASUREMENT_K).contains(&k) {
            return Err(EngineError::Circuit(format!("k = {k} is not supported")));
        }
        if truth_table.len() != 1 << k {
            return Err(EngineError::Circuit(format!(
                "a {k}-input gate needs {} truth-table entries, got {}",
                1 << k,
                truth_table.len()
            )));
        }
        Ok(GkGateSpec { k, truth_table })
    }

    pub fn from_gate(gate: GateG1) -> GkGateSpec {
        let (a, b) = gate.truth_table();
        GkGateSpec {
            k: 1,
            truth_table: vec![a, b],
        }
    }

    /// Parses a bit string such as `"0110"`.
    pub fn from_bits(bits: &str) -> Result<GkGateSpec, EngineError> {
        let table = bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(EngineError::Circuit(format!("bad truth-table character {c:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let k = table.len().trailing_zeros() as usize;
        GkGateSpec::new(k, table)
    }

    pub fn slots(&self) -> usize {
        (1 << self.k) - 1
    }

    pub fn eval(&self, x: &[bool]) -> bool {
        self.truth_table[input_index(x)]
    }
}

/// A gate ready for table-mode execution.
#[derive(Debug, Clone, PartialEq)]
pub struct GkPlan {
    pub spec: GkGateSpec,
    pub decomposition: ProductDecomposition,
}

impl GkPlan {
    pub fn new(spec: GkGateSpec) -> Result<GkPlan, EngineError> {
        let density = build_gate_density(spec.k, &spec.truth_table)?;
        let decomposition = decompose_product_states(&density)
            .map_err(|_| EngineError::DecompositionUnavailable)?
            .ok_or(EngineError::DecompositionUnavailable)?;
        Ok(GkPlan { spec, decomposition })
    }
}

/// Alice's per-slot gates for one evaluation: one uniformly chosen branch.
pub fn gk_slot_gates<R: Rng + ?Sized>(plan: &GkPlan, rng: &mut R) -> Vec<GateG1> {
    let terms = &plan.decomposition.terms;
    terms[rng.random_range(0..terms.len())].gates.clone()
}

/// Bob's per-slot inputs for `x`, and which slots enter the parity.
pub fn gk_slot_inputs(k: usize, x: &[bool]) -> Result<(Vec<bool>, Vec<bool>), EngineError> {
    if x.len() != k {
        return Err(EngineError::Circuit(format!("{k}-input gate given {} bits", x.len())));
    }
    let m = build_measurement_set(k)?;
    let letters = m[input_index(x)].letters();
    Ok(letters
        .iter()
        .map(|p| match p {
            Pauli::Z => (false, true),
            Pauli::X => (true, true),
            Pauli::I => (false, false),
        })
        .unzip())
}

pub fn gk_combine(outputs: &[bool], included: &[bool]) -> bool {
    outputs
        .iter()
        .zip(included)
        .filter(|(_, &inc)| inc)
        .fold(false, |acc, (&o, _)| acc ^ o)
}

/// Simulation mode: samples the measurement for `x` on `ρ_G` directly.
pub fn simulate_gk<R: Rng + ?Sized>(spec: &GkGateSpec, x: &[bool], rng: &mut R) -> Result<bool, EngineError> {
    if x.len() != spec.k {
        return Err(EngineError::Circuit(format!("{}-input gate given {} bits", spec.k, x.len())));
    }
    let density = build_gate_density(spec.k, &spec.truth_table)?;
    Ok(density.sample_output(input_index(x), rng)?)
}

impl AliceSession<'_> {
    /// One table-mode `G_k` evaluation; all slots run as one batch.
    pub fn execute_gk(&mut self, plan: &GkPlan) -> Result<AliceBatch, EngineError> {
        let gates = gk_slot_gates(plan, self.rng());
        self.execute_batch(&gates)
    }
}

impl BobSession<'_> {
    pub fn execute_gk(&mut self, k: usize, x: &[bool]) -> Result<bool, EngineError> {
        let (inputs, included) = gk_slot_inputs(k, x)?;
        let outputs = self.execute_batch(&inputs)?.require_outputs()?;
        Ok(gk_combine(&outputs, &included))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn k1_slot_inputs_are_the_plain_input() {
        assert_eq!(gk_slot_inputs(1, &[false]).unwrap(), (vec![false], vec![true]));
        assert_eq!(gk_slot_inputs(1, &[true]).unwrap(), (vec![true], vec![true]));
        assert_eq!(GkGateSpec::from_gate(GateG1::Not).truth_table, vec![true, false]);
    }

    #[test]
    fn k2_slots() {
        let spec = GkGateSpec::from_bits("0110").unwrap();
        assert_eq!(spec.slots(), 3);
        for x in 0..4usize {
            let bits = [x & 2 != 0, x & 1 != 0];
            let (_, inc) = gk_slot_inputs(2, &bits).unwrap();
            assert_eq!(inc.iter().filter(|&&b| b).count(), 2);
        }
        assert!(GkGateSpec::from_bits("011").is_err());
    }

    #[test]
    fn decomposed_slots_reproduce_the_gate_statistics() {
        // Ideal per-slot success P_S, independent slots: the parity of two
        // slots is right with P_S^2 + (1-P_S)^2 = 3/4.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bits in ["0001", "0110", "1011"] {
            let plan = GkPlan::new(GkGateSpec::from_bits(bits).unwrap()).unwrap();
            let p = crate::qsim::IDEAL_SUCCESS;
            let n = 40_000;
            let mut ok = 0;
            for t in 0..n {
                let x = [t & 1 != 0, t & 2 != 0];
                let gates = gk_slot_gates(&plan, &mut rng);
                let (ins, inc) = gk_slot_inputs(2, &x).unwrap();
                let outs: Vec<bool> = gates
                    .iter()
                    .zip(&ins)
                    .map(|(g, &i)| g.eval(i) ^ (rng.random::<f64>() >= p))
                    .collect();
                ok += usize::from(gk_combine(&outs, &inc) == plan.spec.eval(&x));
            }
            let rate = ok as f64 / n as f64;
            assert!((rate - 0.75).abs() < 0.01, "{bits}: {rate}");
        }
    }
}
