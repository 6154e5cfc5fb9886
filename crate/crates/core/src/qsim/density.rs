use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;

use super::pauli::{build_measurement_set, Pauli, PauliString};
use super::{gate_state, GateG1, PureQubit, QsimError};

/// Largest arity whose `2^(2^k - 1)`-dimensional density is materialised.
pub const MAX_DENSITY_K: usize = 3;

const HERMITIAN_TOL: f64 = 1e-10;
const TRACE_TOL: f64 = 1e-10;
const PSD_FLOOR: f64 = -1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: DMatrix<Complex64>,
}

impl DensityMatrix {
    pub fn from_matrix(matrix: DMatrix<Complex64>) -> Result<DensityMatrix, QsimError> {
        if !matrix.is_square() || !matrix.nrows().is_power_of_two() {
            return Err(QsimError::InvalidParameter(format!(
                "density matrix must be square with power-of-two size, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(DensityMatrix { matrix })
    }

    pub fn from_pure(state: &PureQubit) -> DensityMatrix {
        let v = DMatrix::from_column_slice(2, 1, &[state.amp0, state.amp1]);
        DensityMatrix {
            matrix: &v * v.adjoint(),
        }
    }

    /// `|ψ1> ⊗ |ψ2> ⊗ ...`, first factor most significant.
    pub fn product_of_pure(states: &[PureQubit]) -> DensityMatrix {
        let matrix = states.iter().fold(
            DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)),
            |acc, s| acc.kronecker(&DensityMatrix::from_pure(s).matrix),
        );
        DensityMatrix { matrix }
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_qubits(&self) -> usize {
        self.dim().trailing_zeros() as usize
    }

    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        (&self.matrix - self.matrix.adjoint())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let sym = (&self.matrix + self.matrix.adjoint()).scale(0.5);
        let mut values: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        values
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Hermitian, unit trace and positive semidefinite within the default
    /// tolerances.
    pub fn validate(&self) -> Result<(), QsimError> {
        let herm = self.hermiticity_error();
        if herm > HERMITIAN_TOL {
            return Err(QsimError::InvalidParameter(format!(
                "not hermitian (max deviation {herm:e})"
            )));
        }
        let tr = self.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(QsimError::InvalidParameter(format!("trace {tr} != 1")));
        }
        let min = self.min_eigenvalue();
        if min < PSD_FLOOR {
            return Err(QsimError::InvalidParameter(format!(
                "negative eigenvalue {min:e}"
            )));
        }
        Ok(())
    }

    /// `Tr(ρ P)`.
    pub fn expectation(&self, pauli: &PauliString) -> f64 {
        assert_eq!(pauli.len(), self.num_qubits(), "pauli string size mismatch");
        (&self.matrix * pauli.matrix()).trace().re
    }

    /// `½ ‖ρ − σ‖₁`.
    pub fn trace_distance(&self, other: &DensityMatrix) -> f64 {
        assert_eq!(self.dim(), other.dim(), "dimension mismatch");
        let diff = &self.matrix - &other.matrix;
        let diff = (&diff + diff.adjoint()).scale(0.5);
        0.5 * SymmetricEigen::new(diff)
            .eigenvalues
            .iter()
            .map(|e| e.abs())
            .sum::<f64>()
    }
}

/// A gate-OTP density `ρ_G` together with the data it was built from.
#[derive(Debug, Clone)]
pub struct GateDensity {
    pub k: usize,
    pub truth_table: Vec<bool>,
    pub measurements: Vec<PauliString>,
    pub rho: DensityMatrix,
}

/// `ρ_G = (I + 2^(-k/2) Σ_i (-1)^G(i) M_i) / 2^n` with `n = 2^k - 1`.
pub fn build_gate_density(k: usize, truth_table: &[bool]) -> Result<GateDensity, QsimError> {
    let measurements = build_measurement_set(k)?;
    if k > MAX_DENSITY_K {
        return Err(QsimError::DimensionTooLarge(k));
    }
    if truth_table.len() != measurements.len() {
        return Err(QsimError::TruthTableLength {
            expected: measurements.len(),
            got: truth_table.len(),
        });
    }
    let n = measurements[0].len();
    let dim = 1usize << n;
    let mut matrix = DMatrix::<Complex64>::identity(dim, dim);
    let amplitude = (2f64).powf(-(k as f64) / 2.0);
    for (m, &g) in measurements.iter().zip(truth_table) {
        let sign = if g { -1.0 } else { 1.0 };
        matrix += m.matrix().scale(sign * amplitude);
    }
    matrix.scale_mut(1.0 / dim as f64);
    Ok(GateDensity {
        k,
        truth_table: truth_table.to_vec(),
        measurements,
        rho: DensityMatrix { matrix },
    })
}

impl GateDensity {
    pub fn num_qubits(&self) -> usize {
        self.measurements[0].len()
    }

    /// `2^(-k/2) Σ_i (-1)^G(i) M_i`, which squares to the identity.
    pub fn signed_measurement_sum(&self) -> DMatrix<Complex64> {
        let dim = 1usize << self.num_qubits();
        let amplitude = (2f64).powf(-(self.k as f64) / 2.0);
        self.measurements
            .iter()
            .zip(&self.truth_table)
            .fold(DMatrix::zeros(dim, dim), |acc, (m, &g)| {
                acc + m.matrix().scale(if g { -amplitude } else { amplitude })
            })
    }

    /// Probability that measuring `M_index` returns the parity `(-1)^G(index)`.
    pub fn born_success(&self, index: usize) -> Result<f64, QsimError> {
        let m = self
            .measurements
            .get(index)
            .ok_or(QsimError::IndexOutOfRange {
                index,
                len: self.measurements.len(),
            })?;
        let expectation = self.rho.expectation(m);
        let sign = if self.truth_table[index] { -1.0 } else { 1.0 };
        Ok(0.5 * (1.0 + sign * expectation))
    }

    /// Samples the parity bit of `M_index` on `ρ_G` directly.
    pub fn sample_output<R: Rng + ?Sized>(&self, index: usize, rng: &mut R) -> Result<bool, QsimError> {
        let p = self.born_success(index)?;
        let correct = rng.random::<f64>() < p;
        Ok(if correct {
            self.truth_table[index]
        } else {
            !self.truth_table[index]
        })
    }
}

/// One branch of a product-state decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTerm {
    pub weight: f64,
    pub gates: Vec<GateG1>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductDecomposition {
    pub terms: Vec<ProductTerm>,
}

impl ProductDecomposition {
    pub fn to_density(&self) -> DensityMatrix {
        let mut terms = self.terms.iter();
        let first = terms.next().expect("decomposition has at least one branch");
        let states = |t: &ProductTerm| t.gates.iter().map(|g| gate_state(*g)).collect::<Vec<_>>();
        let mut matrix = DensityMatrix::product_of_pure(&states(first)).matrix.scale(first.weight);
        for t in terms {
            matrix += DensityMatrix::product_of_pure(&states(t)).matrix.scale(t.weight);
        }
        DensityMatrix { matrix }
    }
}

fn all_pauli_strings(n: usize) -> Vec<PauliString> {
    let mut out: Vec<Vec<Pauli>> = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|v| {
                [Pauli::I, Pauli::Z, Pauli::X].map(move |p| {
                    let mut w = v.clone();
                    w.push(p);
                    w
                })
            })
            .collect();
    }
    out.into_iter()
        .map(PauliString::new)
        .filter(|s| s.weight() > 0)
        .collect()
}

fn product_expectation(gates: &[GateG1], pauli: &PauliString) -> f64 {
    gates
        .iter()
        .zip(pauli.letters())
        .map(|(g, p)| match p {
            Pauli::I => 1.0,
            Pauli::Z => g.bloch().z,
            Pauli::X => g.bloch().x,
        })
        .product()
}

/// Exhaustive search for `ρ_G = Σ_i 2^(-k) ⊗_j gate_state(G̃_ij)`.
///
/// Branches are multisets of per-qubit gate assignments; a partial choice is
/// pruned as soon as some Pauli expectation can no longer reach its target.
/// States built from `{I, X, Z}` strings have no `Y` components, so matching
/// every `{I, X, Z}` expectation matches the matrix. `Ok(None)` means the
/// searched family contains no exact decomposition.
pub fn decompose_product_states(
    density: &GateDensity,
) -> Result<Option<ProductDecomposition>, QsimError> {
    if density.k > 2 {
        return Err(QsimError::DecompositionTooLarge(density.k));
    }
    let n = density.num_qubits();
    let branches = 1usize << density.k;
    let strings = all_pauli_strings(n);
    let targets: Vec<f64> = strings
        .iter()
        .map(|s| density.rho.expectation(s) * branches as f64)
        .collect();
    let bounds: Vec<f64> = strings
        .iter()
        .map(|s| (0.5f64).powf(s.weight() as f64 / 2.0))
        .collect();

    let mut candidates: Vec<Vec<GateG1>> = vec![Vec::new()];
    for _ in 0..n {
        candidates = candidates
            .into_iter()
            .flat_map(|v| {
                GateG1::ALL.map(move |g| {
                    let mut w = v.clone();
                    w.push(g);
                    w
                })
            })
            .collect();
    }
    let table: Vec<Vec<f64>> = candidates
        .iter()
        .map(|c| strings.iter().map(|s| product_expectation(c, s)).collect())
        .collect();

    struct Search<'a> {
        table: &'a [Vec<f64>],
        targets: &'a [f64],
        bounds: &'a [f64],
        branches: usize,
        chosen: Vec<usize>,
        partial: Vec<f64>,
    }

    impl Search<'_> {
        fn feasible(&self) -> bool {
            let remaining = (self.branches - self.chosen.len()) as f64;
            self.partial
                .iter()
                .zip(self.targets)
                .zip(self.bounds)
                .all(|((p, t), b)| (t - p).abs() <= remaining * b + 1e-9)
        }

        fn run(&mut self, start: usize) -> bool {
            if !self.feasible() {
                return false;
            }
            if self.chosen.len() == self.branches {
                return true;
            }
            for c in start..self.table.len() {
                for (p, v) in self.partial.iter_mut().zip(&self.table[c]) {
                    *p += v;
                }
                self.chosen.push(c);
                if self.run(c) {
                    return true;
                }
                self.chosen.pop();
                for (p, v) in self.partial.iter_mut().zip(&self.table[c]) {
                    *p -= v;
                }
            }
            false
        }
    }

    let mut search = Search {
        table: &table,
        targets: &targets,
        bounds: &bounds,
        branches,
        chosen: Vec::with_capacity(branches),
        partial: vec![0.0; strings.len()],
    };
    if !search.run(0) {
        return Ok(None);
    }
    let weight = 1.0 / branches as f64;
    let decomposition = ProductDecomposition {
        terms: search
            .chosen
            .iter()
            .map(|&c| ProductTerm {
                weight,
                gates: candidates[c].clone(),
            })
            .collect(),
    };
    if decomposition.to_density().trace_distance(&density.rho) > 1e-8 {
        return Ok(None);
    }
    Ok(Some(decomposition))
}

/// Lower bound on the singlet fidelity from linear and diagonal visibilities,
/// `F >= (V_lin + V_diag) / 2`.
pub fn fidelity_lower_bound(v_linear: f64, v_diagonal: f64) -> Result<f64, QsimError> {
    for (name, v) in [("linear", v_linear), ("diagonal", v_diagonal)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(QsimError::InvalidParameter(format!(
                "{name} visibility must lie in [0, 1], got {v}"
            )));
        }
    }
    Ok(0.5 * (v_linear + v_diagonal))
}
