use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::QsimError;

/// Largest gate arity for which measurement sets are built.
pub const MAX_MEASUREMENT_K: usize = 4;

/// Single-qubit letter of a separable measurement. `I` marks a qubit that
/// is not part of the parity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pauli {
    I,
    Z,
    X,
}

impl Pauli {
    pub fn matrix(self) -> DMatrix<Complex64> {
        let (a, b, c, d) = match self {
            Pauli::I => (1.0, 0.0, 0.0, 1.0),
            Pauli::Z => (1.0, 0.0, 0.0, -1.0),
            Pauli::X => (0.0, 1.0, 1.0, 0.0),
        };
        DMatrix::from_row_slice(
            2,
            2,
            &[a, b, c, d].map(|v| Complex64::new(v, 0.0)),
        )
    }

    fn letter(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::Z => 'Z',
            Pauli::X => 'X',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PauliString(Vec<Pauli>);

impl PauliString {
    pub fn new(letters: Vec<Pauli>) -> PauliString {
        PauliString(letters)
    }

    pub fn letters(&self) -> &[Pauli] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of non-identity positions.
    pub fn weight(&self) -> usize {
        self.0.iter().filter(|p| **p != Pauli::I).count()
    }

    /// Two strings anticommute iff an odd number of positions hold an
    /// `{X, Z}` pair.
    pub fn anticommutes_with(&self, other: &PauliString) -> bool {
        assert_eq!(self.len(), other.len(), "pauli strings of unequal length");
        let clashes = self
            .0
            .iter()
            .zip(&other.0)
            .filter(|(a, b)| matches!((a, b), (Pauli::X, Pauli::Z) | (Pauli::Z, Pauli::X)))
            .count();
        clashes % 2 == 1
    }

    /// Dense `2^n x 2^n` matrix, qubit 0 as the most significant factor.
    pub fn matrix(&self) -> DMatrix<Complex64> {
        self.0
            .iter()
            .fold(DMatrix::from_element(1, 1, Complex64::new(1.0, 0.0)), |acc, p| {
                acc.kronecker(&p.matrix())
            })
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.0 {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

impl FromStr for PauliString {
    type Err = QsimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                'I' => Ok(Pauli::I),
                'Z' => Ok(Pauli::Z),
                'X' => Ok(Pauli::X),
                other => Err(QsimError::InvalidParameter(format!(
                    "pauli letter '{other}' not in {{I, X, Z}}"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(PauliString)
    }
}

/// Canonical set of `2^k` pairwise-anticommuting strings on `2^k - 1` qubits.
///
/// Built by doubling: from a set `S` on `n` qubits, `{s ⊗ I^n ⊗ Z} ∪ {I^n ⊗ s ⊗ X}`
/// is an anticommuting set of twice the size on `2n + 1` qubits. Starting
/// from `[Z, X]` this gives input 0 → Z, input 1 → X at `k = 1`, and every
/// string at level `k` has weight `k`, which is what lets the `k = 2` gate
/// densities split into products of single-gate states.
pub fn build_measurement_set(k: usize) -> Result<Vec<PauliString>, QsimError> {
    if !(1..=MAX_MEASUREMENT_K).contains(&k) {
        return Err(QsimError::UnsupportedK(k));
    }
    let mut set = vec![
        PauliString(vec![Pauli::Z]),
        PauliString(vec![Pauli::X]),
    ];
    for _ in 1..k {
        let n = set[0].len();
        let pad = vec![Pauli::I; n];
        let mut next = Vec::with_capacity(set.len() * 2);
        for s in &set {
            let mut letters = s.0.clone();
            letters.extend_from_slice(&pad);
            letters.push(Pauli::Z);
            next.push(PauliString(letters));
        }
        for s in &set {
            let mut letters = pad.clone();
            letters.extend_from_slice(&s.0);
            letters.push(Pauli::X);
            next.push(PauliString(letters));
        }
        set = next;
    }
    Ok(set)
}

/// Index of a `k`-bit input in lexicographic order, first bit most significant.
pub fn input_index(bits: &[bool]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b))
}
