//! Single-qubit gate states, Bell-pair remote state preparation and the
//! channel models used to fill a shared table.
//!
//! Every state that appears in the protocol is real, so single-qubit states
//! are handled either as two complex amplitudes ([`PureQubit`]) or as a Bloch
//! vector restricted to the Z–X plane ([`Bloch`]). Sampling always takes a
//! caller-owned RNG.

mod density;
mod pauli;

pub use density::{
    build_gate_density, decompose_product_states, fidelity_lower_bound, DensityMatrix,
    GateDensity, ProductDecomposition, ProductTerm, MAX_DENSITY_K,
};
pub use pauli::{build_measurement_set, input_index, Pauli, PauliString, MAX_MEASUREMENT_K};

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::security::AttackChannel;

/// Intrinsic success probability of a noiseless single-gate evaluation,
/// `1/2 + 1/(2√2)`.
pub const IDEAL_SUCCESS: f64 = 0.5 + 1.0 / (2.0 * SQRT_2);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsimError {
    #[error("gate arity k={0} is outside the supported range")]
    UnsupportedK(usize),
    #[error("density matrices for k={0} are too large to materialise")]
    DimensionTooLarge(usize),
    #[error("truth table has {got} entries, expected {expected}")]
    TruthTableLength { expected: usize, got: usize },
    #[error("input index {index} out of range for {len} measurements")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("product decomposition search only supports k <= 2, got k={0}")]
    DecompositionTooLarge(usize),
}

/// One of the four single-input logic gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateG1 {
    Const0,
    Const1,
    Id,
    Not,
}

impl GateG1 {
    pub const ALL: [GateG1; 4] = [GateG1::Const0, GateG1::Const1, GateG1::Id, GateG1::Not];

    /// `(output on input 0, output on input 1)`.
    pub fn truth_table(self) -> (bool, bool) {
        match self {
            GateG1::Const0 => (false, false),
            GateG1::Const1 => (true, true),
            GateG1::Id => (false, true),
            GateG1::Not => (true, false),
        }
    }

    pub fn from_truth_table(on0: bool, on1: bool) -> GateG1 {
        match (on0, on1) {
            (false, false) => GateG1::Const0,
            (true, true) => GateG1::Const1,
            (false, true) => GateG1::Id,
            (true, false) => GateG1::Not,
        }
    }

    pub fn eval(self, input: bool) -> bool {
        let (on0, on1) = self.truth_table();
        if input {
            on1
        } else {
            on0
        }
    }

    /// The gate with both outputs flipped.
    pub fn opposite(self) -> GateG1 {
        let (on0, on1) = self.truth_table();
        GateG1::from_truth_table(!on0, !on1)
    }

    /// The gate `x -> self(!x)`, used when a NOT is absorbed on the input side.
    pub fn input_inverted(self) -> GateG1 {
        let (on0, on1) = self.truth_table();
        GateG1::from_truth_table(on1, on0)
    }

    /// File and wire encoding.
    pub fn code(self) -> u8 {
        match self {
            GateG1::Const0 => 0,
            GateG1::Const1 => 1,
            GateG1::Id => 2,
            GateG1::Not => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<GateG1> {
        GateG1::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            GateG1::Const0 => "const0",
            GateG1::Const1 => "const1",
            GateG1::Id => "id",
            GateG1::Not => "not",
        }
    }

    /// Bloch vector of the encoding state: each Bloch component is
    /// `±1/√2`, positive when the corresponding output is 0.
    pub fn bloch(self) -> Bloch {
        let (on0, on1) = self.truth_table();
        Bloch {
            z: sign(on0) * FRAC_1_SQRT_2,
            x: sign(on1) * FRAC_1_SQRT_2,
        }
    }

    /// Alice's basis and outcome sign that leave Bob holding this gate's state.
    /// Bob receives the state orthogonal to Alice's projection.
    pub fn alice_projection(self) -> (AliceBasis, i8) {
        match self {
            GateG1::Const1 => (AliceBasis::A1, 1),
            GateG1::Const0 => (AliceBasis::A1, -1),
            GateG1::Not => (AliceBasis::A2, 1),
            GateG1::Id => (AliceBasis::A2, -1),
        }
    }
}

impl fmt::Display for GateG1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateG1 {
    type Err = QsimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "const0" | "zero" | "0" => Ok(GateG1::Const0),
            "const1" | "one" | "1" => Ok(GateG1::Const1),
            "id" | "identity" => Ok(GateG1::Id),
            "not" => Ok(GateG1::Not),
            other => Err(QsimError::InvalidParameter(format!("unknown gate '{other}'"))),
        }
    }
}

fn sign(bit: bool) -> f64 {
    if bit {
        -1.0
    } else {
        1.0
    }
}

/// Bloch vector of a real single-qubit state, `y = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bloch {
    pub z: f64,
    pub x: f64,
}

impl Bloch {
    pub const Z: Bloch = Bloch { z: 1.0, x: 0.0 };
    pub const X: Bloch = Bloch { z: 0.0, x: 1.0 };
    pub const MIXED: Bloch = Bloch { z: 0.0, x: 0.0 };

    pub fn dot(self, other: Bloch) -> f64 {
        self.z * other.z + self.x * other.x
    }

    pub fn scale(self, factor: f64) -> Bloch {
        Bloch {
            z: self.z * factor,
            x: self.x * factor,
        }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Bloch {
        self.scale(1.0 / self.norm())
    }

    pub fn neg(self) -> Bloch {
        self.scale(-1.0)
    }
}

/// A normalised pure qubit state `amp0 |0> + amp1 |1>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PureQubit {
    pub amp0: Complex64,
    pub amp1: Complex64,
}

impl PureQubit {
    pub fn from_amplitudes(amp0: Complex64, amp1: Complex64) -> Result<PureQubit, QsimError> {
        let norm = (amp0.norm_sqr() + amp1.norm_sqr()).sqrt();
        if norm < 1e-15 {
            return Err(QsimError::InvalidParameter("zero state vector".into()));
        }
        Ok(PureQubit {
            amp0: amp0 / norm,
            amp1: amp1 / norm,
        })
    }

    pub fn zero() -> PureQubit {
        PureQubit {
            amp0: Complex64::new(1.0, 0.0),
            amp1: Complex64::new(0.0, 0.0),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amp0.norm_sqr() + self.amp1.norm_sqr()
    }

    /// `<self|other>`.
    pub fn inner(&self, other: &PureQubit) -> Complex64 {
        self.amp0.conj() * other.amp0 + self.amp1.conj() * other.amp1
    }

    /// Full Bloch vector `(x, y, z)`.
    pub fn bloch_xyz(&self) -> (f64, f64, f64) {
        let cross = self.amp0.conj() * self.amp1;
        (
            2.0 * cross.re,
            2.0 * cross.im,
            self.amp0.norm_sqr() - self.amp1.norm_sqr(),
        )
    }

    pub fn bloch(&self) -> Bloch {
        let (x, _, z) = self.bloch_xyz();
        Bloch { z, x }
    }

    /// Born probability of outcome 0 (the positive eigenstate) for `basis`.
    pub fn prob_zero(&self, basis: BobBasis) -> f64 {
        outcome_zero_probability(self.bloch(), basis.direction())
    }
}

/// Encoding state of a gate: `|Ψ0>, |Ψ1>, |Ψ_Id>, |Ψ_not>`.
pub fn gate_state(gate: GateG1) -> PureQubit {
    let big = 1.0 + FRAC_1_SQRT_2;
    let small = FRAC_1_SQRT_2;
    let c = 1.0 / (2.0 + SQRT_2).sqrt();
    let (a0, a1) = match gate {
        // |0> + |+>
        GateG1::Const0 => (big, small),
        // |1> - |->
        GateG1::Const1 => (-small, big),
        // |0> + |->
        GateG1::Id => (big, -small),
        // |1> + |+>
        GateG1::Not => (small, big),
    };
    PureQubit {
        amp0: Complex64::new(c * a0, 0.0),
        amp1: Complex64::new(c * a1, 0.0),
    }
}

/// Bob's measurement basis; input 0 selects Z and input 1 selects X.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BobBasis {
    Z,
    X,
}

impl BobBasis {
    pub fn from_input(input: bool) -> BobBasis {
        if input {
            BobBasis::X
        } else {
            BobBasis::Z
        }
    }

    pub fn input(self) -> bool {
        matches!(self, BobBasis::X)
    }

    pub fn direction(self) -> Bloch {
        match self {
            BobBasis::Z => Bloch::Z,
            BobBasis::X => Bloch::X,
        }
    }
}

/// Alice's two measurement bases: `A1 = {Ψ0, Ψ1}` and `A2 = {Ψ_Id, Ψ_not}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AliceBasis {
    A1,
    A2,
}

impl AliceBasis {
    /// Direction of the `+1` projector (`Ψ0` resp. `Ψ_Id`).
    pub fn direction(self) -> Bloch {
        match self {
            AliceBasis::A1 => GateG1::Const0.bloch().normalized(),
            AliceBasis::A2 => GateG1::Id.bloch().normalized(),
        }
    }

    /// Gate recorded when Alice projects onto the `+1` (`plus = true`) or
    /// `-1` element of this basis.
    pub fn recorded_gate(self, plus: bool) -> GateG1 {
        match (self, plus) {
            (AliceBasis::A1, true) => GateG1::Const1,
            (AliceBasis::A1, false) => GateG1::Const0,
            (AliceBasis::A2, true) => GateG1::Not,
            (AliceBasis::A2, false) => GateG1::Id,
        }
    }
}

fn outcome_zero_probability(state: Bloch, direction: Bloch) -> f64 {
    (0.5 * (1.0 + state.dot(direction))).clamp(0.0, 1.0)
}

/// Born-rule measurement; returns `true` for outcome 1 (negative eigenstate).
pub fn measure<R: Rng + ?Sized>(state: &PureQubit, basis: BobBasis, rng: &mut R) -> bool {
    rng.random::<f64>() >= state.prob_zero(basis)
}

/// Per-link noise applied between the entangled source and Bob's detectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Werner mixing weight of the Bell state.
    pub visibility: f64,
    /// Probability that the transmitted qubit never reaches Bob.
    pub loss_prob: f64,
    /// Fraction of pairs flagged as multi-photon emissions.
    pub multi_photon_fraction: f64,
    /// Uncorrelated detector clicks per second per party.
    pub dark_count_rate: f64,
}

/// Visibility matching the measured single-gate success probability 0.831.
pub const VISIBILITY_SUCCESS_FIT: f64 = (0.831 - 0.5) * 2.0 * SQRT_2;
/// Visibility matching the measured Bell parameter 2.701.
pub const VISIBILITY_BELL_FIT: f64 = 2.701 / (2.0 * SQRT_2);
pub const DETECTOR_LOSS: f64 = 0.13;
pub const MULTI_PHOTON_FRACTION: f64 = 0.00097;

impl NoiseModel {
    pub fn ideal() -> NoiseModel {
        NoiseModel {
            visibility: 1.0,
            loss_prob: 0.0,
            multi_photon_fraction: 0.0,
            dark_count_rate: 0.0,
        }
    }

    pub fn with_visibility(visibility: f64) -> NoiseModel {
        NoiseModel {
            visibility,
            ..NoiseModel::ideal()
        }
    }

    pub fn with_loss(mut self, loss_prob: f64) -> NoiseModel {
        self.loss_prob = loss_prob;
        self
    }

    /// Calibrated to the experimental per-gate success of 0.831.
    pub fn success_fit() -> NoiseModel {
        NoiseModel {
            visibility: VISIBILITY_SUCCESS_FIT,
            loss_prob: DETECTOR_LOSS,
            multi_photon_fraction: MULTI_PHOTON_FRACTION,
            dark_count_rate: 0.0,
        }
    }

    /// Calibrated to the measured CHSH value of 2.701.
    pub fn bell_fit() -> NoiseModel {
        NoiseModel {
            visibility: VISIBILITY_BELL_FIT,
            ..NoiseModel::success_fit()
        }
    }

    /// Named presets: `ideal`, `v0.936`, `v0.955`.
    pub fn preset(name: &str) -> Result<NoiseModel, QsimError> {
        match name {
            "ideal" => Ok(NoiseModel::ideal()),
            "v0.936" => Ok(NoiseModel::success_fit()),
            "v0.955" => Ok(NoiseModel::bell_fit()),
            other => Err(QsimError::InvalidParameter(format!(
                "unknown noise preset '{other}'"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), QsimError> {
        let unit = |name: &str, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(QsimError::InvalidParameter(format!(
                    "{name} must lie in [0, 1], got {value}"
                )))
            }
        };
        unit("visibility", self.visibility)?;
        unit("loss_prob", self.loss_prob)?;
        unit("multi_photon_fraction", self.multi_photon_fraction)?;
        if !(self.dark_count_rate >= 0.0 && self.dark_count_rate.is_finite()) {
            return Err(QsimError::InvalidParameter(format!(
                "dark_count_rate must be non-negative, got {}",
                self.dark_count_rate
            )));
        }
        Ok(())
    }

    /// Bob's per-evaluation success probability, `1/2 + v/(2√2)`.
    pub fn success_probability(&self) -> f64 {
        0.5 + self.visibility / (2.0 * SQRT_2)
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::ideal()
    }
}

/// One table line as produced by a single Bell pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineSample {
    pub alice_gate: GateG1,
    pub bob_basis: BobBasis,
    pub bob_output: bool,
    pub multi_photon: bool,
}

impl LineSample {
    pub fn bob_input(&self) -> bool {
        self.bob_basis.input()
    }

    /// Whether Bob's recorded output matches the ideal gate output.
    pub fn is_correct(&self) -> bool {
        self.alice_gate.eval(self.bob_input()) == self.bob_output
    }
}

/// Noise plus an optional eavesdropper on the link to Bob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantumChannel {
    pub noise: NoiseModel,
    pub attack: AttackChannel,
}

impl QuantumChannel {
    pub fn new(noise: NoiseModel) -> QuantumChannel {
        QuantumChannel {
            noise,
            attack: AttackChannel::None,
        }
    }

    pub fn with_attack(mut self, attack: AttackChannel) -> QuantumChannel {
        self.attack = attack;
        self
    }

    /// Samples one Bell pair. `None` means the qubit was lost before Bob.
    pub fn sample_line<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<LineSample> {
        self.sample_line_with_visibility(self.noise.visibility, rng)
    }

    /// As [`QuantumChannel::sample_line`] but with an explicit visibility,
    /// used for slow drift of the source.
    pub fn sample_line_with_visibility<R: Rng + ?Sized>(
        &self,
        visibility: f64,
        rng: &mut R,
    ) -> Option<LineSample> {
        let coins: u32 = rng.random();
        let alice_basis = if coins & 1 == 0 {
            AliceBasis::A1
        } else {
            AliceBasis::A2
        };
        // Alice's marginal on the singlet is maximally mixed.
        let alice_plus = coins & 2 == 0;
        let bob_basis = if coins & 4 == 0 {
            BobBasis::Z
        } else {
            BobBasis::X
        };
        let alice_gate = alice_basis.recorded_gate(alice_plus);

        let lost = self.noise.loss_prob > 0.0 && rng.random::<f64>() < self.noise.loss_prob;
        let multi_photon = self.noise.multi_photon_fraction > 0.0
            && rng.random::<f64>() < self.noise.multi_photon_fraction;
        if lost {
            return None;
        }

        // Bob's conditional state after Alice's projection, Werner-shrunk.
        let projected = alice_basis.direction();
        let bob_state = if alice_plus {
            projected.neg()
        } else {
            projected
        }
        .scale(visibility);
        let bob_state = self.attack.apply(bob_state, rng);

        let p0 = outcome_zero_probability(bob_state, bob_basis.direction());
        let bob_output = rng.random::<f64>() >= p0;
        Some(LineSample {
            alice_gate,
            bob_basis,
            bob_output,
            multi_photon,
        })
    }

    /// Exact correlator `E(a, b)` between Alice's ±1 outcome along `a` and
    /// Bob's ±1 outcome along `b`.
    pub fn correlator(&self, alice_dir: Bloch, bob_dir: Bloch) -> f64 {
        let v = self.noise.visibility;
        match self.attack {
            AttackChannel::None => -v * alice_dir.dot(bob_dir),
            AttackChannel::InterceptResendZX => -0.5 * v * alice_dir.dot(bob_dir),
            AttackChannel::InterceptResendFixed(basis) => {
                let e = basis.direction();
                -v * alice_dir.dot(e) * bob_dir.dot(e)
            }
        }
    }
}

/// Samples one line through the noise model with no eavesdropper.
pub fn sample_table_line<R: Rng + ?Sized>(noise: &NoiseModel, rng: &mut R) -> Option<LineSample> {
    QuantumChannel::new(*noise).sample_line(rng)
}

/// Exact Werner-singlet correlator, `-v (a·b)`.
pub fn correlator(alice_dir: Bloch, bob_dir: Bloch, noise: &NoiseModel) -> f64 {
    QuantumChannel::new(*noise).correlator(alice_dir, bob_dir)
}
