//! One-time delegated signatures.
//!
//! Alice's key is `L = N·m` random single-bit gates. Bob signs by feeding
//! hash bit `i` into gates `i·N .. (i+1)·N`; Alice accepts if for every hash
//! bit at least `ceil(τN)` outputs agree with the ideal gate.

mod analysis;

pub use analysis::{
    binomial_tail, binomial_tails, cheat_accept_probability, histogram_report,
    honest_accept_normal_fit, honest_accept_probability, optimize_threshold, threshold_count,
    CheatModel, HistogramBin, HistogramReport, ThresholdAnalysis, ThresholdPoint,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;
use sha3::{Digest, Sha3_224};
use thiserror::Error;

use crate::engine::{AliceBatch, AliceSession, BobSession, EngineError};
use crate::qsim::GateG1;
use crate::tabler::{SharedTableAlice, TableFileError};
use crate::wire::{VerifyKind, VerifyResult, WireMessage};

pub const SIGNATURE_MAGIC: [u8; 4] = *b"OTPS";
pub const SIGNATURE_VERSION: u16 = 1;
pub const DEFAULT_N: u32 = 1000;
pub const DEFAULT_M: u32 = 224;
pub const DEFAULT_TAU: f64 = 0.776;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("signature has {got} bits, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("malformed signature: {0}")]
    Malformed(String),
    #[error("signature checksum mismatch")]
    ChecksumMismatch,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("key file: {0}")]
    Key(String),
}

impl From<TableFileError> for SigError {
    fn from(e: TableFileError) -> Self {
        SigError::Key(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum HashAlgo {
    Sha3_224,
}

impl HashAlgo {
    pub fn code(self) -> u8 {
        match self {
            HashAlgo::Sha3_224 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<HashAlgo> {
        match code {
            1 => Some(HashAlgo::Sha3_224),
            _ => None,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            HashAlgo::Sha3_224 => 224,
        }
    }

    /// Digest bits, most significant bit of each byte first.
    pub fn hash_bits(self, message: &[u8]) -> Vec<bool> {
        let digest = match self {
            HashAlgo::Sha3_224 => Sha3_224::digest(message).to_vec(),
        };
        digest
            .iter()
            .flat_map(|byte| (0..8).rev().map(move |i| byte >> i & 1 == 1))
            .collect()
    }
}

impl fmt::Display for HashAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("sha3-224")
    }
}

impl FromStr for HashAlgo {
    type Err = SigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sha3-224" | "sha3_224" => Ok(HashAlgo::Sha3_224),
            _ => Err(SigError::Params(format!("unknown hash algorithm {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignatureParams {
    /// Gates per hash bit.
    pub n: u32,
    /// Hash bits.
    pub m: u32,
    pub tau: f64,
    pub hash_algo: HashAlgo,
}

impl Default for SignatureParams {
    fn default() -> Self {
        SignatureParams {
            n: DEFAULT_N,
            m: DEFAULT_M,
            tau: DEFAULT_TAU,
            hash_algo: HashAlgo::Sha3_224,
        }
    }
}

impl SignatureParams {
    pub fn validate(&self) -> Result<(), SigError> {
        if self.n == 0 {
            return Err(SigError::Params("N must be positive".into()));
        }
        if self.m == 0 || self.m > self.hash_algo.bits() {
            return Err(SigError::Params(format!(
                "m = {} must be in 1..={}",
                self.m,
                self.hash_algo.bits()
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(SigError::Params(format!("tau = {} is outside [0, 1]", self.tau)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n as usize * self.m as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `m` hash bits of `message`.
    pub fn message_bits(&self, message: &[u8]) -> Vec<bool> {
        let mut bits = self.hash_algo.hash_bits(message);
        bits.truncate(self.m as usize);
        bits
    }

    /// Bob's gate inputs: hash bit `i` repeated `N` times, bit-major.
    pub fn gate_inputs(&self, message: &[u8]) -> Vec<bool> {
        self.message_bits(message)
            .into_iter()
            .flat_map(|b| std::iter::repeat_n(b, self.n as usize))
            .collect()
    }
}

/// Alice's secret: one gate per signature position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigningKey {
    pub gates: Vec<GateG1>,
}

impl SigningKey {
    pub fn generate<R: Rng + ?Sized>(params: &SignatureParams, rng: &mut R) -> SigningKey {
        SigningKey {
            gates: (0..params.len())
                .map(|_| GateG1::ALL[rng.random_range(0..4)])
                .collect(),
        }
    }

    /// Stored in the table file format, one line per gate.
    pub fn save(&self, path: &Path) -> Result<(), SigError> {
        SharedTableAlice::from_gates(0, self.gates.iter().copied()).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SigningKey, SigError> {
        let t = SharedTableAlice::load(path)?;
        Ok(SigningKey {
            gates: t.records().iter().map(|r| r.gate).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    pub n: u32,
    pub m: u32,
    pub hash_algo: HashAlgo,
    pub message: Vec<u8>,
    /// Output bits ordered (hash bit, replica).
    pub bits: Vec<bool>,
}

impl Signature {
    pub fn new(params: &SignatureParams, message: &[u8], bits: Vec<bool>) -> Result<Signature, SigError> {
        if bits.len() != params.len() {
            return Err(SigError::LengthMismatch {
                expected: params.len(),
                got: bits.len(),
            });
        }
        Ok(Signature {
            n: params.n,
            m: params.m,
            hash_algo: params.hash_algo,
            message: message.to_vec(),
            bits,
        })
    }

    /// `"OTPS" | version u16 | N u32 | m u16 | algo u8 | msg_len u32 | msg |
    /// bits packed LSB-first | CRC32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = SIGNATURE_MAGIC.to_vec();
        out.extend_from_slice(&SIGNATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&(self.m as u16).to_le_bytes());
        out.push(self.hash_algo.code());
        out.extend_from_slice(&(self.message.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.message);
        let mut packed = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            packed[i / 8] |= u8::from(b) << (i % 8);
        }
        out.extend_from_slice(&packed);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Signature, SigError> {
        let bad = |m: &str| SigError::Malformed(m.to_string());
        if bytes.len() < 21 || bytes[..4] != SIGNATURE_MAGIC {
            return Err(bad("bad header"));
        }
        let body = bytes.len() - 4;
        if crc32fast::hash(&bytes[..body]) != u32::from_le_bytes(bytes[body..].try_into().expect("4")) {
            return Err(SigError::ChecksumMismatch);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != SIGNATURE_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u32::from_le_bytes(bytes[6..10].try_into().expect("4"));
        let m = u32::from(u16::from_le_bytes([bytes[10], bytes[11]]));
        let hash_algo = HashAlgo::from_code(bytes[12]).ok_or_else(|| bad("unknown hash algorithm"))?;
        let msg_len = u32::from_le_bytes(bytes[13..17].try_into().expect("4")) as usize;
        let bits_len = n as usize * m as usize;
        let msg_end = 17usize.checked_add(msg_len).ok_or_else(|| bad("length overflow"))?;
        if msg_end.checked_add(bits_len.div_ceil(8)) != Some(body) {
            return Err(bad("length fields disagree with file size"));
        }
        let message = bytes[17..msg_end].to_vec();
        let packed = &bytes[msg_end..body];
        let bits = (0..bits_len).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Signature {
            n,
            m,
            hash_algo,
            message,
            bits,
        })
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Signature, SigError> {
        let bytes = std::fs::read(path).map_err(|e| SigError::Malformed(e.to_string()))?;
        Signature::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    pub accept: bool,
    pub tau: f64,
    pub required: u32,
    /// Correct fraction per hash bit.
    pub fractions: Vec<f64>,
    pub min_fraction: f64,
    pub failing_bits: Vec<usize>,
}

/// Checks `signature` on `message` against Alice's key.
pub fn verify(message: &[u8], signature: &Signature, key: &SigningKey, tau: f64) -> Result<Verification, SigError> {
    let params = SignatureParams {
        n: signature.n,
        m: signature.m,
        tau,
        hash_algo: signature.hash_algo,
    };
    params.validate()?;
    for (expected, got) in [(params.len(), signature.bits.len()), (params.len(), key.gates.len())] {
        if expected != got {
            return Err(SigError::LengthMismatch { expected, got });
        }
    }
    let hash = params.message_bits(message);
    let n = params.n as usize;
    let required = threshold_count(tau, params.n);
    let mut fractions = Vec::with_capacity(hash.len());
    let mut failing_bits = Vec::new();
    for (i, &b) in hash.iter().enumerate() {
        let correct = (0..n)
            .filter(|&j| signature.bits[i * n + j] == key.gates[i * n + j].eval(b))
            .count();
        if (correct as u32) < required {
            failing_bits.push(i);
        }
        fractions.push(correct as f64 / n as f64);
    }
    let min_fraction = fractions.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Verification {
        accept: failing_bits.is_empty(),
        tau,
        required,
        fractions,
        min_fraction,
        failing_bits,
    })
}

impl AliceSession<'_> {
    /// Runs the signing batch with the key's gates as targets.
    pub fn serve_signature(&mut self, key: &SigningKey) -> Result<AliceBatch, SigError> {
        let batch = self.execute_batch(&key.gates)?;
        if let Some(&id) = batch.failed().first() {
            return Err(EngineError::TableExhausted { request_id: id }.into());
        }
        Ok(batch)
    }

    /// Waits for SIGN_SUBMIT, verifies and answers with VERIFY_RESULT.
    pub fn verify_submission(&mut self, key: &SigningKey, tau: f64) -> Result<(Signature, Verification), SigError> {
        let sig = match self.recv()? {
            WireMessage::SignSubmit(bytes) => Signature::from_bytes(&bytes),
            m => {
                let e = EngineError::Protocol(format!("expected SIGN_SUBMIT, got {:?}", m.message_type()));
                let _ = self.abort(crate::wire::AbortCode::ProtocolViolation, &e.to_string());
                return Err(e.into());
            }
        }?;
        let v = verify(&sig.message, &sig, key, tau)?;
        self.link()
            .send(&WireMessage::VerifyResult(VerifyResult {
                kind: VerifyKind::Signature,
                accept: v.accept,
                value: v.min_fraction,
                fractions: v.fractions.clone(),
            }))
            .map_err(EngineError::from)?;
        Ok((sig, v))
    }
}

impl BobSession<'_> {
    /// Evaluates `N` gates per hash bit with the bit as input.
    pub fn sign(&mut self, message: &[u8], params: &SignatureParams) -> Result<Signature, SigError> {
        params.validate()?;
        let bits = self.execute_batch(&params.gate_inputs(message))?.require_outputs()?;
        Signature::new(params, message, bits)
    }

    pub fn submit_signature(&mut self, sig: &Signature) -> Result<VerifyResult, SigError> {
        self.link()
            .send(&WireMessage::SignSubmit(sig.to_bytes()))
            .map_err(EngineError::from)?;
        match self.recv()? {
            WireMessage::VerifyResult(v) if v.kind == VerifyKind::Signature => Ok(v),
            m => Err(EngineError::Protocol(format!("expected VERIFY_RESULT, got {:?}", m.message_type())).into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SignatureParams {
        SignatureParams {
            n: 10,
            m: 16,
            tau: 0.7,
            hash_algo: HashAlgo::Sha3_224,
        }
    }

    #[test]
    fn hash_bits_msb_first() {
        // SHA3-224("") starts with 0x6b = 0110_1011.
        let bits = HashAlgo::Sha3_224.hash_bits(b"");
        assert_eq!(bits.len(), 224);
        assert_eq!(&bits[..8], &[false, true, true, false, true, false, true, true]);
        assert_ne!(bits, HashAlgo::Sha3_224.hash_bits(b"x"));
    }

    #[test]
    fn signature_bytes_round_trip() {
        let p = small();
        let bits: Vec<bool> = (0..p.len()).map(|i| i % 3 == 0).collect();
        let s = Signature::new(&p, b"hello", bits).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"OTPS");
        assert_eq!(bytes.len(), 17 + 5 + 20 + 4);
        assert_eq!(Signature::from_bytes(&bytes).unwrap(), s);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert_eq!(Signature::from_bytes(&bad), Err(SigError::ChecksumMismatch));
        assert!(Signature::new(&p, b"", vec![true]).is_err());
    }

    #[test]
    fn ideal_outputs_always_accepted() {
        let p = small();
        let key = SigningKey::generate(&p, &mut ChaCha8Rng::seed_from_u64(1));
        let ins = p.gate_inputs(b"msg");
        let bits: Vec<bool> = ins.iter().zip(&key.gates).map(|(&x, g)| g.eval(x)).collect();
        let s = Signature::new(&p, b"msg", bits).unwrap();
        let v = verify(b"msg", &s, &key, 1.0).unwrap();
        assert!(v.accept);
        assert_eq!(v.min_fraction, 1.0);
    }

    #[test]
    fn one_bit_just_below_threshold_rejects() {
        let p = small();
        let key = SigningKey::generate(&p, &mut ChaCha8Rng::seed_from_u64(2));
        let ins = p.gate_inputs(b"m");
        let mut bits: Vec<bool> = ins.iter().zip(&key.gates).map(|(&x, g)| g.eval(x)).collect();
        // τN = 7: leave 6 of bit 3's ten outputs correct.
        for j in 0..4 {
            bits[3 * 10 + j] = !bits[3 * 10 + j];
        }
        let s = Signature::new(&p, b"m", bits).unwrap();
        let v = verify(b"m", &s, &key, 0.7).unwrap();
        assert!(!v.accept);
        assert_eq!(v.failing_bits, vec![3]);
        assert!((v.fractions[3] - 0.6).abs() < 1e-12);
        assert!(verify(b"m", &s, &key, 0.6).unwrap().accept);
    }
}
