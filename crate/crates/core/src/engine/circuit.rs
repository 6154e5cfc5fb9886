//! Classical circuits of gate-OTPs with public wiring and secret truth tables.
//!
//! Text format, one statement per line, `#` starts a comment:
//!
//! ```text
//! input a b
//! n = not(a)
//! y = 0110(n, b)
//! output y
//! ```
//!
//! Single-input gates may be named (`const0`, `const1`, `id`, `not`); any
//! gate may be given as its truth-table bit string, one bit per input
//! index with the first argument most significant.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::Rng;

use super::gk::{gk_combine, gk_slot_gates, gk_slot_inputs, GkGateSpec, GkPlan};
use super::{AliceSession, BobSession, EngineError};
use crate::qsim::{input_index, GateG1, MAX_MEASUREMENT_K};
use crate::wire::AbortCode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitGate {
    pub output: String,
    pub inputs: Vec<String>,
    pub table: Vec<bool>,
}

impl CircuitGate {
    pub fn k(&self) -> usize {
        self.inputs.len()
    }

    pub fn spec(&self) -> Result<GkGateSpec, EngineError> {
        GkGateSpec::new(self.k(), self.table.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Circuit {
    pub inputs: Vec<String>,
    pub gates: Vec<CircuitGate>,
    pub outputs: Vec<String>,
}

/// The public part of a circuit, which is all Bob sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeGate {
    pub output: String,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitShape {
    pub inputs: Vec<String>,
    pub gates: Vec<ShapeGate>,
    pub outputs: Vec<String>,
}

fn err(msg: impl Into<String>) -> EngineError {
    EngineError::Circuit(msg.into())
}

impl CircuitShape {
    /// Gate indices grouped by depth. Fails unless every wire is driven
    /// exactly once and the wiring is acyclic.
    pub fn layers(&self) -> Result<Vec<Vec<usize>>, EngineError> {
        let mut driver: HashMap<&str, Option<usize>> = HashMap::new();
        for w in &self.inputs {
            if driver.insert(w, None).is_some() {
                return Err(err(format!("wire {w} is driven twice")));
            }
        }
        for (i, g) in self.gates.iter().enumerate() {
            if driver.insert(&g.output, Some(i)).is_some() {
                return Err(err(format!("wire {} is driven twice", g.output)));
            }
            if g.inputs.is_empty() || g.inputs.len() > MAX_MEASUREMENT_K {
                return Err(err(format!("gate {} has {} inputs", g.output, g.inputs.len())));
            }
        }
        for g in &self.gates {
            if let Some(w) = g.inputs.iter().find(|w| !driver.contains_key(w.as_str())) {
                return Err(err(format!("wire {w} is never driven")));
            }
        }
        if let Some(w) = self.outputs.iter().find(|w| !driver.contains_key(w.as_str())) {
            return Err(err(format!("output {w} is never driven")));
        }
        // Depth by repeated relaxation; more than `gates` passes means a cycle.
        let mut depth: Vec<Option<usize>> = vec![None; self.gates.len()];
        let mut remaining = self.gates.len();
        while remaining > 0 {
            let mut progressed = false;
            for (i, g) in self.gates.iter().enumerate() {
                if depth[i].is_some() {
                    continue;
                }
                let mut d = 0;
                let mut ready = true;
                for w in &g.inputs {
                    match driver[w.as_str()] {
                        None => {}
                        Some(j) => match depth[j] {
                            Some(dj) => d = d.max(dj + 1),
                            None => ready = false,
                        },
                    }
                }
                if ready {
                    depth[i] = Some(d);
                    remaining -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                return Err(err("wiring has a cycle"));
            }
        }
        let max = depth.iter().flatten().max().map_or(0, |d| d + 1);
        let mut layers = vec![Vec::new(); max];
        for (i, d) in depth.iter().enumerate() {
            layers[d.expect("all placed")].push(i);
        }
        Ok(layers)
    }
}

impl Circuit {
    pub fn shape(&self) -> CircuitShape {
        CircuitShape {
            inputs: self.inputs.clone(),
            gates: self
                .gates
                .iter()
                .map(|g| ShapeGate {
                    output: g.output.clone(),
                    inputs: g.inputs.clone(),
                })
                .collect(),
            outputs: self.outputs.clone(),
        }
    }

    pub fn validate(&self) -> Result<Vec<Vec<usize>>, EngineError> {
        for g in &self.gates {
            g.spec()?;
        }
        self.shape().layers()
    }

    /// Noise-free evaluation, returning every wire's value.
    pub fn wire_values(&self, inputs: &[bool]) -> Result<HashMap<String, bool>, EngineError> {
        let layers = self.validate()?;
        if inputs.len() != self.inputs.len() {
            return Err(err(format!("{} inputs given, {} expected", inputs.len(), self.inputs.len())));
        }
        let mut values: HashMap<String, bool> = self.inputs.iter().cloned().zip(inputs.iter().copied()).collect();
        for layer in layers {
            for i in layer {
                let g = &self.gates[i];
                let bits: Vec<bool> = g.inputs.iter().map(|w| values[w]).collect();
                values.insert(g.output.clone(), g.table[input_index(&bits)]);
            }
        }
        Ok(values)
    }

    pub fn evaluate_ideal(&self, inputs: &[bool]) -> Result<Vec<bool>, EngineError> {
        let values = self.wire_values(inputs)?;
        Ok(self.outputs.iter().map(|w| values[w]).collect())
    }

    pub fn parse(text: &str) -> Result<Circuit, EngineError> {
        let mut c = Circuit {
            inputs: Vec::new(),
            gates: Vec::new(),
            outputs: Vec::new(),
        };
        let ident = |s: &str, line: usize| -> Result<String, EngineError> {
            let ok = !s.is_empty()
                && s.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_')
                && !s.starts_with(|ch: char| ch.is_ascii_digit());
            if ok {
                Ok(s.to_string())
            } else {
                Err(err(format!("line {line}: bad wire name {s:?}")))
            }
        };
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let s = raw.split('#').next().unwrap_or("").trim();
            if s.is_empty() {
                continue;
            }
            if let Some(rest) = s.strip_prefix("input ") {
                for w in rest.split_whitespace() {
                    c.inputs.push(ident(w, line)?);
                }
            } else if let Some(rest) = s.strip_prefix("output ") {
                for w in rest.split_whitespace() {
                    c.outputs.push(ident(w, line)?);
                }
            } else if let Some((lhs, rhs)) = s.split_once('=') {
                let output = ident(lhs.trim(), line)?;
                let rhs = rhs.trim();
                let (op, args) = rhs
                    .strip_suffix(')')
                    .and_then(|r| r.split_once('('))
                    .ok_or_else(|| err(format!("line {line}: expected op(args)")))?;
                let inputs = args
                    .split(',')
                    .map(|a| ident(a.trim(), line))
                    .collect::<Result<Vec<_>, _>>()?;
                let op = op.trim();
                let table = match op.parse::<GateG1>() {
                    Ok(g) if !op.chars().all(|ch| ch == '0' || ch == '1') => {
                        let (a, b) = g.truth_table();
                        vec![a, b]
                    }
                    _ => GkGateSpec::from_bits(op)
                        .map_err(|e| err(format!("line {line}: {e}")))?
                        .truth_table,
                };
                if table.len() != 1 << inputs.len() {
                    return Err(err(format!(
                        "line {line}: {} inputs need a {}-entry truth table",
                        inputs.len(),
                        1 << inputs.len()
                    )));
                }
                c.gates.push(CircuitGate { output, inputs, table });
            } else {
                return Err(err(format!("line {line}: cannot parse {s:?}")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Circuit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.inputs.is_empty() {
            writeln!(f, "input {}", self.inputs.join(" "))?;
        }
        for g in &self.gates {
            let op = if g.k() == 1 {
                GateG1::from_truth_table(g.table[0], g.table[1]).name().to_string()
            } else {
                g.table.iter().map(|&b| if b { '1' } else { '0' }).collect()
            };
            writeln!(f, "{} = {}({})", g.output, op, g.inputs.join(", "))?;
        }
        if !self.outputs.is_empty() {
            writeln!(f, "output {}", self.outputs.join(" "))?;
        }
        Ok(())
    }
}

/// Pads each internal wire with `NOT ∘ NOT` with probability 1/2 and folds
/// the two NOTs into the gates on either side.
pub fn randomize_circuit<R: Rng + ?Sized>(circuit: &Circuit, rng: &mut R) -> Circuit {
    randomize_circuit_with_probability(circuit, 0.5, rng)
}

pub fn randomize_circuit_with_probability<R: Rng + ?Sized>(circuit: &Circuit, p: f64, rng: &mut R) -> Circuit {
    let mut out = circuit.clone();
    let outputs: HashSet<&str> = circuit.outputs.iter().map(String::as_str).collect();
    for i in 0..circuit.gates.len() {
        let wire = &circuit.gates[i].output;
        let consumed = circuit.gates.iter().any(|g| g.inputs.contains(wire));
        if outputs.contains(wire.as_str()) || !consumed {
            continue;
        }
        if rng.random::<f64>() >= p {
            continue;
        }
        for b in out.gates[i].table.iter_mut() {
            *b = !*b;
        }
        for g in out.gates.iter_mut() {
            let k = g.k();
            for pos in 0..k {
                if g.inputs[pos] == *wire {
                    let mask = 1 << (k - 1 - pos);
                    g.table = (0..g.table.len()).map(|x| g.table[x ^ mask]).collect();
                }
            }
        }
    }
    out
}

impl AliceSession<'_> {
    /// Alice's side of a circuit run: one batch per layer.
    pub fn evaluate_circuit(&mut self, circuit: &Circuit) -> Result<(), EngineError> {
        let prepared = circuit.validate().and_then(|layers| {
            let mut plans: HashMap<Vec<bool>, GkPlan> = HashMap::new();
            for g in circuit.gates.iter().filter(|g| g.k() > 1) {
                if !plans.contains_key(&g.table) {
                    plans.insert(g.table.clone(), GkPlan::new(g.spec()?)?);
                }
            }
            Ok((layers, plans))
        });
        let (layers, plans) = match prepared {
            Ok(p) => p,
            Err(e) => {
                let _ = self.abort(AbortCode::Internal, &e.to_string());
                return Err(e);
            }
        };
        for layer in layers {
            let mut targets = Vec::new();
            for &i in &layer {
                let g = &circuit.gates[i];
                if g.k() == 1 {
                    targets.push(GateG1::from_truth_table(g.table[0], g.table[1]));
                } else {
                    targets.extend(gk_slot_gates(&plans[&g.table], self.rng()));
                }
            }
            let batch = self.execute_batch(&targets)?;
            if let Some(&id) = batch.failed().first() {
                return Err(EngineError::TableExhausted { request_id: id });
            }
        }
        Ok(())
    }
}

impl BobSession<'_> {
    /// Bob's side: he feeds his own wire values forward between layers.
    pub fn evaluate_circuit(&mut self, shape: &CircuitShape, inputs: &[bool]) -> Result<Vec<bool>, EngineError> {
        let layers = shape.layers()?;
        if inputs.len() != shape.inputs.len() {
            return Err(err(format!("{} inputs given, {} expected", inputs.len(), shape.inputs.len())));
        }
        let mut values: HashMap<String, bool> = shape.inputs.iter().cloned().zip(inputs.iter().copied()).collect();
        for layer in layers {
            let mut slot_inputs = Vec::new();
            let mut spans = Vec::new();
            for &i in &layer {
                let g = &shape.gates[i];
                let bits: Vec<bool> = g.inputs.iter().map(|w| values[w]).collect();
                let (ins, inc) = gk_slot_inputs(bits.len(), &bits)?;
                spans.push((slot_inputs.len(), ins.len(), inc));
                slot_inputs.extend(ins);
            }
            let outs = self.execute_batch(&slot_inputs)?.require_outputs()?;
            for (&i, (start, len, inc)) in layer.iter().zip(spans) {
                let v = gk_combine(&outs[start..start + len], &inc);
                values.insert(shape.gates[i].output.clone(), v);
            }
        }
        Ok(shape.outputs.iter().map(|w| values[w]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CHAIN: &str = "input a\nb = id(a)\nc = not(b)  # middle\nd = id(c)\noutput d\n";

    #[test]
    fn parse_and_print() {
        let c = Circuit::parse(CHAIN).unwrap();
        assert_eq!(c.gates.len(), 3);
        assert_eq!(Circuit::parse(&c.to_string()).unwrap(), c);
        assert_eq!(c.evaluate_ideal(&[false]).unwrap(), vec![true]);
        let x = Circuit::parse("input a b\ny = 0110(a, b)\noutput y").unwrap();
        assert_eq!(x.evaluate_ideal(&[true, false]).unwrap(), vec![true]);
        assert_eq!(x.evaluate_ideal(&[true, true]).unwrap(), vec![false]);
    }

    #[test]
    fn invalid_circuits_rejected() {
        assert!(Circuit::parse("input a\na = not(a)\n").is_err());
        assert!(Circuit::parse("input a\nb = not(c)\n").is_err());
        assert!(Circuit::parse("input a\nb = not(c)\nc = not(b)\n").is_err());
        assert!(Circuit::parse("input a\nb = 011(a)\n").is_err());
        assert!(Circuit::parse("input a\noutput z\n").is_err());
    }

    #[test]
    fn layers_follow_depth() {
        let c = Circuit::parse("input a b\nx = not(a)\ny = id(b)\nz = 0001(x, y)\noutput z").unwrap();
        assert_eq!(c.shape().layers().unwrap(), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn padding_keeps_the_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Circuit::parse("input a b\nx = not(a)\ny = 0111(x, b)\nz = 0110(y, x)\noutput z").unwrap();
        for _ in 0..200 {
            let r = randomize_circuit(&c, &mut rng);
            for x in 0..4 {
                let ins = [x & 1 != 0, x & 2 != 0];
                assert_eq!(r.evaluate_ideal(&ins).unwrap(), c.evaluate_ideal(&ins).unwrap());
            }
        }
        let same = randomize_circuit_with_probability(&c, 0.0, &mut rng);
        assert_eq!(same, c);
    }

    #[test]
    fn padded_identity_wire() {
        let c = Circuit::parse("input a\nb = id(a)\nc = id(b)\noutput c").unwrap();
        let always = randomize_circuit_with_probability(&c, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(always.gates[0].table, vec![true, false]);
        assert_eq!(always.gates[1].table, vec![true, false]);
        for a in [false, true] {
            assert_eq!(always.evaluate_ideal(&[a]).unwrap(), vec![a]);
        }
    }

    #[test]
    fn intermediate_wires_are_unbiased() {
        let c = Circuit::parse(CHAIN).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let (mut b1, mut c1) = (0, 0);
        for _ in 0..n {
            let r = randomize_circuit(&c, &mut rng);
            let v = r.wire_values(&[true]).unwrap();
            assert_eq!(r.evaluate_ideal(&[true]).unwrap(), vec![false]);
            b1 += usize::from(v["b"]);
            c1 += usize::from(v["c"]);
        }
        for ones in [b1, c1] {
            assert!((ones as f64 / n as f64 - 0.5).abs() < 0.02);
        }
    }
}
