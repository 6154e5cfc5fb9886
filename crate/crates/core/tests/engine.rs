use std::time::{Duration, Instant};

use otp_core::engine::{BatchMode, Circuit, ExecOptions, GkGateSpec};
use otp_core::qsim::{GateG1, NoiseModel, QuantumChannel, IDEAL_SUCCESS};
use otp_core::tabler::{LineStatus, SharedTableAlice, SharedTableBob, TableGenerator};
use otp_core::wire::{
    decode_message, run_loopback, run_pair, AbortCode, AliceScript, AliceStep, BobScript, BobStep, Direction, Link,
    ProposeBatch, RevealBatch, SessionError, StepOutcome, Transport, WireMessage,
};
use otp_core::engine::{AliceSession, EngineError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GATES: [GateG1; 4] = [GateG1::Const0, GateG1::Const1, GateG1::Id, GateG1::Not];

/// Uniform gates and inputs with Bob's output always equal to the gate's.
fn perfect_tables(n: usize, seed: u64) -> (SharedTableAlice, SharedTableBob) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<(GateG1, bool)> = (0..n).map(|_| (GATES[rng.random_range(0..4)], rng.random())).collect();
    (
        SharedTableAlice::from_gates(seed, rows.iter().map(|r| r.0)),
        SharedTableBob::from_pairs(seed, rows.iter().map(|&(g, x)| (x, g.eval(x)))),
    )
}

fn ideal_tables(n: usize, seed: u64) -> (SharedTableAlice, SharedTableBob) {
    let (a, b, _) = TableGenerator::new(QuantumChannel::new(NoiseModel::ideal()))
        .generate(n, seed)
        .unwrap();
    (a, b)
}

fn scripts(options: ExecOptions, alice: Vec<AliceStep>, bob: Vec<BobStep>) -> (AliceScript, BobScript) {
    (
        AliceScript {
            session_id: 7,
            seed: 1234,
            options,
            steps: alice,
        },
        BobScript {
            session_id: 7,
            options,
            steps: bob,
        },
    )
}

fn outputs(o: &StepOutcome) -> Vec<Option<bool>> {
    match o {
        StepOutcome::Outputs { outputs, .. } => outputs.clone(),
        o => panic!("not a batch: {o:?}"),
    }
}

#[test]
fn loopback_batch_on_a_perfect_table_is_exact() {
    let (mut a, mut b) = perfect_tables(4000, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let targets: Vec<GateG1> = (0..300).map(|_| GATES[rng.random_range(0..4)]).collect();
    let inputs: Vec<bool> = (0..300).map(|_| rng.random()).collect();
    let (sa, sb) = scripts(
        ExecOptions::default(),
        vec![AliceStep::Hello, AliceStep::Gates(targets.clone())],
        vec![BobStep::Hello, BobStep::Inputs(inputs.clone())],
    );
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok(), "{:?} {:?}", ra.error, rb.error);
    let got = outputs(&rb.outcomes[1]);
    for ((g, x), o) in targets.iter().zip(&inputs).zip(got) {
        assert_eq!(o, Some(g.eval(*x)));
    }
    assert_eq!(a.status_digest(), b.status_digest());
    assert_eq!(a.count(LineStatus::Proposed), 0);
    // Declined lines are deleted, so only accepted ones end up consumed.
    assert_eq!(a.count(LineStatus::Consumed), 300);
}

#[test]
fn one_gate_takes_three_frames() {
    // Every line holds the target or its opposite, and Bob's input matches
    // everywhere, so the first proposal is accepted.
    let gates = (0..16).map(|i| if i % 2 == 0 { GateG1::Not } else { GateG1::Id });
    let mut a = SharedTableAlice::from_gates(5, gates.clone());
    let mut b = SharedTableBob::from_pairs(5, gates.map(|g| (true, g.eval(true))));
    let (sa, sb) = scripts(
        ExecOptions::default(),
        vec![AliceStep::Gates(vec![GateG1::Not])],
        vec![BobStep::Inputs(vec![true])],
    );
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok());
    assert_eq!(outputs(&rb.outcomes[0]), vec![Some(false)]);
    let kinds: Vec<_> = ra
        .transcript
        .frames
        .iter()
        .map(|f| (f.direction, decode_message(&f.bytes).unwrap().1.message_type()))
        .collect();
    assert_eq!(kinds.len(), 3, "{kinds:?}");
    assert_eq!(kinds[0].0, Direction::Sent);
    assert_eq!(kinds[1].0, Direction::Received);
    assert_eq!(kinds[2].0, Direction::Sent);
}

#[test]
fn reveal_out_of_order_is_a_protocol_violation() {
    let (mut a, _) = perfect_tables(100, 3);
    let (ta, tb) = Transport::memory_pair();
    let mut alice_link = Link::new(ta, 9);
    let mut rogue = Link::new(tb, 9);
    let h = std::thread::spawn(move || {
        let first = rogue.recv().unwrap();
        assert!(matches!(first, WireMessage::ProposeBatch(_)));
        rogue
            .send(&WireMessage::RevealBatch(RevealBatch {
                more: false,
                round: 1,
                reveals: vec![],
            }))
            .unwrap();
        rogue.recv().unwrap()
    });
    let err = {
        let mut s = AliceSession::new(&mut a, &mut alice_link, 1, ExecOptions::default());
        s.execute_batch(&[GateG1::Id]).unwrap_err()
    };
    assert!(matches!(err, EngineError::Protocol(_)), "{err:?}");
    match h.join().unwrap() {
        WireMessage::Abort { code, .. } => assert_eq!(code, AbortCode::ProtocolViolation),
        m => panic!("{m:?}"),
    }
}

#[test]
fn bob_rejects_a_proposal_for_a_consumed_line() {
    let (_, mut b) = perfect_tables(100, 3);
    b.set_status(0, LineStatus::Proposed).unwrap();
    b.set_status(0, LineStatus::Consumed).unwrap();
    let (ta, tb) = Transport::memory_pair();
    let mut rogue = Link::new(ta, 9);
    let h = std::thread::spawn(move || {
        let mut bob_link = Link::new(tb, 9);
        let mut s = otp_core::engine::BobSession::new(&mut b, &mut bob_link, ExecOptions::default());
        s.execute_batch(&[false]).unwrap_err()
    });
    rogue
        .send(&WireMessage::ProposeBatch(ProposeBatch {
            round: 1,
            proposals: vec![otp_core::wire::Proposal {
                request_id: 0,
                line_id: 0,
            }],
            ..ProposeBatch::default()
        }))
        .unwrap();
    let err = h.join().unwrap();
    assert!(matches!(err, EngineError::Protocol(_)), "{err:?}");
    match rogue.recv().unwrap() {
        WireMessage::Abort { code, .. } => assert_eq!(code, AbortCode::ProtocolViolation),
        m => panic!("{m:?}"),
    }
}

#[test]
fn digests_checked_after_every_round() {
    let (mut a, mut b) = perfect_tables(20_000, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1000;
    let targets: Vec<GateG1> = (0..n).map(|_| GATES[rng.random_range(0..4)]).collect();
    let inputs: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let opts = ExecOptions {
        verify_digests: true,
        ..ExecOptions::default()
    };
    let (sa, sb) = scripts(opts, vec![AliceStep::Gates(targets)], vec![BobStep::Inputs(inputs)]);
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok(), "{:?} {:?}", ra.error, rb.error);
    let digests = ra
        .transcript
        .frames
        .iter()
        .filter(|f| matches!(decode_message(&f.bytes).unwrap().1, WireMessage::TableDigest { .. }))
        .count();
    let rounds = match ra.outcomes[0] {
        StepOutcome::Served { rounds, .. } => rounds as usize,
        _ => unreachable!(),
    };
    // One sent and one received per round.
    assert!(digests >= 2 * rounds, "{digests} digests over {rounds} rounds");
    assert_eq!(a.status_digest(), b.status_digest());
}

#[test]
fn single_request_rounds_and_line_use() {
    // L = 1: Bob accepts each proposal with probability 1/2, so the round
    // count is geometric with mean 2; each proposal scans 4 lines on average.
    let gates = 2000;
    let (mut a, mut b) = perfect_tables(30_000, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut asteps = Vec::new();
    let mut bsteps = Vec::new();
    for _ in 0..gates {
        asteps.push(AliceStep::Gates(vec![GATES[rng.random_range(0..4)]]));
        bsteps.push(BobStep::Inputs(vec![rng.random()]));
    }
    let (sa, sb) = scripts(ExecOptions::default(), asteps, bsteps);
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok());
    let total: u32 = rb
        .outcomes
        .iter()
        .map(|o| match o {
            StepOutcome::Outputs { rounds, .. } => *rounds,
            _ => unreachable!(),
        })
        .sum();
    let mean = total as f64 / gates as f64;
    // sd of the geometric is sqrt(2), so the standard error is 0.032.
    assert!((mean - 2.0).abs() < 0.13, "mean rounds {mean}");
    let used = a.len() - a.count(LineStatus::Available);
    // Lines before the final accepted one are touched; the mean is close to 8.
    let per_gate = used as f64 / gates as f64;
    assert!((per_gate - 8.0).abs() < 0.6, "{per_gate} lines per gate");
}

#[test]
fn end_to_end_success_on_ideal_table() {
    let n = 20_000;
    let (mut a, mut b) = ideal_tables(8 * n + 20_000, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets: Vec<GateG1> = (0..n).map(|_| GATES[rng.random_range(0..4)]).collect();
    let inputs: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let (sa, sb) = scripts(
        ExecOptions::default(),
        vec![AliceStep::Gates(targets.clone())],
        vec![BobStep::Inputs(inputs.clone())],
    );
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok());
    let got = outputs(&rb.outcomes[0]);
    let ok = got
        .iter()
        .zip(targets.iter().zip(&inputs))
        .filter(|(o, (g, &x))| **o == Some(g.eval(x)))
        .count();
    let rate = ok as f64 / n as f64;
    assert!((rate - IDEAL_SUCCESS).abs() < 0.01, "{rate}");
}

fn run_circuit_trials(text: &str, inputs: &[bool], trials: usize, seed: u64) -> Vec<Vec<bool>> {
    let c = Circuit::parse(text).unwrap();
    let slots: usize = c.gates.iter().map(|g| (1usize << g.k()) - 1).sum();
    let (mut a, mut b) = ideal_tables(trials * slots * 9 + 10_000, seed);
    let (sa, sb) = scripts(
        ExecOptions::default(),
        vec![AliceStep::Circuit(c.clone()); trials],
        vec![
            BobStep::Circuit {
                shape: c.shape(),
                inputs: inputs.to_vec(),
            };
            trials
        ],
    );
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok(), "{:?} {:?}", ra.error, rb.error);
    rb.outcomes
        .into_iter()
        .map(|o| match o {
            StepOutcome::Circuit(v) => v,
            o => panic!("{o:?}"),
        })
        .collect()
}

#[test]
fn two_gate_chain_both_correct_at_ps_squared() {
    let trials = 4000;
    let outs = run_circuit_trials("input a\nw = not(a)\ny = not(w)\noutput w y\n", &[false], trials, 10);
    let both = outs.iter().filter(|v| v[0] && !v[1]).count() as f64 / trials as f64;
    let want = IDEAL_SUCCESS * IDEAL_SUCCESS;
    // se = sqrt(0.73 * 0.27 / 4000) = 0.007
    assert!((both - want).abs() < 0.028, "{both} vs {want}");
}

#[test]
fn constant_chain_ignores_the_input() {
    let trials = 3000;
    for x in [false, true] {
        let outs = run_circuit_trials("input a\nw = const0(a)\ny = const0(w)\noutput y\n", &[x], trials, 11);
        let zero = outs.iter().filter(|v| !v[0]).count() as f64 / trials as f64;
        assert!((zero - IDEAL_SUCCESS).abs() < 0.026, "input {x}: {zero}");
    }
}

#[test]
fn k2_table_mode_matches_simulation() {
    let spec = GkGateSpec::from_bits("0110").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sim_n = 20_000;
    let sim_ok = (0..sim_n)
        .filter(|_| {
            let x = [rng.random(), rng.random()];
            otp_core::engine::simulate_gk(&spec, &x, &mut rng).unwrap() == spec.eval(&x)
        })
        .count() as f64
        / sim_n as f64;
    assert!((sim_ok - 0.75).abs() < 0.012, "simulation {sim_ok}");

    let trials = 3000;
    let (mut a, mut b) = ideal_tables(trials * 3 * 9 + 10_000, 13);
    let xs: Vec<Vec<bool>> = (0..trials).map(|_| vec![rng.random(), rng.random()]).collect();
    let (sa, sb) = scripts(
        ExecOptions::default(),
        vec![AliceStep::Gk(spec.clone()); trials],
        xs.iter().map(|x| BobStep::Gk { k: 2, x: x.clone() }).collect(),
    );
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok());
    let ok = rb
        .outcomes
        .iter()
        .zip(&xs)
        .filter(|(o, x)| **o == StepOutcome::Gk(spec.eval(x)))
        .count() as f64
        / trials as f64;
    let se = (0.75f64 * 0.25 / trials as f64).sqrt() + (0.75f64 * 0.25 / sim_n as f64).sqrt();
    assert!((ok - sim_ok).abs() < 3.0 * se, "table {ok} vs simulation {sim_ok}");
}

#[test]
fn constant_round_mode_finishes_fast() {
    let n = 512;
    let opts = ExecOptions {
        mode: BatchMode::ConstantRound { c: 1.0 },
        ..ExecOptions::default()
    };
    let k = opts.mode.candidates(n);
    let (mut a, mut b) = perfect_tables(n * k * 5, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let targets: Vec<GateG1> = (0..n).map(|_| GATES[rng.random_range(0..4)]).collect();
    let inputs: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let (sa, sb) = scripts(opts, vec![AliceStep::Gates(targets.clone())], vec![BobStep::Inputs(inputs.clone())]);
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok(), "{:?} {:?}", ra.error, rb.error);
    match &rb.outcomes[0] {
        StepOutcome::Outputs { outputs, rounds } => {
            assert!(*rounds <= 3, "{rounds} rounds");
            for ((g, x), o) in targets.iter().zip(&inputs).zip(outputs) {
                assert_eq!(*o, Some(g.eval(*x)));
            }
        }
        o => panic!("{o:?}"),
    }
    assert_eq!(a.status_digest(), b.status_digest());
}

#[test]
fn exhaustion_is_reported_not_hidden() {
    let (mut a, mut b) = perfect_tables(40, 16);
    let (sa, sb) = scripts(
        ExecOptions::default(),
        vec![AliceStep::Gates(vec![GateG1::Id; 50])],
        vec![BobStep::Inputs(vec![false; 50])],
    );
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(ra.is_ok() && rb.is_ok());
    match (&ra.outcomes[0], &rb.outcomes[0]) {
        (StepOutcome::Served { failed, .. }, StepOutcome::Outputs { outputs, .. }) => {
            assert!(!failed.is_empty());
            assert_eq!(failed.len(), outputs.iter().filter(|o| o.is_none()).count());
        }
        o => panic!("{o:?}"),
    }
    assert_eq!(a.status_digest(), b.status_digest());
}

#[test]
fn latency_adds_one_round_trip_per_round() {
    let one_way = Duration::from_millis(20);
    let n = 500;
    let (mut a, mut b) = perfect_tables(n * 12, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let targets: Vec<GateG1> = (0..n).map(|_| GATES[rng.random_range(0..4)]).collect();
    let inputs: Vec<bool> = (0..n).map(|_| rng.random()).collect();
    let (sa, sb) = scripts(ExecOptions::default(), vec![AliceStep::Gates(targets)], vec![BobStep::Inputs(inputs)]);
    let (ta, tb) = Transport::memory_pair();
    let ta = ta.with_latency(one_way, Duration::ZERO, 1);
    let tb = tb.with_latency(one_way, Duration::ZERO, 2);
    let start = Instant::now();
    let (ra, rb) = run_pair(&mut a, &sa, ta, &mut b, &sb, tb);
    let wall = start.elapsed();
    assert!(ra.is_ok() && rb.is_ok());
    let rounds = match rb.outcomes[0] {
        StepOutcome::Outputs { rounds, .. } => rounds,
        _ => unreachable!(),
    };
    let rtt = 2 * one_way;
    let floor = rtt * rounds;
    assert!(wall >= floor, "{wall:?} < {floor:?}");
    assert!(wall < floor + rtt + Duration::from_secs(2), "{wall:?} for {rounds} rounds");
}

#[test]
fn aborted_session_reports_code() {
    let (mut a, _) = perfect_tables(100, 19);
    let (_, mut b) = perfect_tables(100, 20);
    let (sa, sb) = scripts(ExecOptions::default(), vec![AliceStep::Hello], vec![BobStep::Hello]);
    let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
    assert!(matches!(ra.error, Some(SessionError::Engine(EngineError::Aborted { .. }))));
    assert_eq!(rb.error.unwrap().abort_code(), Some(AbortCode::TableMismatch));
}
