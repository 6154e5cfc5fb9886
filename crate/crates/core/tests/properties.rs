use std::time::Duration;

use otp_core::engine::ExecOptions;
use otp_core::qsim::{build_gate_density, GateG1, PauliString, Pauli};
use otp_core::security::{ChshAccumulator, ChshEstimate};
use otp_core::tabler::{
    match_coincidences, read_table, write_table, DetectionEvent, LineRecordAlice, LineRecordBob, LineStatus, Party,
    SharedTable, SharedTableAlice, SharedTableBob,
};
use otp_core::wire::{
    decode_frame, decode_message, encode_message, run_loopback, AliceScript, AliceStep, BobScript, BobStep,
    LineRange, ProposeBatch, Proposal, Response, RespondBatch, Reveal, RevealBatch, StepOutcome, Transport,
    WireMessage,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GATES: [GateG1; 4] = [GateG1::Const0, GateG1::Const1, GateG1::Id, GateG1::Not];
const STATUSES: [LineStatus; 4] = [
    LineStatus::Available,
    LineStatus::Proposed,
    LineStatus::Consumed,
    LineStatus::Deleted,
];

fn gate() -> impl Strategy<Value = GateG1> {
    (0usize..4).prop_map(|i| GATES[i])
}

fn party() -> impl Strategy<Value = Party> {
    any::<bool>().prop_map(|b| if b { Party::Alice } else { Party::Bob })
}

fn message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (any::<u32>(), any::<[u8; 32]>()).prop_map(|(round, digest)| WireMessage::TableDigest { round, digest }),
        (party(), prop::collection::vec(any::<i64>(), 0..30))
            .prop_map(|(party, timestamps)| WireMessage::DetectionDigest { party, timestamps }),
        prop::collection::vec(any::<u64>(), 0..30).prop_map(|bob_indices| WireMessage::CoincConfirm { bob_indices }),
        (
            any::<bool>(),
            any::<u32>(),
            prop::collection::vec((any::<u64>(), any::<u64>()), 0..20),
            prop::collection::vec((any::<u64>(), any::<u32>()), 0..5),
            prop::collection::vec(any::<u64>(), 0..5)
        )
            .prop_map(|(more, round, p, d, exhausted)| WireMessage::ProposeBatch(ProposeBatch {
                more,
                round,
                proposals: p
                    .into_iter()
                    .map(|(request_id, line_id)| Proposal { request_id, line_id })
                    .collect(),
                deleted: d.into_iter().map(|(start, len)| LineRange { start, len }).collect(),
                exhausted,
            })),
        (any::<bool>(), any::<u32>(), prop::collection::vec((any::<u64>(), any::<u64>(), any::<bool>()), 0..20))
            .prop_map(|(more, round, r)| WireMessage::RespondBatch(RespondBatch {
                more,
                round,
                responses: r
                    .into_iter()
                    .map(|(request_id, line_id, accept)| Response {
                        request_id,
                        line_id,
                        accept
                    })
                    .collect(),
            })),
        (any::<bool>(), any::<u32>(), prop::collection::vec((any::<u64>(), any::<bool>()), 0..20)).prop_map(
            |(more, round, r)| WireMessage::RevealBatch(RevealBatch {
                more,
                round,
                reveals: r.into_iter().map(|(request_id, pad)| Reveal { request_id, pad }).collect(),
            })
        ),
        prop::collection::vec(any::<u8>(), 0..100).prop_map(WireMessage::SignSubmit),
    ]
}

fn events(max: usize) -> impl Strategy<Value = Vec<DetectionEvent>> {
    prop::collection::vec(0i64..2_000_000, 0..max).prop_map(|mut ts| {
        ts.sort_unstable();
        ts.into_iter()
            .map(|timestamp| DetectionEvent {
                timestamp,
                channel: 0,
                party: Party::Alice,
                multi_photon: false,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn message_round_trip(sid in any::<u64>(), msg in message()) {
        let bytes = encode_message(sid, &msg).unwrap();
        prop_assert_eq!(decode_message(&bytes).unwrap(), (sid, msg));
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_message(&bytes);
        let _ = decode_frame(&bytes);
    }

    #[test]
    fn damaged_frames_are_rejected(sid in any::<u64>(), msg in message(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = encode_message(sid, &msg).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_message(&bytes).is_err());
    }

    #[test]
    fn table_file_round_trip(seed in any::<u64>(), rows in prop::collection::vec((gate(), any::<bool>(), any::<bool>(), 0usize..4), 0..200)) {
        let a = SharedTable::new(seed, rows.iter().enumerate().map(|(i, r)| LineRecordAlice {
            line_id: i as u64,
            gate: r.0,
            status: STATUSES[r.3],
        }).collect()).unwrap();
        let b = SharedTable::new(seed, rows.iter().enumerate().map(|(i, r)| LineRecordBob {
            line_id: i as u64,
            input: r.1,
            output: r.2,
            status: STATUSES[r.3],
        }).collect()).unwrap();
        let wa = write_table(&a);
        let wb = write_table(&b);
        let ra: SharedTableAlice = read_table(&wa).unwrap();
        let rb: SharedTableBob = read_table(&wb).unwrap();
        prop_assert_eq!(write_table(&ra), wa);
        prop_assert_eq!(write_table(&rb), wb);
        prop_assert_eq!(ra.status_digest(), rb.status_digest());
    }

    #[test]
    fn status_moves_follow_the_lifecycle(moves in prop::collection::vec((0u64..5, 0usize..4), 0..40)) {
        let mut t = SharedTableAlice::from_gates(0, [GateG1::Id; 5]);
        for (id, s) in moves {
            let before = t.status(id).unwrap();
            let next = STATUSES[s];
            let r = t.set_status(id, next);
            let allowed = matches!(
                (before, next),
                (LineStatus::Available, LineStatus::Proposed)
                    | (LineStatus::Available, LineStatus::Deleted)
                    | (LineStatus::Proposed, LineStatus::Consumed)
                    | (LineStatus::Proposed, LineStatus::Deleted)
            );
            prop_assert_eq!(r.is_ok(), allowed, "{:?} -> {:?}", before, next);
            prop_assert_eq!(t.status(id).unwrap(), if allowed { next } else { before });
        }
    }

    #[test]
    fn matching_is_symmetric(alice in events(60), bob in events(60), offset in -1000i64..1000, window in 1i64..3000) {
        let bob: Vec<DetectionEvent> = bob.into_iter().map(|e| DetectionEvent { party: Party::Bob, ..e }).collect();
        let fwd: Vec<(usize, usize)> = match_coincidences(&alice, &bob, &offset, window)
            .iter()
            .map(|c| (c.alice, c.bob))
            .collect();
        let mut back: Vec<(usize, usize)> = match_coincidences(&bob, &alice, &(-offset), window)
            .iter()
            .map(|c| (c.bob, c.alice))
            .collect();
        back.sort_unstable();
        let mut f = fwd.clone();
        f.sort_unstable();
        prop_assert_eq!(f, back);
        // One-to-one, inside the window.
        let mut seen_b: Vec<usize> = fwd.iter().map(|p| p.1).collect();
        seen_b.sort_unstable();
        seen_b.dedup();
        prop_assert_eq!(seen_b.len(), fwd.len());
        for (a, b) in fwd {
            prop_assert!((bob[b].timestamp - alice[a].timestamp - offset).abs() <= window);
        }
    }

    #[test]
    fn chsh_ignores_line_order(rows in prop::collection::vec((gate(), any::<bool>(), any::<bool>()), 40..200), seed in any::<u64>()) {
        let est = |rows: &[(GateG1, bool, bool)]| -> Option<ChshEstimate> {
            let mut acc = ChshAccumulator::default();
            for &(g, x, o) in rows {
                acc.add(g, x, o);
            }
            acc.finish().ok()
        };
        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(est(&rows), est(&shuffled));
    }

    #[test]
    fn anticommutation_counts_xz_pairs(a in prop::collection::vec(0usize..3, 1..7), b_seed in any::<u64>()) {
        use rand::Rng;
        let letters = [Pauli::I, Pauli::X, Pauli::Z];
        let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
        let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let pa = PauliString::new(a.iter().map(|&i| letters[i]).collect());
        let pb = PauliString::new(b.iter().map(|&i| letters[i]).collect());
        let odd = a.iter().zip(&b).filter(|(&x, &y)| (x == 1 && y == 2) || (x == 2 && y == 1)).count() % 2 == 1;
        let (ma, mb) = (pa.matrix(), pb.matrix());
        let anti = (&ma * &mb + &mb * &ma).iter().all(|z| z.norm() < 1e-12);
        prop_assert_eq!(anti, odd);
    }

    #[test]
    fn gate_densities_are_valid(k in 1usize..=3, bits in any::<u8>()) {
        let tt: Vec<bool> = (0..1usize << k).map(|i| bits >> i & 1 == 1).collect();
        let gd = build_gate_density(k, &tt).unwrap();
        prop_assert!(gd.rho.validate().is_ok());
        prop_assert!((gd.rho.trace().re - 1.0).abs() < 1e-10);
        prop_assert!(gd.rho.min_eigenvalue() >= -1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn latency_never_reorders(count in 1usize..40, jitter_us in 0u64..3000, seed in any::<u64>()) {
        let (a, b) = Transport::memory_pair();
        let mut a = a.with_latency(Duration::from_micros(200), Duration::from_micros(jitter_us), seed);
        let mut b = b;
        for i in 0..count {
            a.sink.send_frame(vec![i as u8]).unwrap();
        }
        for i in 0..count {
            prop_assert_eq!(b.source.recv_frame().unwrap(), vec![i as u8]);
        }
    }

    #[test]
    fn batches_keep_tables_aligned(
        rows in prop::collection::vec((gate(), any::<bool>()), 100..600),
        work in prop::collection::vec((gate(), any::<bool>()), 1..60),
        seed in any::<u64>(),
    ) {
        let mut a = SharedTableAlice::from_gates(1, rows.iter().map(|r| r.0));
        let mut b = SharedTableBob::from_pairs(1, rows.iter().map(|&(g, x)| (x, g.eval(x))));
        let sa = AliceScript {
            session_id: 1,
            seed,
            options: ExecOptions::default(),
            steps: vec![AliceStep::Gates(work.iter().map(|w| w.0).collect())],
        };
        let sb = BobScript {
            session_id: 1,
            options: ExecOptions::default(),
            steps: vec![BobStep::Inputs(work.iter().map(|w| w.1).collect())],
        };
        let (ra, rb) = run_loopback(&mut a, &sa, &mut b, &sb);
        prop_assert!(ra.is_ok() && rb.is_ok());
        prop_assert_eq!(a.status_digest(), b.status_digest());
        prop_assert_eq!(a.count(LineStatus::Proposed), 0);
        let StepOutcome::Outputs { outputs, .. } = &rb.outcomes[0] else { panic!() };
        let done = outputs.iter().filter(|o| o.is_some()).count();
        prop_assert_eq!(a.count(LineStatus::Consumed), done);
        for (o, &(g, x)) in outputs.iter().zip(&work) {
            if let Some(o) = o {
                prop_assert_eq!(*o, g.eval(x));
            }
        }
    }
}
