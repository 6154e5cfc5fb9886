use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};
use std::thread;

use serde_json::Value;

fn otp(args: &[&str]) -> Output {
    otp_env(args, &[])
}

fn otp_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_otp"));
    c.args(args);
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("run otp")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn num(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or_else(|| panic!("{key} missing in {v}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn threshold_analysis_finds_the_optimum() {
    let out = otp(&["analyze", "threshold", "--N", "1000", "--m", "224", "--p", "0.831"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["schema"], 1);
    assert!((num(&v, "tau_star") - 0.776).abs() < 0.0015, "{v}");
    assert!((num(&v, "honest") - 0.9987).abs() < 0.002, "{v}");
    assert!((num(&v, "cheat") - 0.0011).abs() < 0.0005, "{v}");
    let with_curve = json(&otp(&["analyze", "threshold", "--N", "50", "--m", "4", "--curve"]));
    assert_eq!(with_curve["curve"].as_array().unwrap().len(), 51);
}

#[test]
fn generated_tables_pass_a_bell_test() {
    let dir = tempfile::tempdir().unwrap();
    let d = s(dir.path());
    let g = otp(&[
        "--noise", "v0.955", "--table", d, "table", "generate", "--duration", "10", "--rate", "10000",
    ]);
    assert_eq!(code(&g), 0, "{}", String::from_utf8_lossy(&g.stderr));
    let gv = json(&g);
    assert!(num(&gv, "lines") > 80_000.0, "{gv}");
    assert!(num(&gv, "estimated_offset_ns").abs() < 0.1, "{gv}");
    let b = otp(&["--table", d, "bell-test", "--lines", "5000"]);
    assert_eq!(code(&b), 0);
    let bv = json(&b);
    // Standard error at 5000 lines is about 0.04.
    assert!((num(&bv, "s") - 2.70).abs() < 0.15, "{bv}");
    assert_eq!(bv["verdict"], "pass");
    // The test lines are spent and saved back.
    assert_eq!(num(&bv, "lines_left"), num(&gv, "lines") - 5000.0);
    let again = json(&otp(&["--table", d, "bell-test", "--lines", "5000"]));
    assert_eq!(num(&again, "lines_left"), num(&gv, "lines") - 10_000.0);
}

#[test]
fn failed_bell_test_aborts_with_code_2() {
    let out = otp(&["--noise", "v0.936", "bell-test", "--lines", "2000", "--threshold", "2.95"]);
    assert_eq!(code(&out), 2);
    assert_eq!(json(&out)["verdict"], "abort");
}

#[test]
fn not_gate_frequency_matches_the_ideal_success() {
    let out = otp(&["exec", "gate", "--gate", "not", "--input", "0", "--repeat", "4000"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["expected"], 1);
    // sqrt(p(1-p)/4000) = 0.0056.
    assert!((num(&v, "frequency_one") - 0.853553).abs() < 0.02, "{v}");
    let one = json(&otp(&["exec", "gate", "--gate", "not", "--input", "0"]));
    assert!(one["output"] == 0 || one["output"] == 1);
}

#[test]
fn gk_gate_in_table_and_density_modes_agree() {
    let base = ["exec", "gk", "--k", "2", "--truth-table", "0110", "--input", "10", "--repeat", "3000"];
    let table = json(&otp(&base));
    let mut sim_args = base.to_vec();
    sim_args.push("--simulate");
    let sim = json(&otp(&sim_args));
    let (a, b) = (num(&table, "success_rate"), num(&sim, "success_rate"));
    assert!((a - b).abs() < 0.04, "{a} vs {b}");
    assert_eq!(code(&otp(&["exec", "gk", "--k", "3", "--truth-table", "0110", "--input", "10"])), 64);
}

#[test]
fn circuit_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    std::fs::write(&path, "input a\nw = not(a)\noutput w\n").unwrap();
    let out = otp(&["exec", "circuit", "--file", s(&path), "--input", "0", "--repeat", "500"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["expected"], "1");
    assert!((num(&v, "all_correct_rate") - 0.853553).abs() < 0.06, "{v}");
    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "input a\noutput nowhere\n").unwrap();
    assert_eq!(code(&otp(&["exec", "circuit", "--file", s(&bad), "--input", "0"])), 65);
}

#[test]
fn same_seed_same_bytes() {
    let args = ["--seed", "11", "--noise", "v0.936", "exec", "gate", "--gate", "id", "--input", "1", "--repeat", "300"];
    let a = otp(&args);
    let b = otp(&args);
    assert_eq!(a.stdout, b.stdout);
    let mut other = args.to_vec();
    other[1] = "12";
    assert_ne!(otp(&other).stdout, a.stdout);
    let e1 = otp(&["--seed", "3", "eavesdrop", "--lines", "500", "--trials", "20"]);
    let e2 = otp(&["--seed", "3", "eavesdrop", "--lines", "500", "--trials", "20"]);
    assert_eq!(e1.stdout, e2.stdout);
    assert_eq!(json(&e1)["detection_rate"], 1.0);
}

#[test]
fn usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("otp.conf");
    std::fs::write(&conf, "seed = 4\ncolour = red\n").unwrap();
    let out = otp(&["--config", s(&conf), "analyze", "threshold"]);
    assert_eq!(code(&out), 64);
    assert_eq!(json(&out)["kind"], "usage");
    assert_eq!(code(&otp(&["bell-test", "--lines", "many"])), 64);
    assert_eq!(code(&otp(&["frobnicate"])), 64);
    assert_eq!(code(&otp(&["--noise", "loud", "analyze", "threshold"])), 64);
    assert_eq!(code(&otp(&["--help"])), 0);
    let missing = dir.path().join("nope");
    let out = otp(&["verify", "--signature-file", s(&missing), "--key", s(&missing)]);
    assert_eq!(code(&out), 74);
    assert_eq!(json(&out)["kind"], "io");
    assert_eq!(code(&otp(&["--table", s(&missing), "bell-test"])), 74);
    assert_eq!(code(&otp(&["--config", s(&missing), "analyze", "threshold"])), 74);
}

#[test]
fn settings_layer_file_env_flag() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("otp.conf");
    std::fs::write(&conf, "# test\nseed = 5\nnoise = v0.955\n").unwrap();
    let out_dir = dir.path().join("t");
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let mut args = vec!["--config", s(&conf)];
        args.extend_from_slice(extra);
        args.extend_from_slice(&["table", "generate", "--lines", "10", "--out", s(&out_dir)]);
        json(&otp_env(&args, env))
    };
    let v = run(&[], &[]);
    assert_eq!((v["seed"].as_u64(), v["noise"].as_str()), (Some(5), Some("v0.955")));
    assert_eq!(run(&[], &[("OTP_SEED", "6")])["seed"], 6);
    assert_eq!(run(&["--seed", "7"], &[("OTP_SEED", "6")])["seed"], 7);
    assert_eq!(run(&[], &[("OTP_NOT_A_KEY", "x")])["seed"], 5);
}

#[test]
fn sign_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let msg = dir.path().join("msg");
    let key = dir.path().join("key.otpt");
    let sig = dir.path().join("sig.otps");
    std::fs::write(&msg, b"pay 10 to carol").unwrap();
    let small = ["--N", "300", "--m", "32", "--tau", "0.7"];
    let mut args = vec!["--noise", "v0.936", "sign", "--message-file", s(&msg), "--key", s(&key), "--out", s(&sig)];
    args.extend_from_slice(&small);
    let out = otp(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert_eq!(v["accept"], true);
    assert!((num(&v, "mean_fraction") - 0.831).abs() < 0.02, "{v}");

    let ok = otp(&["verify", "--signature-file", s(&sig), "--key", s(&key), "--tau", "0.7"]);
    assert_eq!(code(&ok), 0);
    let strict = otp(&["verify", "--signature-file", s(&sig), "--key", s(&key), "--tau", "0.95"]);
    assert_eq!(code(&strict), 3);
    assert_eq!(json(&strict)["accept"], false);
    let other = dir.path().join("other");
    std::fs::write(&other, b"pay 10000 to carol").unwrap();
    let forged = otp(&[
        "verify", "--signature-file", s(&sig), "--key", s(&key), "--tau", "0.7", "--message-file", s(&other),
    ]);
    assert_eq!(code(&forged), 3);

    let mut bytes = std::fs::read(&sig).unwrap();
    bytes[30] ^= 4;
    let damaged = dir.path().join("damaged.otps");
    std::fs::write(&damaged, bytes).unwrap();
    assert_eq!(code(&otp(&["verify", "--signature-file", s(&damaged), "--key", s(&key)])), 65);

    // A signer whose tables are too noisy for the threshold is rejected.
    let mut args = vec!["--noise", "v0.936", "sign", "--message-file", s(&msg), "--N", "300", "--m", "32"];
    args.extend_from_slice(&["--tau", "0.9"]);
    assert_eq!(code(&otp(&args)), 3);
}

#[test]
fn histogram_over_small_signatures() {
    let out = otp(&["--noise", "v0.936", "analyze", "histogram", "--runs", "4", "--N", "400", "--m", "16"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["samples"], 64);
    assert!((num(&v, "mean") - 0.831).abs() < 0.015, "{v}");
}

#[test]
fn reconcile_event_files() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("ev");
    let g = json(&otp(&[
        "--noise", "v0.936", "table", "generate", "--duration", "1", "--events", "--offset-ns", "-2500", "--out", s(&ev),
    ]));
    assert!((num(&g, "estimated_offset_ns") + 2500.0).abs() < 0.1, "{g}");
    let out_dir = dir.path().join("rc");
    let r = otp(&[
        "table",
        "reconcile",
        "--alice-events",
        s(&ev.join("alice.otpe")),
        "--bob-events",
        s(&ev.join("bob.otpe")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&r), 0);
    let rv = json(&r);
    assert_eq!(rv["lines"], g["lines"]);
    assert_eq!(
        std::fs::read(out_dir.join("bob.otpt")).unwrap(),
        std::fs::read(ev.join("bob.otpt")).unwrap()
    );
    // Swapped files are caught.
    let swapped = otp(&[
        "table",
        "reconcile",
        "--alice-events",
        s(&ev.join("bob.otpe")),
        "--bob-events",
        s(&ev.join("alice.otpe")),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&swapped), 65);
}

fn free_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

/// Runs Alice and Bob as separate processes joined over TCP.
fn daemons(alice: &[&str], bob: &[&str]) -> (Output, Output) {
    let addr = free_port();
    let mut a = vec!["--role", "alice", "--listen", addr.as_str()];
    a.extend_from_slice(alice);
    let mut b = vec!["--role", "bob", "--connect", addr.as_str()];
    b.extend_from_slice(bob);
    let a: Vec<String> = a.iter().map(|x| x.to_string()).collect();
    let h = thread::spawn(move || otp(&a.iter().map(String::as_str).collect::<Vec<_>>()));
    let rb = otp(&b);
    (h.join().unwrap(), rb)
}

#[test]
fn daemons_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let (ad, bd) = (dir.path().join("a"), dir.path().join("b"));
    let (ga, gb) = daemons(
        &["--noise", "v0.936", "--table", s(&ad), "table", "generate", "--duration", "1"],
        &["--noise", "v0.936", "--table", s(&bd), "table", "generate", "--duration", "1"],
    );
    assert_eq!((code(&ga), code(&gb)), (0, 0), "{}", String::from_utf8_lossy(&gb.stdout));
    assert!(ad.join("alice.otpt").exists() && !ad.join("bob.otpt").exists());
    assert_eq!(json(&ga)["lines"], json(&gb)["lines"]);

    let (ea, eb) = daemons(
        &["--table", s(&ad), "exec", "gate", "--gate", "not", "--repeat", "400"],
        &["--table", s(&bd), "exec", "gate", "--input", "1", "--repeat", "400"],
    );
    assert_eq!((code(&ea), code(&eb)), (0, 0));
    let (va, vb) = (json(&ea), json(&eb));
    assert_eq!(vb["completed"], 400);
    assert_eq!(va["rounds"], vb["rounds"]);
    assert_eq!(va["lines_left"], vb["lines_left"]);
    // NOT on input 1 gives 0, so ones are the errors.
    assert!(num(&vb, "frequency_one") < 0.25, "{vb}");

    // Bell test across the saved halves, then a local run over both.
    let (ba, bb) = daemons(&["--table", s(&ad), "bell-test", "--lines", "1000"], &["--table", s(&bd), "bell-test"]);
    assert_eq!((code(&ba), code(&bb)), (0, 0));
    assert_eq!(json(&ba)["s"], json(&bb)["s"]);
    std::fs::copy(ad.join("alice.otpt"), bd.join("alice.otpt")).unwrap();
    let local = json(&otp(&["--table", s(&bd), "bell-test", "--lines", "1000"]));
    assert_eq!(local["verdict"], "pass");
}

#[test]
fn daemons_with_mismatched_tables_abort() {
    let (a, b) = daemons(
        &["--seed", "1", "exec", "gate", "--gate", "id"],
        &["--seed", "2", "exec", "gate", "--input", "0"],
    );
    assert_eq!((code(&a), code(&b)), (2, 2));
    assert_eq!(json(&b)["abort_code"], "TableMismatch");
}
