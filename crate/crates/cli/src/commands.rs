//! Subcommand bodies. Each returns a JSON report, a one-line summary for
//! stderr and the exit code.

use std::fmt;
use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use otp_core::engine::{simulate_gk, Circuit, EngineError, ExecOptions, GkGateSpec};
use otp_core::qsim::{GateG1, QuantumChannel};
use otp_core::security::{chsh_from_table, detection_trials, exact_chsh, AttackChannel, BellReport};
use otp_core::sig::{
    cheat_accept_probability, histogram_report, honest_accept_probability, optimize_threshold, verify, CheatModel,
    SigError, Signature, SignatureParams, SigningKey,
};
use otp_core::tabler::{
    load_events, run_pipeline, save_events, simulate_session, success_statistics, DetectionEvent, DriftModel, Party,
    SessionParams, SharedTableAlice, SharedTableBob, TableFileError, TableGenerator, TrackingParams, PS_PER_NS,
};
use otp_core::wire::{
    alice_reconcile, bob_reconcile, run_alice, run_bob, run_loopback, AbortCode, AliceScript, AliceStep, BobScript,
    BobStep, Link, SessionError, SessionRecord, StepOutcome, Transport, WireError, MAX_PAYLOAD,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::config::{Config, Role};
use crate::report::Report;
use crate::{
    BellArgs, CircuitArgs, EavesdropArgs, GateArgs, GenerateArgs, GkArgs, HistogramArgs, ReconcileArgs, SignArgs,
    ThresholdArgs, VerifyArgs,
};

const ALICE_FILE: &str = "alice.otpt";
const BOB_FILE: &str = "bob.otpt";
const CONNECT_WAIT: Duration = Duration::from_secs(30);
const READ_TIMEOUT: Duration = Duration::from_secs(120);
// Keeps key material and pads off the table seed.
const KEY_SALT: u64 = 0x6b65_7973;
const PAD_SALT: u64 = 0x7061_6473;
/// One daemon pair runs one session at a time, so a fixed id is enough;
/// mismatched tables are caught by HELLO rather than the frame layer.
const SESSION_ID: u64 = 1;

pub struct Output {
    pub report: Value,
    pub summary: String,
    pub exit: u8,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    /// A file or peer message that parsed but made no sense.
    Data(String),
    Abort { code: Option<AbortCode>, message: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Data(m) => f.write_str(m),
            CliError::Abort { message, .. } => f.write_str(message),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Data(_) => 65,
            CliError::Io(_) => 74,
            CliError::Abort { .. } => 2,
        }
    }

    pub fn report(&self) -> (Value, u8) {
        let mut r = Report::new("error");
        let kind = match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Io(_) => "io",
            CliError::Abort { .. } => "abort",
        };
        r.set("kind", kind).set("message", self.to_string());
        if let CliError::Abort { code: Some(c), .. } = self {
            r.set("abort_code", format!("{c:?}"));
        }
        (r.into_value(), self.exit_code())
    }
}

impl From<TableFileError> for CliError {
    fn from(e: TableFileError) -> Self {
        match e {
            TableFileError::Io(e) => CliError::Io(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        if let SessionError::Engine(EngineError::Wire(WireError::Io(m))) = &e {
            return CliError::Io(m.clone());
        }
        CliError::Abort {
            code: e.abort_code(),
            message: e.to_string(),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn read_file(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn bits(s: &str, what: &str) -> Result<Vec<bool>, CliError> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            _ => Err(CliError::Usage(format!("{what}: expected a string of 0 and 1, got {s:?}"))),
        })
        .collect()
}

fn bit_string(b: &[bool]) -> String {
    b.iter().map(|&x| if x { '1' } else { '0' }).collect()
}

fn output_dir(explicit: &Option<PathBuf>, cfg: &Config) -> Result<PathBuf, CliError> {
    let dir = explicit.clone().or_else(|| cfg.table.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

// ---- daemon links ----

fn daemon_transport(cfg: &Config) -> Result<Transport, CliError> {
    let stream = match cfg.role {
        Role::Alice => {
            let listener = TcpListener::bind(&cfg.listen).map_err(|e| CliError::Io(format!("{}: {e}", cfg.listen)))?;
            listener.accept().map_err(|e| CliError::Io(e.to_string()))?.0
        }
        Role::Bob => {
            let start = Instant::now();
            loop {
                match TcpStream::connect(&cfg.connect) {
                    Ok(s) => break s,
                    Err(e) if start.elapsed() > CONNECT_WAIT => {
                        return Err(CliError::Io(format!("{}: {e}", cfg.connect)));
                    }
                    Err(_) => thread::sleep(Duration::from_millis(50)),
                }
            }
        }
        Role::Local => unreachable!("local runs use an in-memory link"),
    };
    Transport::tcp(stream, MAX_PAYLOAD, Some(READ_TIMEOUT)).map_err(|e| CliError::Io(e.to_string()))
}

// ---- tables ----

/// Whichever halves this role holds, and where they came from.
struct Tables {
    alice: Option<SharedTableAlice>,
    bob: Option<SharedTableBob>,
    dir: Option<PathBuf>,
}

impl Tables {
    /// Loads the role's tables from the configured directory, or simulates a
    /// fresh pair of `fresh_lines` lines from the noise preset and seed. Every
    /// process given the same seed simulates the same pair.
    fn open(cfg: &Config, fresh_lines: usize) -> Result<Tables, CliError> {
        let (want_a, want_b) = (cfg.role != Role::Bob, cfg.role != Role::Alice);
        if let Some(dir) = &cfg.table {
            return Ok(Tables {
                alice: if want_a { Some(SharedTableAlice::load(&dir.join(ALICE_FILE))?) } else { None },
                bob: if want_b { Some(SharedTableBob::load(&dir.join(BOB_FILE))?) } else { None },
                dir: Some(dir.clone()),
            });
        }
        let (a, b, _) = TableGenerator::new(QuantumChannel::new(cfg.noise_model()))
            .generate(fresh_lines, cfg.seed)
            .map_err(usage)?;
        Ok(Tables {
            alice: want_a.then_some(a),
            bob: want_b.then_some(b),
            dir: None,
        })
    }

    /// Writes loaded tables back, so spent lines stay spent.
    fn save(&self) -> Result<(), CliError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        if let Some(a) = &self.alice {
            a.save(&dir.join(ALICE_FILE))?;
        }
        if let Some(b) = &self.bob {
            b.save(&dir.join(BOB_FILE))?;
        }
        Ok(())
    }

    fn available(&self) -> usize {
        use otp_core::tabler::LineStatus::Available;
        match (&self.alice, &self.bob) {
            (Some(a), _) => a.count(Available),
            (None, Some(b)) => b.count(Available),
            _ => 0,
        }
    }
}

struct Records {
    alice: Option<SessionRecord>,
    bob: Option<SessionRecord>,
}

impl Records {
    /// The error that ended the session, Alice's first.
    fn error(&mut self) -> Option<SessionError> {
        self.alice
            .as_mut()
            .and_then(|r| r.error.take())
            .or_else(|| self.bob.as_mut().and_then(|r| r.error.take()))
    }

    fn alice_outcomes(&self) -> &[StepOutcome] {
        self.alice.as_ref().map_or(&[], |r| &r.outcomes)
    }

    fn bob_outcomes(&self) -> &[StepOutcome] {
        self.bob.as_ref().map_or(&[], |r| &r.outcomes)
    }
}

/// Runs both scripts over loopback, or this role's script over TCP. A
/// `HELLO` exchange is prepended to each. Tables are saved back whether or
/// not the session succeeded.
fn run_session(
    cfg: &Config,
    tables: &mut Tables,
    alice_steps: Vec<AliceStep>,
    bob_steps: Vec<BobStep>,
) -> Result<Records, CliError> {
    let sa = AliceScript {
        session_id: SESSION_ID,
        seed: cfg.seed ^ PAD_SALT,
        options: ExecOptions::default(),
        steps: std::iter::once(AliceStep::Hello).chain(alice_steps).collect(),
    };
    let sb = BobScript {
        session_id: SESSION_ID,
        options: ExecOptions::default(),
        steps: std::iter::once(BobStep::Hello).chain(bob_steps).collect(),
    };
    let records = match cfg.role {
        Role::Local => {
            let (a, b) = (tables.alice.as_mut().expect("local"), tables.bob.as_mut().expect("local"));
            let (ra, rb) = run_loopback(a, &sa, b, &sb);
            Records {
                alice: Some(ra),
                bob: Some(rb),
            }
        }
        Role::Alice => {
            let t = daemon_transport(cfg)?;
            Records {
                alice: Some(run_alice(tables.alice.as_mut().expect("alice"), &sa, t)),
                bob: None,
            }
        }
        Role::Bob => {
            let t = daemon_transport(cfg)?;
            Records {
                alice: None,
                bob: Some(run_bob(tables.bob.as_mut().expect("bob"), &sb, t)),
            }
        }
    };
    tables.save()?;
    Ok(records)
}

fn need<T>(v: Option<T>, what: &str, role: Role) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("{what} is required for role {role}")))
}

// ---- table ----

pub fn table_generate(cfg: &Config, a: &GenerateArgs) -> Result<Output, CliError> {
    let dir = output_dir(&a.out, cfg)?;
    let noise = cfg.noise_model();
    let mut r = Report::new("table generate");
    r.set("role", cfg.role.to_string()).set("noise", &cfg.noise).set("seed", cfg.seed);
    let (alice, bob): (Option<SharedTableAlice>, Option<SharedTableBob>);
    if let Some(n) = a.lines {
        let (ta, tb, multi) = TableGenerator::new(QuantumChannel::new(noise))
            .generate(n, cfg.seed)
            .map_err(usage)?;
        r.set("mode", "direct").set("multi_photon_lines", multi);
        alice = (cfg.role != Role::Bob).then_some(ta);
        bob = (cfg.role != Role::Alice).then_some(tb);
    } else {
        let params = SessionParams {
            pair_rate: a.rate,
            duration: a.duration,
            coincidence_window: cfg.window_ps(),
            clock_offset: (a.offset_ns * PS_PER_NS as f64).round() as i64,
            clock_skew: a.skew_ppm,
            noise,
            seed: cfg.seed,
            ..SessionParams::default()
        };
        let cap = simulate_session(&params).map_err(usage)?;
        let tracking = (a.skew_ppm != 0.0).then(TrackingParams::default);
        r.set("mode", "session")
            .set("duration_s", a.duration)
            .set("pair_rate_hz", a.rate)
            .set("pairs_emitted", cap.pairs_emitted)
            .set("pairs_received", cap.pairs_received)
            .set("alice_events", cap.alice.len())
            .set("bob_events", cap.bob.len())
            .set("injected_offset_ns", a.offset_ns)
            .set("injected_skew_ppm", a.skew_ppm);
        if a.events {
            if cfg.role != Role::Bob {
                save_events(&dir.join("alice.otpe"), Party::Alice, &cap.alice, cap.table_start, cfg.seed)?;
            }
            if cfg.role != Role::Alice {
                save_events(&dir.join("bob.otpe"), Party::Bob, &cap.bob, cap.table_start, cfg.seed)?;
            }
        }
        match cfg.role {
            Role::Local => {
                let out = cap.pipeline(tracking.as_ref()).map_err(|e| CliError::Data(e.to_string()))?;
                pipeline_fields(&mut r, &out.report);
                alice = Some(out.alice);
                bob = Some(out.bob);
            }
            Role::Alice => {
                let mut link = Link::new(daemon_transport(cfg)?, SESSION_ID);
                let out = alice_reconcile(
                    &mut link,
                    &cap.alice,
                    cap.table_start,
                    cfg.window_ps(),
                    tracking.as_ref(),
                    cfg.seed,
                )?;
                pipeline_fields(&mut r, &out.report);
                alice = Some(out.alice);
                bob = None;
            }
            Role::Bob => {
                let mut link = Link::new(daemon_transport(cfg)?, SESSION_ID);
                alice = None;
                bob = Some(bob_reconcile(&mut link, &cap.bob, cfg.seed)?);
            }
        }
    }
    let lines = alice.as_ref().map(|t| t.len()).or(bob.as_ref().map(|t| t.len())).unwrap_or(0);
    r.set("lines", lines);
    if let (Some(ta), Some(tb)) = (&alice, &bob) {
        describe_pair(&mut r, ta, tb);
    }
    let mut files = Vec::new();
    if let Some(t) = &alice {
        let p = dir.join(ALICE_FILE);
        t.save(&p)?;
        files.push(p.display().to_string());
    }
    if let Some(t) = &bob {
        let p = dir.join(BOB_FILE);
        t.save(&p)?;
        files.push(p.display().to_string());
    }
    r.set("files", &files);
    Ok(Output {
        report: r.into_value(),
        summary: format!("{lines} table lines written to {}", dir.display()),
        exit: 0,
    })
}

fn pipeline_fields(r: &mut Report, p: &otp_core::tabler::PipelineReport) {
    r.set("estimated_offset_ns", p.estimated_offset as f64 / PS_PER_NS as f64)
        .set("anchors", p.anchors)
        .set("matched_fraction", p.reconcile.matched_fraction)
        .set("multi_photon_lines", p.reconcile.multi_photon_lines);
}

/// Success rate and whole-table CHSH value, only possible with both halves.
fn describe_pair(r: &mut Report, a: &SharedTableAlice, b: &SharedTableBob) {
    let stats = success_statistics(a, b);
    r.set("success_rate", stats.overall());
    let ids: Vec<u64> = a.records().iter().map(|l| l.line_id).collect();
    if let Ok(est) = chsh_from_table(a, b, &ids) {
        r.set("table_s", est.s).set("table_s_std_error", est.std_error);
    }
}

fn load_party_events(path: &Path, expected: Party) -> Result<(Vec<DetectionEvent>, i64, u64), CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    let (party, events, table_start, seed) = load_events(path)?;
    if party != expected {
        return Err(CliError::Data(format!(
            "{} holds {party} detections, expected {expected}",
            path.display()
        )));
    }
    Ok((events, table_start, seed))
}

pub fn table_reconcile(cfg: &Config, a: &ReconcileArgs) -> Result<Output, CliError> {
    let dir = output_dir(&a.out, cfg)?;
    let tracking = a.track.then(TrackingParams::default);
    let mut r = Report::new("table reconcile");
    r.set("role", cfg.role.to_string()).set("window_ns", cfg.window_ns).set("tracking", a.track);
    let mut files = Vec::new();
    let lines = match cfg.role {
        Role::Local => {
            let ap = need(a.alice_events.as_ref(), "--alice-events", cfg.role)?;
            let bp = need(a.bob_events.as_ref(), "--bob-events", cfg.role)?;
            let (ae, table_start, seed) = load_party_events(ap, Party::Alice)?;
            let (be, _, _) = load_party_events(bp, Party::Bob)?;
            let out = run_pipeline(&ae, &be, table_start, cfg.window_ps(), tracking.as_ref(), seed)
                .map_err(|e| CliError::Data(e.to_string()))?;
            pipeline_fields(&mut r, &out.report);
            r.set("alice_events", ae.len()).set("bob_events", be.len());
            describe_pair(&mut r, &out.alice, &out.bob);
            for name in [ALICE_FILE, BOB_FILE] {
                files.push(dir.join(name).display().to_string());
            }
            out.alice.save(&dir.join(ALICE_FILE))?;
            out.bob.save(&dir.join(BOB_FILE))?;
            out.alice.len()
        }
        Role::Alice => {
            let ap = need(a.events.as_ref().or(a.alice_events.as_ref()), "--events", cfg.role)?;
            let (ae, table_start, seed) = load_party_events(ap, Party::Alice)?;
            let mut link = Link::new(daemon_transport(cfg)?, SESSION_ID);
            let out = alice_reconcile(&mut link, &ae, table_start, cfg.window_ps(), tracking.as_ref(), seed)?;
            pipeline_fields(&mut r, &out.report);
            r.set("alice_events", ae.len());
            let p = dir.join(ALICE_FILE);
            out.alice.save(&p)?;
            files.push(p.display().to_string());
            out.alice.len()
        }
        Role::Bob => {
            let bp = need(a.events.as_ref().or(a.bob_events.as_ref()), "--events", cfg.role)?;
            let (be, _, seed) = load_party_events(bp, Party::Bob)?;
            let mut link = Link::new(daemon_transport(cfg)?, SESSION_ID);
            let t = bob_reconcile(&mut link, &be, seed)?;
            r.set("bob_events", be.len());
            let p = dir.join(BOB_FILE);
            t.save(&p)?;
            files.push(p.display().to_string());
            t.len()
        }
    };
    r.set("lines", lines).set("files", &files);
    Ok(Output {
        report: r.into_value(),
        summary: format!("reconciled {lines} lines into {}", dir.display()),
        exit: 0,
    })
}

// ---- exec ----

fn parse_gate(s: &str) -> Result<GateG1, CliError> {
    s.parse().map_err(usage)
}

pub fn exec_gate(cfg: &Config, a: &GateArgs) -> Result<Output, CliError> {
    let gate = match cfg.role {
        Role::Bob => None,
        role => Some(parse_gate(need(a.gate.as_deref(), "--gate", role)?)?),
    };
    let input = match cfg.role {
        Role::Alice => None,
        role => match need(a.input, "--input", role)? {
            0 => Some(false),
            1 => Some(true),
            x => return Err(CliError::Usage(format!("--input must be 0 or 1, got {x}"))),
        },
    };
    let reps = a.repeat.max(1);
    let mut tables = Tables::open(cfg, 10 * reps + 2000)?;
    let mut rec = run_session(
        cfg,
        &mut tables,
        gate.map(|g| vec![AliceStep::Gates(vec![g; reps])]).unwrap_or_default(),
        input.map(|x| vec![BobStep::Inputs(vec![x; reps])]).unwrap_or_default(),
    )?;
    if let Some(e) = rec.error() {
        return Err(e.into());
    }
    let mut r = Report::new("exec gate");
    r.set("role", cfg.role.to_string()).set("repeat", reps);
    if let Some(g) = gate {
        r.set("gate", g.name());
    }
    if let Some(x) = input {
        r.set("input", u8::from(x));
    }
    let mut exhausted = 0;
    let mut summary = String::new();
    if let Some(StepOutcome::Served { rounds, failed, .. }) = rec.alice_outcomes().get(1) {
        exhausted = failed.len();
        r.set("rounds", rounds);
        summary = format!("served {reps} gates in {rounds} rounds");
    }
    if let Some(StepOutcome::Outputs { outputs, rounds }) = rec.bob_outcomes().get(1) {
        let done: Vec<bool> = outputs.iter().flatten().copied().collect();
        exhausted = outputs.len() - done.len();
        let ones = done.iter().filter(|&&b| b).count();
        let freq = ones as f64 / done.len().max(1) as f64;
        r.set("rounds", rounds).set("completed", done.len()).set("ones", ones).set("frequency_one", freq);
        if reps == 1 {
            if let Some(&o) = done.first() {
                r.set("output", u8::from(o));
            }
        }
        summary = format!("{} outputs, frequency of 1 = {freq:.4}", done.len());
        if let (Some(g), Some(x)) = (gate, input) {
            let want = g.eval(x);
            let correct = done.iter().filter(|&&o| o == want).count();
            let rate = correct as f64 / done.len().max(1) as f64;
            r.set("expected", u8::from(want)).set("correct", correct).set("success_rate", rate);
            summary.push_str(&format!(", success rate {rate:.4}"));
        }
    }
    r.set("exhausted", exhausted).set("lines_left", tables.available());
    Ok(Output {
        report: r.into_value(),
        summary,
        exit: if exhausted > 0 { 2 } else { 0 },
    })
}

pub fn exec_circuit(cfg: &Config, a: &CircuitArgs) -> Result<Output, CliError> {
    let text = String::from_utf8(read_file(&a.file)?).map_err(|e| CliError::Data(e.to_string()))?;
    let circuit = Circuit::parse(&text).map_err(|e| CliError::Data(e.to_string()))?;
    let shape = circuit.shape();
    shape.layers().map_err(|e| CliError::Data(e.to_string()))?;
    let inputs = match cfg.role {
        Role::Alice => None,
        role => {
            let x = bits(need(a.input.as_deref(), "--input", role)?, "--input")?;
            if x.len() != shape.inputs.len() {
                return Err(CliError::Usage(format!(
                    "the circuit has {} inputs, got {}",
                    shape.inputs.len(),
                    x.len()
                )));
            }
            Some(x)
        }
    };
    let reps = a.repeat.max(1);
    let mut slots = 0;
    for g in &circuit.gates {
        slots += g.spec().map_err(|e| CliError::Data(e.to_string()))?.slots();
    }
    let mut tables = Tables::open(cfg, 10 * slots * reps + 2000)?;
    let alice_steps = if cfg.role == Role::Bob {
        Vec::new()
    } else {
        vec![AliceStep::Circuit(circuit.clone()); reps]
    };
    let bob_steps = match &inputs {
        Some(x) => vec![
            BobStep::Circuit {
                shape: shape.clone(),
                inputs: x.clone(),
            };
            reps
        ],
        None => Vec::new(),
    };
    let mut rec = run_session(cfg, &mut tables, alice_steps, bob_steps)?;
    if let Some(e) = rec.error() {
        return Err(e.into());
    }
    let mut r = Report::new("exec circuit");
    r.set("role", cfg.role.to_string())
        .set("repeat", reps)
        .set("gates", circuit.gates.len())
        .set("outputs_named", &shape.outputs);
    let mut summary = format!("served {reps} evaluations of a {}-gate circuit", circuit.gates.len());
    let runs: Vec<Vec<bool>> = rec
        .bob_outcomes()
        .iter()
        .filter_map(|o| match o {
            StepOutcome::Circuit(v) => Some(v.clone()),
            _ => None,
        })
        .collect();
    if let Some(x) = &inputs {
        r.set("input", bit_string(x));
        let freq: Vec<f64> = (0..shape.outputs.len())
            .map(|i| runs.iter().filter(|v| v[i]).count() as f64 / runs.len().max(1) as f64)
            .collect();
        r.set("runs", runs.iter().map(|v| bit_string(v)).collect::<Vec<_>>())
            .set("frequency_one", &freq);
        summary = format!("{} evaluations", runs.len());
        if cfg.role == Role::Local {
            let want = circuit.evaluate_ideal(x).map_err(|e| CliError::Data(e.to_string()))?;
            let all = runs.iter().filter(|v| **v == want).count() as f64 / runs.len().max(1) as f64;
            r.set("expected", bit_string(&want)).set("all_correct_rate", all);
            summary.push_str(&format!(", all outputs correct in {:.4} of runs", all));
        }
    }
    r.set("lines_left", tables.available());
    Ok(Output {
        report: r.into_value(),
        summary,
        exit: 0,
    })
}

pub fn exec_gk(cfg: &Config, a: &GkArgs) -> Result<Output, CliError> {
    let spec = match cfg.role {
        Role::Bob => None,
        role => {
            let s = GkGateSpec::from_bits(need(a.truth_table.as_deref(), "--truth-table", role)?).map_err(usage)?;
            if s.k != a.k {
                return Err(CliError::Usage(format!(
                    "a truth table of {} entries does not describe a {}-input gate",
                    s.truth_table.len(),
                    a.k
                )));
            }
            Some(s)
        }
    };
    let x = match cfg.role {
        Role::Alice => None,
        role => {
            let x = bits(need(a.input.as_deref(), "--input", role)?, "--input")?;
            if x.len() != a.k {
                return Err(CliError::Usage(format!("--input needs {} bits, got {}", a.k, x.len())));
            }
            Some(x)
        }
    };
    let reps = a.repeat.max(1);
    let mut r = Report::new("exec gk");
    r.set("role", cfg.role.to_string()).set("k", a.k).set("repeat", reps);
    if let Some(s) = &spec {
        r.set("truth_table", bit_string(&s.truth_table));
    }
    if let Some(x) = &x {
        r.set("input", bit_string(x));
    }
    let outputs: Vec<bool> = if a.simulate {
        if cfg.role != Role::Local {
            return Err(CliError::Usage("--simulate only runs locally".into()));
        }
        let (s, x) = (spec.as_ref().expect("local"), x.as_ref().expect("local"));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set("mode", "density");
        (0..reps)
            .map(|_| simulate_gk(s, x, &mut rng).map_err(|e| CliError::Data(e.to_string())))
            .collect::<Result<_, _>>()?
    } else {
        let slots = (1usize << a.k) - 1;
        let mut tables = Tables::open(cfg, 10 * slots * reps + 2000)?;
        let alice_steps = spec.iter().flat_map(|s| vec![AliceStep::Gk(s.clone()); reps]).collect();
        let bob_steps = x
            .iter()
            .flat_map(|x| vec![BobStep::Gk { k: a.k, x: x.clone() }; reps])
            .collect();
        let mut rec = run_session(cfg, &mut tables, alice_steps, bob_steps)?;
        if let Some(e) = rec.error() {
            return Err(e.into());
        }
        r.set("mode", "table").set("lines_left", tables.available());
        rec.bob_outcomes()
            .iter()
            .filter_map(|o| match o {
                StepOutcome::Gk(b) => Some(*b),
                _ => None,
            })
            .collect()
    };
    let mut summary = format!("served {reps} {}-input gates", a.k);
    if x.is_some() {
        let ones = outputs.iter().filter(|&&b| b).count();
        let freq = ones as f64 / outputs.len().max(1) as f64;
        r.set("ones", ones).set("frequency_one", freq);
        summary = format!("{} outputs, frequency of 1 = {freq:.4}", outputs.len());
        if let (Some(s), Some(x)) = (&spec, &x) {
            let want = s.eval(x);
            let rate = outputs.iter().filter(|&&o| o == want).count() as f64 / outputs.len().max(1) as f64;
            r.set("expected", u8::from(want)).set("success_rate", rate);
            summary.push_str(&format!(", success rate {rate:.4}"));
        }
    }
    Ok(Output {
        report: r.into_value(),
        summary,
        exit: 0,
    })
}

// ---- signatures ----

fn sig_params(cfg: &Config, n: Option<u32>, m: Option<u32>, tau: Option<f64>) -> Result<SignatureParams, CliError> {
    let p = SignatureParams {
        n: n.unwrap_or(cfg.sig_n),
        m: m.unwrap_or(cfg.sig_m),
        tau: tau.unwrap_or(cfg.tau),
        ..SignatureParams::default()
    };
    p.validate().map_err(usage)?;
    Ok(p)
}

fn sig_err(e: SigError) -> CliError {
    match e {
        SigError::Params(m) => CliError::Usage(m),
        e => CliError::Data(e.to_string()),
    }
}

/// Loads Alice's key if the file exists; otherwise derives one from the
/// seed and saves it there.
fn signing_key(cfg: &Config, path: Option<&Path>, params: &SignatureParams) -> Result<SigningKey, CliError> {
    let key = match path {
        Some(p) if p.exists() => SigningKey::load(p).map_err(sig_err)?,
        _ => {
            let k = SigningKey::generate(params, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ KEY_SALT));
            if let Some(p) = path {
                k.save(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            }
            k
        }
    };
    if key.gates.len() != params.len() {
        return Err(CliError::Usage(format!(
            "key holds {} gates but N*m = {}",
            key.gates.len(),
            params.len()
        )));
    }
    Ok(key)
}

pub fn sign(cfg: &Config, a: &SignArgs) -> Result<Output, CliError> {
    let params = sig_params(cfg, a.n, a.m, a.tau)?;
    let key = match cfg.role {
        Role::Bob => None,
        _ => Some(signing_key(cfg, a.key.as_deref(), &params)?),
    };
    let message = match cfg.role {
        Role::Alice => None,
        role => Some(read_file(need(a.message_file.as_deref(), "--message-file", role)?)?),
    };
    let mut tables = Tables::open(cfg, 9 * params.len())?;
    let alice_steps = key
        .map(|key| vec![AliceStep::Sign { key, tau: params.tau }])
        .unwrap_or_default();
    let bob_steps = message
        .clone()
        .map(|message| vec![BobStep::Sign { message, params }])
        .unwrap_or_default();
    let mut rec = run_session(cfg, &mut tables, alice_steps, bob_steps)?;
    if let Some(e) = rec.error() {
        return Err(e.into());
    }
    let mut r = Report::new("sign");
    r.set("role", cfg.role.to_string())
        .set("n", params.n)
        .set("m", params.m)
        .set("tau", params.tau);
    let mut accept = false;
    if let Some(StepOutcome::Signed { signature, result }) = rec.bob_outcomes().get(1) {
        if let Some(out) = &a.out {
            signature.save(out).map_err(|e| io_err(out, e))?;
            r.set("signature_file", out.display().to_string());
        }
        accept = result.accept;
        r.set("accept", result.accept).set("min_fraction", result.value);
    }
    if let Some(StepOutcome::Verified(v)) = rec.alice_outcomes().get(1) {
        accept = v.accept;
        let mean = v.fractions.iter().sum::<f64>() / v.fractions.len().max(1) as f64;
        r.set("accept", v.accept)
            .set("required", v.required)
            .set("min_fraction", v.min_fraction)
            .set("mean_fraction", mean)
            .set("failing_bits", &v.failing_bits);
    }
    r.set("lines_left", tables.available());
    Ok(Output {
        report: r.into_value(),
        summary: format!("signature {}", if accept { "accepted" } else { "rejected" }),
        exit: if accept { 0 } else { 3 },
    })
}

pub fn verify_cmd(cfg: &Config, a: &VerifyArgs) -> Result<Output, CliError> {
    let sig = Signature::from_bytes(&read_file(&a.signature_file)?).map_err(sig_err)?;
    if !a.key.exists() {
        return Err(CliError::Io(format!("{}: no such file", a.key.display())));
    }
    let key = SigningKey::load(&a.key).map_err(sig_err)?;
    let message = match &a.message_file {
        Some(p) => read_file(p)?,
        None => sig.message.clone(),
    };
    let tau = a.tau.unwrap_or(cfg.tau);
    let v = verify(&message, &sig, &key, tau).map_err(sig_err)?;
    let mut r = Report::new("verify");
    r.set("n", sig.n)
        .set("m", sig.m)
        .set("tau", tau)
        .set("accept", v.accept)
        .set("required", v.required)
        .set("min_fraction", v.min_fraction)
        .set("failing_bits", &v.failing_bits);
    Ok(Output {
        report: r.into_value(),
        summary: format!(
            "signature {} (lowest per-bit fraction {:.4}, need {tau})",
            if v.accept { "accepted" } else { "rejected" },
            v.min_fraction
        ),
        exit: if v.accept { 0 } else { 3 },
    })
}

// ---- Bell tests ----

pub fn bell_test(cfg: &Config, a: &BellArgs) -> Result<Output, CliError> {
    let mut tables = Tables::open(cfg, 2 * a.lines + 1000)?;
    let mut rec = run_session(
        cfg,
        &mut tables,
        vec![AliceStep::BellTest {
            lines: a.lines,
            seed: cfg.seed,
            threshold: a.threshold,
        }],
        vec![BobStep::BellTest],
    )?;
    let mut r = Report::new("bell-test");
    r.set("role", cfg.role.to_string()).set("lines", a.lines);
    match rec.error() {
        None => {}
        Some(SessionError::ChshFailure { s, threshold }) => {
            r.set("s", s).set("threshold", threshold).set("verdict", "abort");
            return Ok(Output {
                report: r.into_value(),
                summary: format!("S = {s:.4} is below {threshold}: abort"),
                exit: 2,
            });
        }
        Some(e) => return Err(e.into()),
    }
    let est = rec
        .alice_outcomes()
        .get(1)
        .or(rec.bob_outcomes().get(1))
        .and_then(|o| match o {
            StepOutcome::Bell(e) => Some(e.clone()),
            _ => None,
        })
        .ok_or_else(|| CliError::Data("no Bell estimate".into()))?;
    let report = BellReport::new(&est, a.threshold);
    r.extend(&report).set("lines_left", tables.available());
    Ok(Output {
        report: r.into_value(),
        summary: format!(
            "S = {:.4} +- {:.4} ({:.1} sigma above 2): {}",
            report.s, report.std_error, report.violation_sigmas, report.verdict
        ),
        exit: 0,
    })
}

pub fn eavesdrop(cfg: &Config, a: &EavesdropArgs) -> Result<Output, CliError> {
    let attack: AttackChannel = a.attack.parse().map_err(|e: String| CliError::Usage(e))?;
    let channel = QuantumChannel::new(cfg.noise_model()).with_attack(attack);
    let stats = detection_trials(&channel, a.lines, a.trials, a.threshold, cfg.seed).map_err(usage)?;
    let mut r = Report::new("eavesdrop");
    r.set("noise", &cfg.noise)
        .set("attack", attack.name())
        .set("exact_s", exact_chsh(&channel))
        .extend(&stats)
        .set("detection_rate", stats.detection_rate());
    Ok(Output {
        report: r.into_value(),
        summary: format!(
            "{}: mean S {:.4}, {} of {} trials below {}",
            attack.name(),
            stats.s_mean,
            stats.detected,
            stats.trials,
            a.threshold
        ),
        exit: 0,
    })
}

// ---- analysis ----

pub fn analyze_threshold(cfg: &Config, a: &ThresholdArgs) -> Result<Output, CliError> {
    let n = a.n.unwrap_or(cfg.sig_n);
    let m = a.m.unwrap_or(cfg.sig_m);
    let model = CheatModel {
        q0: a.q0,
        q1: a.q1,
        multi_photon_fraction: a.f,
        ..CheatModel::default()
    };
    let opt = optimize_threshold(n, m, a.p, &model, a.sigma_extra).map_err(sig_err)?;
    let honest = honest_accept_probability(n, m, cfg.tau, a.p, a.sigma_extra).map_err(sig_err)?;
    let cheat = cheat_accept_probability(n, m, cfg.tau, &model).map_err(sig_err)?;
    let mut r = Report::new("analyze threshold");
    r.set("n", n)
        .set("m", m)
        .set("p", a.p)
        .set("q0", a.q0)
        .set("q1", a.q1)
        .set("f", a.f)
        .set("sigma_extra", a.sigma_extra)
        .set("tau_star", opt.tau_star)
        .set("honest", opt.honest)
        .set("cheat", opt.cheat)
        .set("difference", opt.difference)
        .set(
            "at_tau",
            serde_json::json!({ "tau": cfg.tau, "honest": honest, "cheat": cheat }),
        );
    if a.curve {
        r.set("curve", &opt.curve);
    }
    Ok(Output {
        report: r.into_value(),
        summary: format!(
            "tau* = {:.3}: honest {:.5}, cheat {:.5}",
            opt.tau_star, opt.honest, opt.cheat
        ),
        exit: 0,
    })
}

pub fn analyze_histogram(cfg: &Config, a: &HistogramArgs) -> Result<Output, CliError> {
    let params = sig_params(cfg, a.n, a.m, None)?;
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be positive".into()));
    }
    let table_len = 9 * params.len();
    let mut runs = Vec::with_capacity(a.runs);
    let mut accepted = 0;
    for i in 0..a.runs as u64 {
        let seed = cfg.seed.wrapping_add(i);
        let mut gen = TableGenerator::new(QuantumChannel::new(cfg.noise_model()));
        if a.drift != 0.0 {
            gen = gen.with_drift(DriftModel {
                amplitude: a.drift,
                period_lines: 10.0 * table_len as f64,
                line_offset: i * table_len as u64,
            });
        }
        let (mut ta, mut tb, _) = gen.generate(table_len, seed).map_err(usage)?;
        let key = SigningKey::generate(&params, &mut ChaCha8Rng::seed_from_u64(seed ^ KEY_SALT));
        let sa = AliceScript {
            session_id: seed,
            seed: seed ^ PAD_SALT,
            options: ExecOptions::default(),
            steps: vec![AliceStep::Hello, AliceStep::Sign { key, tau: params.tau }],
        };
        let sb = BobScript {
            session_id: seed,
            options: ExecOptions::default(),
            steps: vec![
                BobStep::Hello,
                BobStep::Sign {
                    message: format!("run {i}").into_bytes(),
                    params,
                },
            ],
        };
        let (mut ra, rb) = run_loopback(&mut ta, &sa, &mut tb, &sb);
        if let Some(e) = ra.error.take().or(rb.error) {
            return Err(e.into());
        }
        if let Some(StepOutcome::Verified(v)) = ra.outcomes.get(1) {
            accepted += usize::from(v.accept);
            runs.push(v.fractions.clone());
        }
    }
    let h = histogram_report(&runs, params.n, a.bins).map_err(sig_err)?;
    let mut r = Report::new("analyze histogram");
    r.set("noise", &cfg.noise)
        .set("n", params.n)
        .set("m", params.m)
        .set("tau", params.tau)
        .set("runs", a.runs)
        .set("drift", a.drift)
        .set("accepted", accepted)
        .extend(&h);
    Ok(Output {
        report: r.into_value(),
        summary: format!(
            "{accepted}/{} signatures accepted; per-bit success {:.4} +- {:.4}",
            a.runs, h.mean, h.sigma
        ),
        exit: 0,
    })
}
