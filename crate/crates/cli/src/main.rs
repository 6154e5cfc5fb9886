mod commands;
mod config;
mod report;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::CliError;
use crate::config::{Config, Role};

#[derive(Debug, Parser)]
#[command(name = "otp", version, about = "Probabilistic one-time programs over shared entanglement tables")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Noise preset: ideal, v0.936 or v0.955
    #[arg(long, global = true)]
    noise: Option<String>,
    /// Directory with alice.otpt and bob.otpt
    #[arg(long, global = true)]
    table: Option<PathBuf>,
    /// local, alice or bob
    #[arg(long, global = true)]
    role: Option<Role>,
    #[arg(long, global = true)]
    listen: Option<String>,
    #[arg(long, global = true)]
    connect: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build and reconcile shared tables
    #[command(subcommand)]
    Table(TableCmd),
    /// Evaluate gates, circuits and G_k gates
    #[command(subcommand)]
    Exec(ExecCmd),
    /// Sign a message (Bob) and have it verified (Alice)
    Sign(SignArgs),
    /// Check a signature file against a key
    Verify(VerifyArgs),
    /// Spend table lines on a CHSH test
    BellTest(BellArgs),
    /// Repeated Bell tests against a simulated eavesdropper
    Eavesdrop(EavesdropArgs),
    /// Signature threshold and histogram analysis
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
}

#[derive(Debug, Subcommand)]
pub enum TableCmd {
    /// Simulate a session and write the reconciled tables
    Generate(GenerateArgs),
    /// Offset recovery, matching and reconciliation of event files
    Reconcile(ReconcileArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Table-phase length in seconds
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
    /// Pair rate in Hz
    #[arg(long, default_value_t = 10_000.0)]
    pub rate: f64,
    /// Skip timestamps and draw this many lines directly
    #[arg(long)]
    pub lines: Option<usize>,
    /// Injected Bob-minus-Alice clock offset in ns
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub offset_ns: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub skew_ppm: f64,
    /// Also write alice.otpe / bob.otpe detection files
    #[arg(long)]
    pub events: bool,
    /// Output directory (defaults to --table, then the current directory)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconcileArgs {
    #[arg(long)]
    pub alice_events: Option<PathBuf>,
    #[arg(long)]
    pub bob_events: Option<PathBuf>,
    /// This party's event file in daemon mode
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Follow a drifting clock offset
    #[arg(long)]
    pub track: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ExecCmd {
    /// One 1-bit gate, optionally repeated
    Gate(GateArgs),
    /// A circuit file
    Circuit(CircuitArgs),
    /// A k-input gate from its truth table
    Gk(GkArgs),
}

#[derive(Debug, Args)]
pub struct GateArgs {
    /// const0, const1, id or not (Alice)
    #[arg(long)]
    pub gate: Option<String>,
    /// 0 or 1 (Bob)
    #[arg(long)]
    pub input: Option<u8>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct CircuitArgs {
    #[arg(long)]
    pub file: PathBuf,
    /// Bob's input bits in circuit order, e.g. 0110
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
}

#[derive(Debug, Args)]
pub struct GkArgs {
    #[arg(long)]
    pub k: usize,
    /// 2^k output bits, first input most significant
    #[arg(long)]
    pub truth_table: Option<String>,
    #[arg(long)]
    pub input: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Sample the density matrix directly instead of using the table
    #[arg(long)]
    pub simulate: bool,
}

#[derive(Debug, Args)]
pub struct SignArgs {
    #[arg(long)]
    pub message_file: Option<PathBuf>,
    /// Alice's key; generated from --seed if missing, and saved if a path is given
    #[arg(long)]
    pub key: Option<PathBuf>,
    /// Where Bob writes the signature
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "N")]
    pub n: Option<u32>,
    #[arg(long)]
    pub m: Option<u32>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub signature_file: PathBuf,
    #[arg(long)]
    pub key: PathBuf,
    /// Overrides the message stored in the signature
    #[arg(long)]
    pub message_file: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BellArgs {
    #[arg(long, default_value_t = 5000)]
    pub lines: usize,
    #[arg(long, default_value_t = otp_core::security::DEFAULT_ABORT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EavesdropArgs {
    /// none, intercept-zx, intercept-z or intercept-x
    #[arg(long, default_value = "intercept-zx")]
    pub attack: String,
    #[arg(long, default_value_t = 5000)]
    pub lines: usize,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = otp_core::security::DEFAULT_ABORT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCmd {
    /// Optimal threshold and honest / cheating acceptance
    Threshold(ThresholdArgs),
    /// Per-bit success histogram over simulated signing sessions
    Histogram(HistogramArgs),
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    #[arg(long = "N")]
    pub n: Option<u32>,
    #[arg(long)]
    pub m: Option<u32>,
    /// Honest per-gate success
    #[arg(long, default_value_t = 0.831)]
    pub p: f64,
    #[arg(long, default_value_t = 0.75)]
    pub q0: f64,
    #[arg(long, default_value_t = 0.75)]
    pub q1: f64,
    /// Multi-photon fraction
    #[arg(long, default_value_t = 0.0)]
    pub f: f64,
    /// Gaussian spread of the per-signature success on top of the binomial
    #[arg(long, default_value_t = 0.0)]
    pub sigma_extra: f64,
    /// Include the full curve
    #[arg(long)]
    pub curve: bool,
}

#[derive(Debug, Args)]
pub struct HistogramArgs {
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long = "N")]
    pub n: Option<u32>,
    #[arg(long)]
    pub m: Option<u32>,
    /// Amplitude of slow visibility drift across runs
    #[arg(long, default_value_t = 0.0)]
    pub drift: f64,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

fn load_config(g: &GlobalArgs) -> Result<Config, CliError> {
    let mut cfg = Config::default();
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    }
    cfg.apply_env(std::env::vars()).map_err(CliError::Usage)?;
    let flags = [
        ("seed", g.seed.map(|s| s.to_string())),
        ("noise", g.noise.clone()),
        ("table", g.table.as_ref().map(|p| p.display().to_string())),
        ("role", g.role.map(|r| r.to_string())),
        ("listen", g.listen.clone()),
        ("connect", g.connect.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v).map_err(CliError::Usage)?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = load_config(&cli.global).and_then(|cfg| match cli.command {
        Command::Table(TableCmd::Generate(a)) => commands::table_generate(&cfg, &a),
        Command::Table(TableCmd::Reconcile(a)) => commands::table_reconcile(&cfg, &a),
        Command::Exec(ExecCmd::Gate(a)) => commands::exec_gate(&cfg, &a),
        Command::Exec(ExecCmd::Circuit(a)) => commands::exec_circuit(&cfg, &a),
        Command::Exec(ExecCmd::Gk(a)) => commands::exec_gk(&cfg, &a),
        Command::Sign(a) => commands::sign(&cfg, &a),
        Command::Verify(a) => commands::verify_cmd(&cfg, &a),
        Command::BellTest(a) => commands::bell_test(&cfg, &a),
        Command::Eavesdrop(a) => commands::eavesdrop(&cfg, &a),
        Command::Analyze(AnalyzeCmd::Threshold(a)) => commands::analyze_threshold(&cfg, &a),
        Command::Analyze(AnalyzeCmd::Histogram(a)) => commands::analyze_histogram(&cfg, &a),
    });
    let (report, summary, code) = match result {
        Ok(out) => (out.report, out.summary, out.exit),
        Err(e) => {
            let (report, code) = e.report();
            (report, format!("error: {e}"), code)
        }
    };
    // A closed stdout (say, piped into `head`) is not worth a panic.
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", serde_json::to_string_pretty(&report).expect("json"));
    let _ = writeln!(std::io::stderr(), "{summary}");
    ExitCode::from(code)
}
