//! `a2as` command-line front end.
//!
//! Exit codes: 0 success, 1 verification or enforcement failure, 2 usage
//! error, 3 parse or fixture error. Data goes to stdout, diagnostics to
//! stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;

use a2as_core::behavior::{
    lint_certificate, sign_certificate, verify_certificate, CertSigner, CertVerdict, CertificateError, Severity,
};
use a2as_core::boundary::parse_window;
use a2as_core::context::{ApprovalMode, MacKey, Placement, KEY_ENV};
use a2as_core::defense::{default_profile, render_defense};
use a2as_core::harness::{self, FixtureSource, ModelMode, ScenarioId, DEMO_KEY_HEX};
use a2as_core::integrity::{MessageStore, SegmentVerdict};
use a2as_core::pipeline::{
    overhead_report, parse_jsonl, verify_audit_chain, AuditLog, Clock, FixedClock,
    InstrumentedPrompt, SystemClock,
};
use a2as_core::policy::{parse_policy, render_policy};
use a2as_core::{ActionRequest, BehaviorCertificate, DefenseProfile, Message, PolicyDocument, Runtime, RuntimeConfig, TrustStore};

const TRUST_STORE_ENV: &str = "A2AS_TRUST_STORE";

#[derive(Parser)]
#[command(name = "a2as", version, about = "Runtime security layer for LLM agents")]
struct Cli {
    /// Fixed time for audit records and certificate validity (RFC 3339).
    #[arg(long, global = true, value_parser = parse_clock)]
    clock: Option<DateTime<Utc>>,
    /// Runtime config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Behavior certificate tools.
    #[command(subcommand)]
    Cert(CertCommand),
    /// Instrument a transcript and print the rendered prompt.
    Wrap(WrapArgs),
    /// Check a rendered context against the original transcript.
    VerifyContext(VerifyContextArgs),
    /// Evaluate one action (JSON file) against a certificate.
    Gate(GateArgs),
    /// Built-in attack scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
    /// Audit log tools.
    #[command(subcommand)]
    Audit(AuditCommand),
    /// Byte overhead of an instrumented prompt (JSON from `wrap --json`).
    Overhead {
        prompt: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Policy file tools.
    #[command(subcommand)]
    Policy(PolicyCommand),
    /// Print a rendered defense block.
    Defense {
        /// Profile file; the built-in default when omitted.
        profile: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CertCommand {
    Lint {
        cert: PathBuf,
    },
    Sign {
        cert: PathBuf,
        #[arg(long)]
        key_id: String,
        #[arg(long, value_enum, default_value_t = Algo::HmacSha256)]
        algorithm: Algo,
        /// Hex secret. For hmac-sha256 defaults to the A2AS_KEY variable.
        #[arg(long)]
        key_file: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    Verify {
        cert: PathBuf,
        #[arg(long, env = TRUST_STORE_ENV)]
        trust_store: PathBuf,
    },
    /// Create a key pair (ed25519) or shared key (hmac) in a trust store.
    Keygen {
        #[arg(long)]
        key_id: String,
        #[arg(long, value_enum, default_value_t = Algo::Ed25519)]
        algorithm: Algo,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    #[value(name = "hmac-sha256")]
    HmacSha256,
    Ed25519,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    PerPromptTemplate,
    SystemPrompt,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::PerPromptTemplate => Placement::PerPromptTemplate,
            PlacementArg::SystemPrompt => Placement::SystemPrompt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ApprovalArg {
    Interactive,
    Token,
    Deny,
}

#[derive(Args)]
struct WrapArgs {
    /// JSON array of messages.
    transcript: PathBuf,
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Defense profile file, `default`, or `none`.
    #[arg(long, default_value = "default")]
    defense: String,
    /// Placement for both defense and policy blocks.
    #[arg(long, value_enum)]
    placement: Option<PlacementArg>,
    /// Print the instrumented prompt as JSON instead of rendered text.
    #[arg(long)]
    json: bool,
    /// JSON-lines audit log to continue and rewrite.
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyContextArgs {
    rendered: PathBuf,
    #[arg(long)]
    originals: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

#[derive(Args)]
struct GateArgs {
    action: PathBuf,
    #[arg(long)]
    cert: Option<PathBuf>,
    #[arg(long, value_enum)]
    approval_mode: Option<ApprovalArg>,
    #[arg(long)]
    audit_log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    List,
    Run {
        id: String,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Run without certificates (demonstration only).
        #[arg(long)]
        no_enforcement: bool,
        /// Directory with one subdirectory per scenario.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        audit_log: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Compliant,
    Naive,
}

#[derive(Subcommand)]
enum AuditCommand {
    Verify { log: PathBuf },
}

#[derive(Subcommand)]
enum PolicyCommand {
    Digest { policy: PathBuf },
    Render { policy: PathBuf },
}

fn parse_clock(text: &str) -> Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(text)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| format!("expected RFC 3339 time: {e}"))
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

const VERIFY_FAILED: u8 = 1;
const USAGE: u8 = 2;
const PARSE: u8 = 3;

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("a2as: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

struct Env {
    clock: Arc<dyn Clock>,
    /// Set when `--clock` was given.
    pinned: Option<DateTime<Utc>>,
    config_path: Option<PathBuf>,
}

impl Env {
    /// Config from `--config`, else the A2AS_KEY variable. `fallback` is used
    /// when neither supplies a key.
    fn config(&self, fallback: Option<&str>) -> Result<RuntimeConfig, Failure> {
        if let Some(path) = &self.config_path {
            return RuntimeConfig::from_file(path).map_err(|e| fail(USAGE, format!("{}: {e}", path.display())));
        }
        let (key_id, hex) = match (std::env::var(KEY_ENV).ok(), fallback) {
            (Some(hex), _) => ("env".to_owned(), hex),
            (None, Some(hex)) => ("demo".to_owned(), hex.to_owned()),
            (None, None) => return Err(fail(USAGE, format!("no signing key: pass --config or set {KEY_ENV}"))),
        };
        let key = MacKey::from_hex(&hex).map_err(|e| fail(USAGE, format!("{KEY_ENV}: {e}")))?;
        let workdir = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
        Ok(RuntimeConfig::new(key_id, key).with_workdir(workdir))
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

/// Key material is created owner-only on unix.
fn write_secret(path: &Path, text: &str) -> Result<(), Failure> {
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    std::os::unix::fs::OpenOptionsExt::mode(&mut options, 0o600);
    options
        .open(path)
        .and_then(|mut f| std::io::Write::write_all(&mut f, text.as_bytes()))
        .map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

fn load_cert(path: &Path) -> Result<BehaviorCertificate, Failure> {
    BehaviorCertificate::from_file(path).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

fn load_policy(path: &Path) -> Result<PolicyDocument, Failure> {
    parse_policy(&read(path)?).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

fn load_transcript(path: &Path) -> Result<Vec<Message>, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))
}

fn load_audit(path: Option<&Path>) -> Result<AuditLog, Failure> {
    let Some(path) = path.filter(|p| p.exists()) else {
        return Ok(AuditLog::new());
    };
    let records = parse_jsonl(&read(path)?).map_err(|e| fail(PARSE, format!("{}: {e}", path.display())))?;
    AuditLog::from_records(records).map_err(|e| fail(VERIFY_FAILED, format!("{}: {e}", path.display())))
}

fn save_audit(path: Option<&Path>, runtime: &Runtime) -> Result<(), Failure> {
    match path {
        Some(p) => write(p, &runtime.audit().to_jsonl()),
        None => Ok(()),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn run(cli: Cli) -> CmdResult {
    let env = Env {
        clock: match cli.clock {
            Some(t) => Arc::new(FixedClock(t)),
            None => Arc::new(SystemClock),
        },
        pinned: cli.clock,
        config_path: cli.config,
    };
    match cli.command {
        Command::Cert(c) => cert(&env, c),
        Command::Wrap(a) => wrap(&env, a),
        Command::VerifyContext(a) => verify_ctx(&env, a),
        Command::Gate(a) => gate(&env, a),
        Command::Scenario(c) => scenario(&env, c),
        Command::Audit(AuditCommand::Verify { log }) => {
            let records = parse_jsonl(&read(&log)?).map_err(|e| fail(PARSE, e.to_string()))?;
            match verify_audit_chain(&records) {
                Ok(()) => {
                    println!("valid {} records", records.len());
                    Ok(0)
                }
                Err(e) => {
                    println!("{e}");
                    Ok(VERIFY_FAILED)
                }
            }
        }
        Command::Overhead { prompt, json } => {
            let text = read(&prompt)?;
            let parsed: InstrumentedPrompt = if text.trim().is_empty() {
                InstrumentedPrompt::default()
            } else {
                serde_json::from_str(&text).map_err(|e| fail(PARSE, format!("{}: {e}", prompt.display())))?
            };
            let report = overhead_report(&parsed);
            if json {
                println!("{}", to_json(&report));
            } else {
                println!("added_bytes {}", report.added_bytes);
                println!("added_blocks {}", report.added_blocks);
                println!("system_bytes {}", report.system_bytes);
                for t in &report.per_turn {
                    println!("turn {} {}", t.turn, t.added_bytes);
                }
            }
            Ok(0)
        }
        Command::Policy(PolicyCommand::Digest { policy }) => {
            println!("{}", load_policy(&policy)?.digest);
            Ok(0)
        }
        Command::Policy(PolicyCommand::Render { policy }) => {
            println!("{}", render_policy(&load_policy(&policy)?));
            Ok(0)
        }
        Command::Defense { profile } => {
            let p = match profile {
                Some(path) => DefenseProfile::from_file(&path).map_err(|e| fail(PARSE, e.to_string()))?,
                None => default_profile(),
            };
            println!("{}", render_defense(&p));
            Ok(0)
        }
    }
}

fn cert(env: &Env, cmd: CertCommand) -> CmdResult {
    match cmd {
        CertCommand::Lint { cert } => {
            let c = load_cert(&cert)?;
            let findings = lint_certificate(&c);
            for f in &findings {
                let sev = match f.severity {
                    Severity::Warning => "warning",
                    Severity::Error => "error",
                };
                println!("{sev}: {}", f.message);
            }
            Ok(if findings.iter().any(|f| f.severity == Severity::Error) {
                VERIFY_FAILED
            } else {
                0
            })
        }
        CertCommand::Sign {
            cert,
            key_id,
            algorithm,
            key_file,
            output,
        } => {
            let c = load_cert(&cert)?;
            let secret = match key_file {
                Some(p) => read(&p)?,
                None => match algorithm {
                    Algo::HmacSha256 => std::env::var(KEY_ENV)
                        .map_err(|_| fail(USAGE, format!("no key: pass --key-file or set {KEY_ENV}")))?,
                    Algo::Ed25519 => return Err(fail(USAGE, "ed25519 signing needs --key-file")),
                },
            };
            let signer = match algorithm {
                Algo::HmacSha256 => CertSigner::Hmac {
                    key_id,
                    key: MacKey::from_hex(&secret).map_err(|e| fail(USAGE, e.to_string()))?,
                },
                Algo::Ed25519 => CertSigner::ed25519_from_hex(key_id, &secret).map_err(|e| fail(USAGE, e.to_string()))?,
            };
            let signed = sign_certificate(&c, &signer).to_canonical_json() + "\n";
            match output {
                Some(p) => write(&p, &signed)?,
                None => print!("{signed}"),
            }
            Ok(0)
        }
        CertCommand::Verify { cert, trust_store } => {
            let c = load_cert(&cert)?;
            let store = TrustStore::load_dir(&trust_store).map_err(|e| fail(USAGE, e.to_string()))?;
            match verify_certificate(&c, &store) {
                Ok(CertVerdict::Valid) => {
                    println!("valid");
                    Ok(0)
                }
                Ok(CertVerdict::Invalid) => {
                    println!("invalid");
                    Ok(VERIFY_FAILED)
                }
                Ok(CertVerdict::Unsigned) => {
                    println!("unsigned");
                    Ok(VERIFY_FAILED)
                }
                Err(e @ CertificateError::UnknownKey(_)) => {
                    println!("invalid");
                    eprintln!("a2as: {e}");
                    Ok(VERIFY_FAILED)
                }
                Err(e) => Err(fail(PARSE, e.to_string())),
            }
        }
        CertCommand::Keygen {
            key_id,
            algorithm,
            out_dir,
        } => {
            let _ = env;
            fs::create_dir_all(&out_dir).map_err(|e| fail(PARSE, format!("{}: {e}", out_dir.display())))?;
            let mut secret = [0u8; 32];
            rand::rngs::OsRng.fill_bytes(&mut secret);
            match algorithm {
                Algo::HmacSha256 => {
                    let path = out_dir.join(format!("{key_id}.hmac"));
                    write_secret(&path, &(hex::encode(secret) + "\n"))?;
                    println!("{}", path.display());
                }
                Algo::Ed25519 => {
                    let key = ed25519_dalek::SigningKey::from_bytes(&secret);
                    let public = out_dir.join(format!("{key_id}.ed25519"));
                    let private = out_dir.join(format!("{key_id}.ed25519.secret"));
                    write(&public, &(hex::encode(key.verifying_key().as_bytes()) + "\n"))?;
                    write_secret(&private, &(hex::encode(secret) + "\n"))?;
                    println!("{}", public.display());
                    println!("{}", private.display());
                }
            }
            Ok(0)
        }
    }
}

fn wrap(env: &Env, args: WrapArgs) -> CmdResult {
    let messages = load_transcript(&args.transcript)?;
    let cert = args.cert.as_deref().map(load_cert).transpose()?;
    let policy = args.policy.as_deref().map(load_policy).transpose()?;
    let profile = match args.defense.as_str() {
        "none" => None,
        "default" => Some(default_profile()),
        path => Some(DefenseProfile::from_file(Path::new(path)).map_err(|e| fail(PARSE, format!("{path}: {e}")))?),
    };
    let mut config = env.config(None)?;
    if let Some(p) = args.placement {
        config = config.with_placements(p.into(), p.into());
    }
    let audit = load_audit(args.audit_log.as_deref())?;
    let mut runtime = Runtime::new(config, env.clock.clone()).with_audit(audit);
    let result = runtime.instrument_request(&messages, cert.as_ref(), policy.as_ref(), profile.as_ref());
    save_audit(args.audit_log.as_deref(), &runtime)?;
    let prompt = result.map_err(|e| fail(PARSE, e.to_string()))?;
    if args.json {
        println!("{}", to_json(&prompt));
    } else {
        print!("{}", prompt.render());
    }
    Ok(0)
}

fn verify_ctx(env: &Env, args: VerifyContextArgs) -> CmdResult {
    let rendered = read(&args.rendered)?;
    let originals = load_transcript(&args.originals)?;
    let policy = args.policy.as_deref().map(load_policy).transpose()?;
    let config = env.config(None)?;
    // A rendering whose tags no longer parse has been tampered with.
    let window = match parse_window(&rendered) {
        Ok(w) => w,
        Err(e) => {
            println!("rejected: {e}");
            return Ok(VERIFY_FAILED);
        }
    };
    let audit = load_audit(args.audit_log.as_deref())?;
    let mut runtime = Runtime::new(config, env.clock.clone()).with_audit(audit);
    let store = MessageStore::from_transcript(&originals);
    let report = runtime.verify_request(&window, &store, policy.as_ref().map(|p| p.digest.as_str()));
    save_audit(args.audit_log.as_deref(), &runtime)?;
    if args.json {
        println!("{}", to_json(&report));
    } else {
        for v in &report.verdicts {
            let label = match v.verdict {
                SegmentVerdict::Valid => "valid",
                SegmentVerdict::Corrupted => "corrupted",
                SegmentVerdict::Unsigned => "unsigned",
                SegmentVerdict::Malformed => "malformed",
            };
            println!("segment {} {label}", v.index);
        }
        if report.missing > 0 {
            println!("missing {}", report.missing);
        }
        println!("{}", if report.is_valid() { "valid" } else { "rejected" });
    }
    Ok(if report.is_valid() { 0 } else { VERIFY_FAILED })
}

fn gate(env: &Env, args: GateArgs) -> CmdResult {
    let action: ActionRequest = serde_json::from_str(&read(&args.action)?)
        .map_err(|e| fail(PARSE, format!("{}: {e}", args.action.display())))?;
    let cert = args.cert.as_deref().map(load_cert).transpose()?;
    let mut config = env.config(Some(DEMO_KEY_HEX))?;
    if let Some(mode) = args.approval_mode {
        config = config.with_approval_mode(match mode {
            ApprovalArg::Interactive => ApprovalMode::Interactive,
            ApprovalArg::Token => ApprovalMode::Token,
            ApprovalArg::Deny => ApprovalMode::Deny,
        });
    }
    let audit = load_audit(args.audit_log.as_deref())?;
    let mut runtime = Runtime::new(config, env.clock.clone()).with_audit(audit);
    let decision = runtime.gate_action(&action, cert.as_ref());
    save_audit(args.audit_log.as_deref(), &runtime)?;
    println!("{}", to_json(&decision));
    Ok(if decision.is_allowed() { 0 } else { VERIFY_FAILED })
}

fn scenario(env: &Env, cmd: ScenarioCommand) -> CmdResult {
    match cmd {
        ScenarioCommand::List => {
            for s in harness::builtin_scenarios() {
                println!("{}\t{}", s.id, s.description);
            }
            Ok(0)
        }
        ScenarioCommand::Run {
            id,
            mode,
            no_enforcement,
            fixtures,
            json,
            audit_log,
        } => {
            let sid = ScenarioId::parse(&id).ok_or_else(|| fail(PARSE, format!("unknown scenario `{id}`")))?;
            let source = match fixtures {
                Some(dir) => FixtureSource::Dir(dir),
                None => FixtureSource::Embedded,
            };
            let scenario = harness::load_scenario(sid, &source).map_err(|e| fail(PARSE, e.to_string()))?;
            let mut config = env.config(Some(DEMO_KEY_HEX))?;
            config.enforcement = !no_enforcement;
            let mode = match mode {
                ModeArg::Compliant => ModelMode::Compliant,
                ModeArg::Naive => ModelMode::Naive,
            };
            // Scenarios run at their own nominal time unless pinned.
            let clock = Arc::new(FixedClock(env.pinned.unwrap_or(scenario.time)));
            let result =
                harness::run_scenario(&scenario, mode, &config, clock).map_err(|e| fail(PARSE, e.to_string()))?;
            if let Some(path) = &audit_log {
                write(path, &result.audit_log.to_jsonl())?;
            }
            if json {
                println!("{}", to_json(&result));
            } else {
                print!("{}", harness::render_report(&result));
            }
            Ok(if config.enforcement && !result.attack_blocked {
                VERIFY_FAILED
            } else {
                0
            })
        }
    }
}
