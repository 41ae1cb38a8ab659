//! `manet-sim`: validate, run and report on simulator scenarios.
//!
//! Exit codes: 0 success, 1 audit or expectation failure, 2 invalid input,
//! 3 I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use manet_core::crypto::ProviderKind;
use manet_core::sim::{self, Scenario};

const EXIT_FAIL: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "manet-sim", version, about = "Group-based secure MANET routing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario file and print any diagnostics.
    Validate { file: PathBuf },
    /// Run a scenario, audit the log and write both to the output directory.
    Run(RunArgs),
    /// Print a timeline of a recorded event log.
    Report { log: PathBuf },
}

#[derive(clap::Args)]
struct RunArgs {
    file: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for events.log, events.bin and audit.txt.
    #[arg(long, env = "MANET_SIM_OUT", default_value = "manet-out")]
    out: PathBuf,
    /// Overrides the scenario's crypto provider.
    #[arg(long, value_enum)]
    provider: Option<Provider>,
    /// Every forwarder checks the hash chain, not only the destination.
    #[arg(long)]
    strict_chain: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Provider {
    Test,
    Real,
}

/// A failed command: its exit code and what to print on stderr.
struct Failure(u8, String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { file } => validate(&file),
        Command::Run(args) => run(&args),
        Command::Report { log } => report(&log),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Scenario, Failure> {
    let text = read(path)?;
    Scenario::parse(&text).map_err(|e| {
        let lines: Vec<String> = e.0.iter().map(|d| format!("{}:{d}", path.display())).collect();
        Failure(EXIT_INVALID, lines.join("\n"))
    })
}

fn validate(path: &Path) -> Result<u8, Failure> {
    load(path)?;
    println!("{}: ok", path.display());
    Ok(0)
}

fn run(args: &RunArgs) -> Result<u8, Failure> {
    let mut sc = load(&args.file)?;
    if let Some(seed) = args.seed {
        sc.params.seed = seed;
    }
    if let Some(p) = args.provider {
        sc.params.provider = match p {
            Provider::Test => ProviderKind::TestDouble,
            Provider::Real => ProviderKind::Real,
        };
    }
    sc.params.strict_chain |= args.strict_chain;
    let log = sim::run(&sc).map_err(|e| Failure(EXIT_INVALID, e.to_string()))?;
    let audit = sim::audit(&log).map_err(|e| Failure(EXIT_FAIL, format!("audit: {e}")))?;

    let io = |p: &Path, e: std::io::Error| Failure(EXIT_IO, format!("{}: {e}", p.display()));
    fs::create_dir_all(&args.out).map_err(|e| io(&args.out, e))?;
    let text = audit.to_string();
    for (name, bytes) in [
        ("events.log", log.to_text().into_bytes()),
        ("events.bin", log.sidecar_bytes()),
        ("audit.txt", text.clone().into_bytes()),
    ] {
        let p = args.out.join(name);
        fs::write(&p, bytes).map_err(|e| io(&p, e))?;
    }
    print!("{text}");
    Ok(if audit.all_pass() { 0 } else { EXIT_FAIL })
}

fn report(path: &Path) -> Result<u8, Failure> {
    let text = read(path)?;
    let out = sim::report(&text).map_err(|e| Failure(EXIT_INVALID, format!("{}: {e}", path.display())))?;
    print!("{out}");
    Ok(0)
}
