//! `weylsim` batch runner.
//!
//! Exit codes: 0 when every verdict passes, 1 when a verdict fails,
//! 2 for configuration errors, 3 for guard breaches and runtime errors.

mod commands;
mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use commands::{RunOutput, Verdict};
use config::{Command, Format, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] weylsim::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                weylsim::Error::Parse(_)
                | weylsim::Error::UnboundParameter(_)
                | weylsim::Error::InvalidGrid(_)
                | weylsim::Error::GridMismatch(_)
                | weylsim::Error::Size(_)
                | weylsim::Error::Domain(_) => 2,
                _ => 3,
            },
            CliError::Io(_) | CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "weylsim", version, about = "Damped magnetic Schrödinger evolution and symbol-calculus checks")]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Action {
    /// Propagate a single-particle problem.
    Solve(RunArgs),
    /// Parameter sensitivity and difference-quotient convergence.
    Sensitivity(RunArgs),
    /// Decay of the parametrix remainder in the spectral shift.
    ParametrixScan(RunArgs),
    /// Commutator and Q-family norms across the cutoff scale.
    CommutatorScan(RunArgs),
    /// Check growth assumptions on sampled phase space.
    Assumptions(RunArgs),
    /// Propagate a many-body problem.
    Manybody(RunArgs),
    /// Compare fast and dense quantization paths.
    QuantizeCheck(RunArgs),
    /// Parse a configuration and bind every expression without running.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.action {
        Action::Validate { config } => validate(&config),
        Action::Solve(a) => run(Command::Solve, a),
        Action::Sensitivity(a) => run(Command::Sensitivity, a),
        Action::ParametrixScan(a) => run(Command::ParametrixScan, a),
        Action::CommutatorScan(a) => run(Command::CommutatorScan, a),
        Action::Assumptions(a) => run(Command::Assumptions, a),
        Action::Manybody(a) => run(Command::Manybody, a),
        Action::QuantizeCheck(a) => run(Command::QuantizeCheck, a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn validate(path: &Path) -> Result<u8, CliError> {
    let cfg = config::load(path)?;
    if cfg.problem.is_some() {
        cfg.grid()?;
        let p = cfg.problem_block()?;
        p.growth.build()?;
        if cfg.scan.param.is_some() {
            cfg.build_family()?;
        } else {
            cfg.specs(&p.params)?;
        }
    }
    if cfg.manybody.is_some() {
        cfg.build_manybody()?;
    }
    if let Some(e) = &cfg.evolve {
        if !(e.dt > 0.0 && e.dt.is_finite()) {
            return Err(CliError::Config(format!("evolve.dt must be positive, got {}", e.dt)));
        }
    }
    println!("ok");
    Ok(0)
}

fn run(cmd: Command, args: RunArgs) -> Result<u8, CliError> {
    let mut cfg = config::load(&args.config)?;
    if let Some(c) = cfg.command {
        if c != cmd {
            return Err(CliError::Config(format!("configuration is for '{}', not '{}'", c.name(), cmd.name())));
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let output = commands::run(cmd, &cfg)?;
    let pass = output.verdicts.iter().all(|v| v.pass);
    write_outputs(cmd, &cfg, &out_dir, &output, pass)?;
    print_verdicts(&output.verdicts);
    Ok(if pass { 0 } else { 1 })
}

fn print_verdicts(verdicts: &[Verdict]) {
    for v in verdicts {
        let value = v.value.map(|x| format!(" {x:.6e}")).unwrap_or_default();
        println!("{} {}{}", if v.pass { "PASS" } else { "FAIL" }, v.name, value);
        if !v.pass {
            eprintln!("failing: {} ({})", v.name, v.detail);
        }
    }
}

fn write_outputs(cmd: Command, cfg: &RunConfig, dir: &Path, out: &RunOutput, pass: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let formats = &cfg.output.formats;
    if formats.contains(&Format::Json) {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let doc = json!({
            "command": cmd.name(),
            "seed": cfg.seed,
            "timestamp": timestamp,
            "pass": pass,
            "verdicts": out.verdicts,
            "report": out.report,
        });
        let mut w = BufWriter::new(fs::File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w)?;
    }
    if formats.contains(&Format::Csv) {
        if let Some(csv) = &out.csv {
            fs::write(dir.join("series.csv"), csv)?;
        }
    }
    if formats.contains(&Format::State) {
        for (name, s) in &out.states {
            let w = BufWriter::new(fs::File::create(dir.join(format!("state_{name}.csv")))?);
            weylsim::field::write_csv(s, w)?;
        }
    }
    Ok(())
}
