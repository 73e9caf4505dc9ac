//! Batch front end: simulate markets, calibrate the mean-reverting model,
//! run market or investor IRL, and merge run outputs into reports.

mod calibrate;
mod config;
mod fail;
mod io;
mod irl;
mod model;
mod plot;
mod report;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::fail::CliError;
use crate::io::RunDir;

#[derive(Parser, Debug)]
#[command(name = "marketirl", version, about = "Market IRL with free-energy control and GMR calibration")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for parallel calibration (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Simulate caps and signals, or a full market with a trading policy.
    Simulate,
    /// Calibrate kappa, loadings and variances per window.
    CalibrateGmr,
    /// Fit the market or an investor by variational EM.
    Irl,
    /// Merge earlier run directories into one summary.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::CalibrateGmr => "calibrate-gmr",
            Command::Irl => "irl",
            Command::Report => "report",
        }
    }

    fn sections(self) -> &'static [&'static str] {
        match self {
            Command::Simulate => &["simulate", "model"],
            Command::CalibrateGmr => &["calibrate"],
            Command::Irl => &["irl", "model"],
            Command::Report => &["report"],
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let loaded = config::load(cli.config.as_deref())?;
    let mut cfg = loaded.config.clone();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(e.to_string()))?;
    }
    let cmd = cli.command;
    if loaded.seed_defaulted() && cli.seed.is_none() {
        eprintln!("default: seed = {}", cfg.seed);
    }
    for s in cmd.sections() {
        for d in loaded.defaulted(s) {
            eprintln!("default: {d}");
        }
    }
    let resolved = config::resolved(&cfg, cmd.sections());
    let mut out = RunDir::create(&cli.out)?;
    let result = match cmd {
        Command::Simulate => simulate::run(&cfg, &mut out),
        Command::CalibrateGmr => calibrate::run(&cfg, &mut out),
        Command::Irl => irl::run(&cfg, &mut out),
        Command::Report => report::run(&cfg, &mut out),
    };
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("failed (exit {})", e.code),
    };
    out.finish(cmd.name(), cfg.seed, &status, &resolved)?;
    for line in result? {
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { fail::CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
