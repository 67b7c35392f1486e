//! `pm`: periodic monitoring schedules from the command line.
//!
//! Every subcommand writes its files under `--out` (default `./pm_out`)
//! together with `manifest.json`, prints a short JSON summary on stdout,
//! and reports failures as JSON on stderr. Exit codes: 0 success, 1 bad
//! input, 2 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

mod commands;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "pm", version, about = "Optimal periodic observation schedules for a mobile sensor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "pm_out")]
    pub out: PathBuf,
    /// Warn about unknown keys instead of rejecting them.
    #[arg(long)]
    pub lenient: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a scenario file and report what it contains.
    Validate(ValidateArgs),
    /// Minimum-travel single-visit tour.
    Tour(TourArgs),
    /// Limit cycles and peaks of a fixed schedule.
    Schedule(ScheduleArgs),
    /// Equalize peaks at a fixed period along the minimum-travel tour.
    Balance(BalanceArgs),
    /// Full pipeline: tour, period search, balanced allocation.
    Optimize(OptimizeArgs),
    /// Monte Carlo run of targets and filters under a schedule.
    Simulate(SimulateArgs),
    /// Regenerate the benchmark figures' data from a position seed.
    ReproducePaper(ReproduceArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TourArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Use nearest neighbour + 2-opt even when the exact solver applies.
    #[arg(long)]
    pub heuristic: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Visit order as target ids, e.g. `1,2,1`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sequence: Vec<usize>,
    /// Dwell time of each visit.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dwell: Vec<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BalanceArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Cycle period; must exceed the tour travel time.
    #[arg(long)]
    pub period: f64,
    #[arg(long)]
    pub kp: Option<f64>,
    /// Relative peak spread at which balancing stops.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Search tolerance as a fraction of the tour travel time.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub tmin_scale: Option<f64>,
    #[arg(long)]
    pub tmax_scale: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Schedule file: `{"visits": [...], "dwell": [...]}`.
    #[arg(long)]
    pub schedule: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub cycles: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Record every n-th step.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReproduceArgs {
    /// Seed for the target positions.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "pm_out")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    kind: &'a str,
    message: String,
    exit_code: u8,
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let report = serde_json::json!({ "error": ErrorReport { kind, message, exit_code: code } });
    eprintln!("{report}");
    ExitCode::from(code)
}

fn init_threads() {
    let Ok(v) = std::env::var("PM_THREADS") else { return };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        _ => eprintln!("{}", serde_json::json!({ "warning": format!("ignoring PM_THREADS={v:?}") })),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string(), 1),
    };
    init_threads();
    let result = match &cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Tour(a) => commands::tour(a),
        Command::Schedule(a) => commands::schedule(a),
        Command::Balance(a) => commands::balance(a),
        Command::Optimize(a) => commands::optimize(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::ReproducePaper(a) => commands::reproduce(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            fail(e.kind(), e.to_string(), code)
        }
    }
}
