//! `msr`: synthesize, analyze and simulate MSR scheduling policies.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msr_core::simulator::DEFAULT_GUARD;
use msr_core::trace::{DEFAULT_TOLERANCE, DEFAULT_TOP_N};
use msr_core::Mode;
use serde::Serialize;

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_ANALYTIC: u8 = 3;
pub const EXIT_SIM_UNSTABLE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "msr",
    version,
    about = "Markovian service rate policies for multiresource jobs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for candidate schedules and build a modulating process.
    Synth(SynthArgs),
    /// Queue-length bounds and approximation for a policy.
    Analyze(AnalyzeArgs),
    /// Discrete-event simulation of a policy or baseline.
    Simulate(SimulateArgs),
    /// Analysis plus simulation over a grid of loads, switching or setup rates.
    Sweep(SweepArgs),
    /// Trace preparation, replay and synthetic generation.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    pub workload: PathBuf,
    #[arg(long, default_value = "pmsr")]
    pub mode: Mode,
    /// Switching rate. Defaults to 2 for pMSR and to the predicted best rate otherwise.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Setup rate (sMSR only).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Emit the policy even when the workload is not stabilizable.
    #[arg(long)]
    pub allow_unstable: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct AnalyzeArgs {
    pub policy: PathBuf,
    pub workload: PathBuf,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Clone, Serialize)]
pub struct SimArgs {
    #[arg(long, default_value_t = 1e5)]
    pub horizon: f64,
    /// Defaults to a tenth of the horizon.
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Let waiting jobs use capacity the policy leaves idle.
    #[arg(long)]
    pub backfill: bool,
    /// Instability guard on the number of jobs in system.
    #[arg(long, default_value_t = DEFAULT_GUARD)]
    pub guard: usize,
    /// Run replications one after another.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Serialize)]
pub struct SimulateArgs {
    /// Policy file from `msr synth`, or `maxweight` / `firstfit`.
    pub policy: String,
    pub workload: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimArgs,
    /// CSV event log of the first replication.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Load,
    Alpha,
    Gamma,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Pmsr,
    Nmsr,
    Smsr,
    Maxweight,
    Firstfit,
}

impl PolicyName {
    pub fn mode(self) -> Option<Mode> {
        match self {
            PolicyName::Pmsr => Some(Mode::Pmsr),
            PolicyName::Nmsr => Some(Mode::Nmsr),
            PolicyName::Smsr => Some(Mode::Smsr),
            PolicyName::Maxweight | PolicyName::Firstfit => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Pmsr => "pmsr",
            PolicyName::Nmsr => "nmsr",
            PolicyName::Smsr => "smsr",
            PolicyName::Maxweight => "maxweight",
            PolicyName::Firstfit => "firstfit",
        }
    }
}

#[derive(Args, Serialize)]
pub struct SweepArgs {
    pub workload: PathBuf,
    #[arg(long, value_enum)]
    pub dimension: Dimension,
    /// Comma-separated, increasing, positive grid. For `load` each value
    /// scales the arrival rates.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "pmsr")]
    pub policies: Vec<PolicyName>,
    /// Fixed switching rate when the sweep is not over alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed setup rate when the sweep is not over gamma.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Skip simulation.
    #[arg(long)]
    pub analytic_only: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub sim: SimArgs,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Group a trace into job types and fit rates.
    Prep(TracePrepArgs),
    /// Replay a trace against a policy synthesized for its fitted workload.
    Sim(TraceSimArgs),
    /// Generate a synthetic trace from a JSON description.
    Gen(TraceGenArgs),
}

#[derive(Args, Clone, Serialize)]
pub struct TraceInput {
    pub trace: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    pub top_n: usize,
    /// Fraction of records kept by random thinning.
    #[arg(long, default_value_t = 1.0)]
    pub keep: f64,
    /// Server capacity as `cpu,mem`.
    #[arg(long, value_delimiter = ',', default_value = "1,1")]
    pub capacity: Vec<f64>,
}

#[derive(Args, Serialize)]
pub struct TracePrepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TraceInput,
    /// Seed for thinning.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TraceSimArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: TraceInput,
    #[arg(long, value_enum, default_value = "pmsr")]
    pub policy: PolicyName,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Simulate the fitted workload with Poisson arrivals and exponential
    /// sizes instead of replaying the trace.
    #[arg(long)]
    pub fitted: bool,
    /// Simulated time. Defaults to the trace span when replaying.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub warmup: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub backfill: bool,
    #[arg(long, default_value_t = DEFAULT_GUARD)]
    pub guard: usize,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TraceGenArgs {
    /// JSON description of the synthetic trace.
    pub config: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Trace { command } => match command {
            TraceCommand::Prep(a) => commands::trace_prep(&a),
            TraceCommand::Sim(a) => commands::trace_sim(&a),
            TraceCommand::Gen(a) => commands::trace_gen(&a),
        },
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
