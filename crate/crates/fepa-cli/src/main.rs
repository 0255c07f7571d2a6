//! Command-line front end: model checking, ODE export, lumping workflows,
//! numerical solving, trajectory comparison, and the replica-drift error
//! sweep.
//!
//! Exit codes: 0 success, 1 command-line usage error, 2 model or input
//! error, 3 verification failure.

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fepa::solve::Norm;
use fepa::Rho;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fepa",
    version,
    about = "Compile fluid process-algebra models to ODE systems, reduce them, and bound perturbations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Parse and validate a model file
    Check(CheckArgs),
    /// Export the fluid ODE system
    Odes(OdesArgs),
    /// Verify a lumping, build the reduced system, or homogenize first
    Lump(LumpArgs),
    /// Integrate the fluid ODEs and emit a CSV trajectory
    Solve(SolveArgs),
    /// Solve two models and measure the distance between their trajectories
    Compare(CompareArgs),
    /// Run the replica-drift error sweep and emit CSV rows plus a summary
    Experiment(ExperimentArgs),
}

#[derive(Copy, Clone, ValueEnum)]
pub enum RhoArg {
    Min,
    Product,
}

impl From<RhoArg> for Rho {
    fn from(r: RhoArg) -> Rho {
        match r {
            RhoArg::Min => Rho::Min,
            RhoArg::Product => Rho::Product,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
pub enum LumpMode {
    /// Exact lumping: every member trajectory equals the shared one
    Efl,
    /// Ordinary lumping: block sums are reproduced
    Ofl,
    /// Homogenize rates to the class mean, then lump exactly
    EpsEfl,
    /// Homogenize rates to the class mean, then lump ordinarily
    EpsOfl,
}

#[derive(Args)]
pub struct CheckArgs {
    /// Model file
    pub model: PathBuf,
    /// Override the model's semantics line
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
}

#[derive(Args)]
pub struct OdesArgs {
    /// Model file
    pub model: PathBuf,
    /// Override the model's semantics line
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
    /// Emit a JSON description instead of plain text
    #[arg(long)]
    pub json: bool,
    /// Write to this file instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct LumpArgs {
    /// Model file
    pub model: PathBuf,
    /// Reduction to attempt
    #[arg(value_enum)]
    pub mode: LumpMode,
    /// Override the model's semantics line
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
    /// Partition file (JSON); discovered from the model when omitted
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// Random population vectors sampled per verification condition
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    /// Numerical tolerance for verification and discovery
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Seed for the verification sampler
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Horizon for the perturbation bound (eps modes)
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Output grid step used when solving for the bound (eps modes)
    #[arg(long, default_value_t = 0.2)]
    pub grid: f64,
    /// Norm for epsilon, delta, and the bound (eps modes): inf, 1, or 2
    #[arg(long, default_value = "inf")]
    pub norm: Norm,
    /// Write the report to this file instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SolveArgs {
    /// Model file
    pub model: PathBuf,
    /// Override the model's semantics line
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
    /// Integration horizon
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Output grid step
    #[arg(long, default_value_t = 0.2)]
    pub grid: f64,
    /// Write the CSV to this file instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CompareArgs {
    /// First model file
    pub model_a: PathBuf,
    /// Second model file; must declare the same state names
    pub model_b: PathBuf,
    /// Override both models' semantics lines
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
    /// Integration horizon
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Output grid step
    #[arg(long, default_value_t = 0.2)]
    pub grid: f64,
    /// Norm applied across states at each grid point: inf, 1, or 2
    #[arg(long, default_value = "inf")]
    pub norm: Norm,
    /// Fail (exit 3) when the distance exceeds this value
    #[arg(long)]
    pub tol: Option<f64>,
    /// Write the report to this file instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExperimentArgs {
    /// Restrict the sweep to one semantics (default: both)
    #[arg(long, value_enum)]
    pub rho: Option<RhoArg>,
    /// Replica counts for the exact-lumping error columns
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 6, 9, 12])]
    pub efl_d: Vec<usize>,
    /// Replica counts for the ordinary-lumping error columns
    #[arg(long, value_delimiter = ',', default_values_t = [12usize])]
    pub ofl_d: Vec<usize>,
    /// First rate-drift value
    #[arg(long, default_value_t = 0.0005)]
    pub delta_start: f64,
    /// Step between consecutive drift values
    #[arg(long, default_value_t = 0.005)]
    pub delta_step: f64,
    /// Number of drift values
    #[arg(long, default_value_t = 20)]
    pub delta_count: usize,
    /// Integration horizon
    #[arg(long, default_value_t = 100.0)]
    pub t_end: f64,
    /// Output grid step
    #[arg(long, default_value_t = 0.2)]
    pub grid: f64,
    /// Norm for epsilon, delta, and the theoretical bound: inf, 1, or 2
    #[arg(long, default_value = "inf")]
    pub norm: Norm,
    /// Worker threads for the sweep (default: one per core)
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Write the CSV to this file instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is
            // a usage error, which this tool reports as exit code 1.
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
