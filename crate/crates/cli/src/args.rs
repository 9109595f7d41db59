use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "jumpthermo", version, about = "Photon-counting thermodynamics of a fluorescent emitter in a fluctuating environment")]
pub struct Cli {
    /// Worker threads for sweeps and ensembles.
    #[arg(long, global = true, env = "JUMPTHERMO_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep the grand potential, cumulants and bath populations over s.
    Theta(ThetaArgs),
    /// Compare the full model with the averaged Markovian emitter.
    FastLimit(FastLimitArgs),
    /// Compare the spectral solution with the slow-modulation approximation.
    SlowLimit(SlowLimitArgs),
    /// Sample the double-Gaussian distribution of the count rate.
    Distribution(DistributionArgs),
    /// Finite-time counting distribution and s-ensemble thermodynamics.
    Counting(CountingArgs),
    /// Quantum-jump Monte Carlo ensemble statistics.
    Simulate(SimulateArgs),
    /// Rate function by Legendre-Fenchel transform of the grand potential.
    RateFunction(RateFunctionArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Theta(_) => "theta",
            Command::FastLimit(_) => "fast-limit",
            Command::SlowLimit(_) => "slow-limit",
            Command::Distribution(_) => "distribution",
            Command::Counting(_) => "counting",
            Command::Simulate(_) => "simulate",
            Command::RateFunction(_) => "rate-function",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Theta(a) => &a.common,
            Command::FastLimit(a) => &a.common,
            Command::SlowLimit(a) => &a.common,
            Command::Distribution(a) => &a.common,
            Command::Counting(a) => &a.common,
            Command::Simulate(a) => &a.common,
            Command::RateFunction(a) => &a.common,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Model configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; a run manifest is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Grid {
    #[arg(long, allow_hyphen_values = true)]
    pub s_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub s_max: Option<f64>,
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ThetaArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, allow_hyphen_values = true, default_value_t = -1.0)]
    pub s_min: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1.0)]
    pub s_max: f64,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct FastLimitArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, allow_hyphen_values = true, default_value_t = -5.0)]
    pub s_min: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 5.0)]
    pub s_max: f64,
    #[arg(long, default_value_t = 101)]
    pub points: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct SlowLimitArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to s_p -/+ 3 sigma_p with 201 points.
    #[command(flatten)]
    pub grid: Grid,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weights {
    Linear,
    GrandPotential,
}

#[derive(Debug, Args, Serialize)]
pub struct DistributionArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated s values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub s: Vec<f64>,
    /// Samples of N per s value.
    #[arg(long, default_value_t = 401)]
    pub points: usize,
    #[arg(long, value_enum, default_value_t = Weights::Linear)]
    pub weights: Weights,
}

#[derive(Debug, Args, Serialize)]
pub struct CountingArgs {
    #[command(flatten)]
    pub common: Common,
    /// Counting time.
    #[arg(long)]
    pub t: f64,
    /// Comma-separated s values for the s-ensemble.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    pub s: Vec<f64>,
    #[arg(long, default_value_t = 1e-10)]
    pub tail_tol: f64,
    /// Start from the ground state instead of the stationary state.
    #[arg(long)]
    pub cold_start: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub trajectories: usize,
    #[arg(long)]
    pub t_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample the slow-modulation approximation instead of the full dynamics.
    #[arg(long)]
    pub doubly_stochastic: bool,
    #[arg(long)]
    pub cold_start: bool,
    /// Comma-separated checkpoint times for ensemble-averaged states.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Vec<f64>,
    /// Comma-separated s values for empirical partition functions.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub s: Vec<f64>,
    /// Write trajectory events as JSON lines to this file.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RateFunctionArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, allow_hyphen_values = true, default_value_t = -5.0)]
    pub s_min: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 5.0)]
    pub s_max: f64,
    #[arg(long, default_value_t = 201)]
    pub s_points: usize,
    #[arg(long)]
    pub n_min: f64,
    #[arg(long)]
    pub n_max: f64,
    #[arg(long, default_value_t = 50)]
    pub n_points: usize,
}
