mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Coulomb-counting SOC error analysis: closed-form predictions, seeded
/// Monte-Carlo validation and a variance-aware tracker.
#[derive(Debug, Parser)]
#[command(name = "coulomb", version)]
struct Cli {
    /// JSON config file, or a metadata sidecar from an earlier run.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for CSV outputs and their JSON sidecars. Without it, CSV
    /// data goes to stdout.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Table of predicted SOC-error s.d. (%) over sample periods and horizons.
    Predict(PredictArgs),
    /// One corrupted run next to the true SOC.
    Simulate(SimulateArgs),
    /// Monte-Carlo validation of one error source against its predictor.
    Mc(McArgs),
    /// Least-squares fit of the integration-error constant.
    FitKappa(FitKappaArgs),
    /// Closed-loop SOC tracking with synthetic voltage measurements.
    Track(TrackArgs),
    /// Random piecewise-constant current profile.
    GenProfile(GenProfileArgs),
    /// Load statistics of a current log or segment profile.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BatteryArgs {
    /// Capacity in A·h.
    #[arg(long, default_value_t = 1.5)]
    pub capacity: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta_c: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta_d: f64,
    /// Sample period in seconds.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Initial SOC fraction.
    #[arg(long, default_value_t = 0.5)]
    pub s0: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NoiseArgs {
    /// Current-sensor noise s.d., amperes.
    #[arg(long, default_value_t = 0.01)]
    pub sigma_i: f64,
    /// Integration-error constant.
    #[arg(long, default_value_t = 0.0)]
    pub kappa: f64,
    /// Load-current s.d., amperes. Zero means "measure it from the profile".
    #[arg(long, default_value_t = 0.0)]
    pub sigma_l: f64,
    /// Capacity uncertainty s.d., A·h.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_batt: f64,
    /// Relative charging-efficiency s.d.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_eta_c: f64,
    /// Relative discharging-efficiency s.d.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_eta_d: f64,
    /// Relative clock-error s.d.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_delta: f64,
    /// Known relative clock error (excludes --sigma-delta).
    #[arg(long)]
    pub rho_delta: Option<f64>,
    /// Weight sample counts by squared efficiencies.
    #[arg(long)]
    pub efficiency_squared: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProfileArgs {
    /// Segment profile CSV (`duration_s,amps`). Generated when absent.
    #[arg(long, value_name = "CSV")]
    pub profile: Option<PathBuf>,
    /// Generated profile length, e.g. `3.5h`.
    #[arg(long)]
    pub horizon: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub amp_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub amp_max: Option<f64>,
    /// Shortest generated segment, seconds.
    #[arg(long)]
    pub dur_min: Option<f64>,
    #[arg(long)]
    pub dur_max: Option<f64>,
    /// Make generated durations whole multiples of this; 0 for continuous.
    #[arg(long)]
    pub dur_step: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    /// Load-current s.d. relative to capacity, 1/h (overrides --sigma-l).
    #[arg(long)]
    pub rho_load: Option<f64>,
    /// Sample periods in seconds.
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
    pub deltas: Vec<f64>,
    /// Horizons, e.g. `1h,24h,1y`.
    #[arg(long, value_delimiter = ',', default_value = "1h,24h,1y")]
    pub horizons: Vec<String>,
    /// Days in the `y` horizon unit.
    #[arg(long, default_value_t = 365.0)]
    pub year_days: f64,
    /// Accumulated SOC change for the SOC-proportional columns.
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub s_cc: f64,
    /// Share of samples with charging current.
    #[arg(long, default_value_t = 1.0)]
    pub charge_fraction: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value = "combined")]
    pub source: String,
    #[arg(long, default_value_t = 0)]
    pub run_index: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct McArgs {
    #[arg(long, default_value = "current")]
    pub source: String,
    #[arg(long, default_value_t = 1000)]
    pub runs: u64,
    /// Allowed max relative deviation; defaults per source.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitKappaArgs {
    #[arg(long, default_value_t = 1000)]
    pub runs: u64,
    /// Allowed residual max relative deviation after the fit.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrackArgs {
    /// `derived`, `literal`, or a constant per-step variance.
    #[arg(long, default_value = "derived")]
    pub process_noise: String,
    /// Initial SOC variance.
    #[arg(long, default_value_t = 0.0)]
    pub p0: f64,
    /// Voltage-noise s.d., volts; `inf` disables measurement updates.
    #[arg(long, default_value_t = 0.01)]
    pub sigma_z: f64,
    /// Series resistance, ohms.
    #[arg(long, default_value_t = 0.05)]
    pub r0: f64,
    /// Ascending OCV polynomial coefficients.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "3.0,1.6,-2.1,2.4,-1.3,0.5")]
    pub ocv: Vec<f64>,
    /// Seeds to run; RMSE statistics cover all of them, the CSV the first.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub battery: BatteryArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub noise: NoiseArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub profile: ProfileArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenProfileArgs {
    /// Number of segments (instead of --horizon).
    #[arg(long, conflicts_with = "horizon")]
    pub count: Option<usize>,
    #[arg(long)]
    pub horizon: Option<String>,
    #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
    pub amp_min: f64,
    #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
    pub amp_max: f64,
    #[arg(long, default_value_t = 10.0)]
    pub dur_min: f64,
    #[arg(long, default_value_t = 300.0)]
    pub dur_max: f64,
    /// Whole-multiple step for durations; 0 for continuous.
    #[arg(long, default_value_t = 1.0)]
    pub dur_step: f64,
    #[arg(long, default_value_t = 365.0)]
    pub year_days: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct StatsArgs {
    /// Current log CSV (`t_s,i_a`).
    #[arg(long, value_name = "CSV", conflicts_with = "profile")]
    pub log: Option<PathBuf>,
    /// Segment profile CSV, sampled at --delta.
    #[arg(long, value_name = "CSV")]
    pub profile: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.5)]
    pub capacity: f64,
    /// Current-sensor noise s.d., to report its coefficient too.
    #[arg(long)]
    pub sigma_i: Option<f64>,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let Some((_, sub)) = matches.subcommand() else {
        unreachable!("clap requires a subcommand")
    };
    match commands::run(cli, sub) {
        Ok(commands::Status::Pass) => ExitCode::SUCCESS,
        Ok(commands::Status::OutOfTolerance) => ExitCode::from(1),
        Err(e) if config::is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
