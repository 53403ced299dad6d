//! Command-line driver for the letf-lab pipeline.
//!
//! Exit codes: 0 on success, 2 for invalid arguments, configuration or
//! input data, 1 for failures while running a stage.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<letf_lab::Error> for CliError {
    fn from(e: letf_lab::Error) -> Self {
        CliError {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "letf-lab",
    version,
    about = "Leveraged-ETF option surfaces, forecasts and backtests"
)]
pub struct Cli {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; LETF_LAB_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit Heston parameters to call quotes of one fund.
    Calibrate(CalibrateArgs),
    /// Simulate Heston paths with the full-truncation Euler scheme.
    Simulate(SimulateArgs),
    /// Conditional expected integrated variance by terminal moneyness.
    Condvar(CondvarArgs),
    /// Move quotes to another fund's log-moneyness.
    Scale(ScaleArgs),
    /// Robust smile fit with a bootstrap uniform confidence band.
    Bands(BandsArgs),
    /// Dynamic semiparametric factor model.
    Dsfm {
        #[command(subcommand)]
        command: DsfmCommand,
    },
    /// Vector autoregression on factor loadings.
    Var {
        #[command(subcommand)]
        command: VarCommand,
    },
    /// Delta-hedged rolling backtest.
    Backtest(BacktestArgs),
    /// Block-bootstrap envelope of the backtest.
    Robustness(RobustnessArgs),
    /// Full pipeline on generated fixtures.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub quotes: PathBuf,
    #[arg(long)]
    pub funds: PathBuf,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fund to calibrate; defaults to `data.source`.
    #[arg(long)]
    pub ticker: Option<String>,
    /// Observation date; defaults to the last one in the file.
    #[arg(long)]
    pub date: Option<chrono::NaiveDate>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Heston parameters, or a calibration report.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub ttm: f64,
    #[arg(long)]
    pub paths: usize,
    /// Time steps; defaults to `condvar.steps_per_year · ttm`.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 100.0)]
    pub s0: f64,
    #[arg(long)]
    pub r: Option<f64>,
    /// Fund carry (expense ratio plus dividend yield).
    #[arg(long, default_value_t = 0.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CondvarArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub ttm: f64,
    #[arg(long)]
    pub paths: usize,
    #[arg(long)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Compare the bin nearest the money with direct integration.
    #[arg(long)]
    pub analytic_check: bool,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ScaleArgs {
    #[arg(long)]
    pub quotes: PathBuf,
    /// Fund table; the built-in table when omitted.
    #[arg(long)]
    pub funds: Option<PathBuf>,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    /// Curve written by `condvar`; its maturity selects the quotes.
    #[arg(long)]
    pub condvar: PathBuf,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub date: Option<chrono::NaiveDate>,
}

#[derive(Debug, Args)]
pub struct BandsArgs {
    #[arg(long)]
    pub quotes: PathBuf,
    #[arg(long)]
    pub funds: Option<PathBuf>,
    /// Fund whose smile is fitted; defaults to `data.target`.
    #[arg(long)]
    pub ticker: Option<String>,
    #[arg(long)]
    pub ttm: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "B")]
    pub boot: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub date: Option<chrono::NaiveDate>,
}

#[derive(Debug, Subcommand)]
pub enum DsfmCommand {
    /// Fit on unit-square panels `t,x_m,x_t,y`.
    Fit {
        #[arg(long)]
        panels: PathBuf,
        #[arg(long = "L")]
        l: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the loadings as `t,z1,…,zL`.
        #[arg(long)]
        loadings: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VarCommand {
    /// Select the order and fit on loadings `t,z1,…,zL`.
    Fit {
        #[arg(long)]
        z: PathBuf,
        #[arg(long)]
        pmax: Option<usize>,
        /// Fixed order instead of criterion-based selection.
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub quotes: PathBuf,
    #[arg(long)]
    pub funds: PathBuf,
    #[arg(long)]
    pub out_ledger: PathBuf,
    #[arg(long)]
    pub out_summary: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub quotes: PathBuf,
    #[arg(long)]
    pub funds: PathBuf,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub block: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value = "demo-out")]
    pub out_dir: PathBuf,
    /// Trading days in the generated market.
    #[arg(long, default_value_t = 60)]
    pub days: usize,
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match std::env::var("LETF_LAB_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::usage(format!("LETF_LAB_THREADS = `{v}` is not a positive integer")))?,
        ),
        Err(_) => flag,
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the stage and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    match configure_threads(cli.threads).and_then(|_| commands::dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
