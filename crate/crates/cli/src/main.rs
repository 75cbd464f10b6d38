//! blockperm: randomization inference for blocked experiments with
//! interference, from raw event-related series to tests, attributable-effect
//! bounds, covariance adjustment, and the power simulation.

use std::path::PathBuf;

use anyhow::Result;
use blockperm_cli::commands::{
    cmd_adjust, cmd_limits, cmd_score, cmd_simulate, cmd_test, AdjustArgs, ScoreArgs, TestArgs,
    TestCommand,
};
use blockperm_cli::config::{load_limits_config, LimitsGrid};
use blockperm_core::inference::{Direction, Mode};
use blockperm_core::placement::WeightScheme;
use blockperm_core::sim::ResponseDist;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WeightsArg {
    Equal,
    Balanced,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DirectionArg {
    Elevate,
    Suppress,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DistArg {
    Normal,
    T2,
}

#[derive(Parser)]
#[command(name = "blockperm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SharedTestFlags {
    /// Output report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Comparison sizes k (one report row per k).
    #[arg(long, value_delimiter = ',', default_value = "2,5,10")]
    k: Vec<usize>,
    /// One-sided level for the confidence bound.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Block weighting of the statistic.
    #[arg(long, value_enum, default_value_t = WeightsArg::Equal)]
    weights: WeightsArg,
    /// Null-distribution mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
    mode: ModeArg,
    /// Direction of the alternative.
    #[arg(long, value_enum, default_value_t = DirectionArg::Elevate)]
    direction: DirectionArg,
    /// Break tied responses with uniform noise at 1e-9 scale, seeded here.
    #[arg(long)]
    jitter: Option<u64>,
    /// Report two-sided p-values (doubling the smaller tail).
    #[arg(long)]
    two_sided: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Score event-related series into one response per trial (HRF weights,
    /// optional high-pass filtering).
    Score {
        /// Input series.csv: block_id, t_index, value.
        series: PathBuf,
        /// Input events.csv: block_id, onset_index, z.
        events: PathBuf,
        /// Output trials.csv.
        #[arg(long)]
        out: PathBuf,
        /// High-pass cutoff in seconds (e.g. 128); omit to skip filtering.
        #[arg(long)]
        filter_cutoff: Option<f64>,
        /// Sampling interval of the series in seconds.
        #[arg(long, default_value_t = 2.0)]
        sample_interval: f64,
    },
    /// Test no treatment effect and bound the attributable effect.
    Test {
        /// Input trials.csv.
        trials: PathBuf,
        #[command(flatten)]
        flags: SharedTestFlags,
    },
    /// Test for lagged interference: go trials, split by the previous
    /// trial's treatment.
    Lagtest {
        /// Input trials.csv (trial_index must reflect temporal order).
        trials: PathBuf,
        #[command(flatten)]
        flags: SharedTestFlags,
    },
    /// Robust covariance adjustment, then test the residuals.
    Adjust {
        /// Input trials.csv.
        trials: PathBuf,
        /// Input covariates.csv: block_id, trial_index, <columns...>.
        covariates: PathBuf,
        #[command(flatten)]
        flags: SharedTestFlags,
        /// Fit one regression per block instead of one pooled fit.
        #[arg(long)]
        per_block: bool,
        /// Huber tuning constant.
        #[arg(long, default_value_t = blockperm_core::robust::DEFAULT_TUNING)]
        tuning: f64,
    },
    /// Run a Monte Carlo size/power study from a scenario config.
    Simulate {
        /// Scenario config (key = value; see configs/table5.cfg).
        config: PathBuf,
        /// Output power.csv.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; results are identical for any value.
        #[arg(long, default_value_t = default_threads())]
        threads: usize,
    },
    /// Tabulate limiting probabilities that a shifted treated response
    /// beats k-1 controls.
    Limits {
        /// Output limits.csv.
        #[arg(long)]
        out: PathBuf,
        /// Shifts delta.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
        /// Comparison sizes k.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Distributions (normal, t2).
        #[arg(long, value_enum, value_delimiter = ',')]
        f: Option<Vec<DistArg>>,
        /// Optional config with deltas / k / f keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn default_threads() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Score {
            series,
            events,
            out,
            filter_cutoff,
            sample_interval,
        } => cmd_score(&ScoreArgs {
            series: &series,
            events: &events,
            out: &out,
            filter_cutoff,
            sample_interval,
        }),
        Command::Test { trials, flags } => {
            cmd_test(&test_args(&trials, &flags), TestCommand::NoEffect)
        }
        Command::Lagtest { trials, flags } => {
            cmd_test(&test_args(&trials, &flags), TestCommand::LagTest)
        }
        Command::Adjust {
            trials,
            covariates,
            flags,
            per_block,
            tuning,
        } => cmd_adjust(&AdjustArgs {
            test: test_args(&trials, &flags),
            covariates: &covariates,
            per_block,
            tuning,
        }),
        Command::Simulate {
            config,
            out,
            threads,
        } => cmd_simulate(&config, &out, threads),
        Command::Limits {
            out,
            deltas,
            k,
            f,
            config,
        } => {
            let mut grid = match &config {
                Some(path) => load_limits_config(path)?,
                None => LimitsGrid::default(),
            };
            if let Some(deltas) = deltas {
                grid.deltas = deltas;
            }
            if let Some(k) = k {
                grid.ks = k;
            }
            if let Some(f) = f {
                grid.dists = f
                    .into_iter()
                    .map(|d| match d {
                        DistArg::Normal => ResponseDist::Normal,
                        DistArg::T2 => ResponseDist::T2,
                    })
                    .collect();
            }
            cmd_limits(&grid, &out, config.as_deref())
        }
    }
}

fn test_args<'a>(trials: &'a PathBuf, flags: &'a SharedTestFlags) -> TestArgs<'a> {
    TestArgs {
        trials,
        out: &flags.out,
        ks: &flags.k,
        alpha: flags.alpha,
        scheme: match flags.weights {
            WeightsArg::Equal => WeightScheme::Equal,
            WeightsArg::Balanced => WeightScheme::Balanced,
        },
        mode: match flags.mode {
            ModeArg::Auto => Mode::Auto,
            ModeArg::Exact => Mode::Exact,
            ModeArg::Normal => Mode::Normal,
        },
        direction: match flags.direction {
            DirectionArg::Elevate => Direction::Elevation,
            DirectionArg::Suppress => Direction::Suppression,
        },
        jitter: flags.jitter,
        two_sided: flags.two_sided,
    }
}
