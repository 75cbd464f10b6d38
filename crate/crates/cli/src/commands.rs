//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use blockperm_core::inference::{
    lagged_interference_test, test_no_effect, test_suppression, Direction, InferenceReport, Mode,
    ResolvedMode,
};
use blockperm_core::placement::{group_trials, TrialRecord, WeightScheme};
use blockperm_core::robust::residualize;
use blockperm_core::scoring::{compute_weights, highpass_filter, score_trials};
use blockperm_core::sim::limit_probability;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{dist_name, interference_name, test_name, LimitsGrid};
use crate::csvio::{self, fmt_g17};
use crate::manifest::RunManifest;

pub struct ScoreArgs<'a> {
    pub series: &'a Path,
    pub events: &'a Path,
    pub out: &'a Path,
    pub filter_cutoff: Option<f64>,
    pub sample_interval: f64,
}

pub fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let mut series = csvio::read_series(args.series, args.sample_interval)?;
    let events = csvio::read_events(args.events)?;

    for block in events.keys() {
        if !series.contains_key(block) {
            bail!(
                "{}: events reference block {block} which is absent from {}",
                args.events.display(),
                args.series.display()
            );
        }
    }

    if let Some(cutoff) = args.filter_cutoff {
        for s in series.values_mut() {
            *s = highpass_filter(s, cutoff)
                .with_context(|| format!("high-pass filter on block {}", s.block_id))?;
        }
    }

    let weights = compute_weights();
    let mut trials = Vec::new();
    for (block, block_events) in &events {
        let s = &series[block];
        let records = score_trials(s, block_events, &weights)
            .with_context(|| format!("scoring block {block}"))?;
        trials.extend(records);
    }
    csvio::write_trials(args.out, &trials)?;

    let mut manifest = RunManifest::new("score");
    manifest
        .parameter("sample_interval_seconds", args.sample_interval)
        .parameter(
            "filter_cutoff_seconds",
            args.filter_cutoff
                .map(|c| c.to_string())
                .unwrap_or_else(|| "none".to_string()),
        );
    manifest.input(args.series)?;
    manifest.input(args.events)?;
    manifest.output(args.out)?;
    manifest.write_alongside(args.out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum TestCommand {
    NoEffect,
    LagTest,
}

pub struct TestArgs<'a> {
    pub trials: &'a Path,
    pub out: &'a Path,
    pub ks: &'a [usize],
    pub alpha: f64,
    pub scheme: WeightScheme,
    pub mode: Mode,
    pub direction: Direction,
    pub jitter: Option<u64>,
    pub two_sided: bool,
}

fn first_tied_block(trials: &[TrialRecord]) -> Option<String> {
    for (block_id, block) in group_trials(trials) {
        let mut responses: Vec<f64> = block.iter().map(|t| t.response).collect();
        responses.sort_unstable_by(|a, b| a.total_cmp(b));
        if responses.windows(2).any(|w| w[0] == w[1]) {
            return Some(block_id);
        }
    }
    None
}

/// Breaks ties (if any) by adding uniform noise at 1e-9 of the response
/// scale, deterministically from `seed`. Returns whether jitter was applied.
fn resolve_ties(trials: &mut Vec<TrialRecord>, jitter: Option<u64>) -> Result<bool> {
    let Some(block) = first_tied_block(trials) else {
        return Ok(false);
    };
    let Some(seed) = jitter else {
        bail!(
            "tied responses within block {block}; rerun with --jitter <seed> to break ties \
             with uniform noise at 1e-9 scale"
        );
    };
    let scale = trials
        .iter()
        .fold(1.0f64, |acc, t| acc.max(t.response.abs()))
        * 1e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in trials.iter_mut() {
        t.response += (rng.gen::<f64>() - 0.5) * scale;
    }
    if let Some(block) = first_tied_block(trials) {
        bail!("block {block} still has tied responses after jitter");
    }
    eprintln!("note: tied responses in block {block}; jitter applied at 1e-9 scale (seed {seed})");
    Ok(true)
}

fn mode_name(mode: ResolvedMode) -> &'static str {
    match mode {
        ResolvedMode::Exact => "exact",
        ResolvedMode::Normal => "normal",
    }
}

fn direction_name(direction: Direction) -> &'static str {
    match direction {
        Direction::Elevation => "elevate",
        Direction::Suppression => "suppress",
    }
}

fn write_report(path: &Path, reports: &[InferenceReport], two_sided: bool) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    writer.write_record([
        "k",
        "direction",
        "T_obs",
        "null_mean",
        "null_sd",
        "deviate",
        "p_value",
        "point_estimate",
        "ci_lower",
        "alpha",
        "mode",
    ])?;
    for r in reports {
        let p = if two_sided { r.two_sided_p() } else { r.p_value };
        writer.write_record([
            r.k.to_string(),
            direction_name(r.direction).to_string(),
            fmt_g17(r.t_obs),
            fmt_g17(r.null_mean),
            fmt_g17(r.null_var.sqrt()),
            fmt_g17(r.deviate),
            fmt_g17(p),
            fmt_g17(r.point_estimate_fraction),
            fmt_g17(r.ci_lower_fraction),
            fmt_g17(r.alpha),
            mode_name(r.mode).to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn test_manifest(args: &TestArgs, subcommand: &str, jittered: bool) -> RunManifest {
    let mut manifest = RunManifest::new(subcommand);
    manifest
        .parameter("k", args.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","))
        .parameter("alpha", args.alpha)
        .parameter(
            "weights",
            match args.scheme {
                WeightScheme::Equal => "equal",
                WeightScheme::Balanced => "balanced",
            },
        )
        .parameter(
            "mode",
            match args.mode {
                Mode::Auto => "auto",
                Mode::Exact => "exact",
                Mode::Normal => "normal",
            },
        )
        .parameter("direction", direction_name(args.direction))
        .parameter(
            "jitter",
            args.jitter.map(|s| s.to_string()).unwrap_or_else(|| "none".to_string()),
        )
        .parameter("jitter_applied", jittered)
        .parameter("p_value", if args.two_sided { "two-sided" } else { "one-sided" });
    manifest
}

pub fn cmd_test(args: &TestArgs, command: TestCommand) -> Result<()> {
    let mut trials = csvio::read_trials(args.trials)?;
    let jittered = resolve_ties(&mut trials, args.jitter)?;

    let mut reports = Vec::new();
    for &k in args.ks {
        let report = match command {
            TestCommand::NoEffect => match args.direction {
                Direction::Elevation => {
                    test_no_effect(&trials, k, args.scheme, args.mode, args.alpha)
                }
                Direction::Suppression => {
                    test_suppression(&trials, k, args.scheme, args.mode, args.alpha)
                }
            },
            TestCommand::LagTest => {
                lagged_interference_test(&trials, k, args.scheme, args.mode, args.alpha)
            }
        }
        .with_context(|| format!("k = {k}"))?;
        if report.degenerate_blocks > 0 {
            eprintln!(
                "warning: k = {k}: {} of {} blocks have fewer than k-1 controls and contribute 0",
                report.degenerate_blocks, report.blocks
            );
        }
        if report.dropped_blocks > 0 {
            eprintln!(
                "warning: k = {k}: {} blocks dropped by lag subsetting",
                report.dropped_blocks
            );
        }
        reports.push(report);
    }
    write_report(args.out, &reports, args.two_sided)?;

    let subcommand = match command {
        TestCommand::NoEffect => "test",
        TestCommand::LagTest => "lagtest",
    };
    let mut manifest = test_manifest(args, subcommand, jittered);
    manifest.input(args.trials)?;
    manifest.output(args.out)?;
    manifest.write_alongside(args.out)
}

pub struct AdjustArgs<'a> {
    pub test: TestArgs<'a>,
    pub covariates: &'a Path,
    pub per_block: bool,
    pub tuning: f64,
}

pub fn cmd_adjust(args: &AdjustArgs) -> Result<()> {
    let mut trials = csvio::read_trials(args.test.trials)?;
    let jittered = resolve_ties(&mut trials, args.test.jitter)?;
    let covariates = csvio::read_covariates(args.covariates, &trials)?;

    let (residual_trials, fits) = residualize(&trials, &covariates, args.tuning, args.per_block)?;
    for (i, fit) in fits.iter().enumerate() {
        eprintln!(
            "fit {}: {} iterations, scale {:.6}, converged: {}",
            i, fit.iterations, fit.scale, fit.converged
        );
        if !fit.converged {
            eprintln!("warning: fit {i} did not converge; residuals still usable");
        }
    }

    let mut reports = Vec::new();
    for &k in args.test.ks {
        let report = match args.test.direction {
            Direction::Elevation => test_no_effect(
                &residual_trials,
                k,
                args.test.scheme,
                args.test.mode,
                args.test.alpha,
            ),
            Direction::Suppression => test_suppression(
                &residual_trials,
                k,
                args.test.scheme,
                args.test.mode,
                args.test.alpha,
            ),
        }
        .with_context(|| format!("k = {k}"))?;
        reports.push(report);
    }
    write_report(args.test.out, &reports, args.test.two_sided)?;

    let mut manifest = test_manifest(&args.test, "adjust", jittered);
    manifest
        .parameter("tuning", args.tuning)
        .parameter("per_block", args.per_block)
        .parameter("covariate_columns", covariates.names.join(","))
        .parameter(
            "fits",
            fits.iter()
                .map(|f| {
                    format!(
                        "iterations={};scale={};converged={}",
                        f.iterations,
                        fmt_g17(f.scale),
                        f.converged
                    )
                })
                .collect::<Vec<_>>()
                .join(" "),
        );
    manifest.input(args.test.trials)?;
    manifest.input(args.covariates)?;
    manifest.output(args.test.out)?;
    manifest.write_alongside(args.test.out)
}

pub fn cmd_simulate(config: &Path, out: &Path, threads: usize) -> Result<()> {
    let scenarios = crate::config::load_simulation_config(config)?;
    let rows = crate::parallel::run_scenarios(&scenarios, threads)?;

    let mut writer =
        csv::Writer::from_path(out).with_context(|| format!("cannot create {}", out.display()))?;
    writer.write_record([
        "scenario",
        "f",
        "interference",
        "nu",
        "lambda",
        "n_trials",
        "ar",
        "test",
        "rejection_rate",
        "se",
        "replications",
        "seed",
    ])?;
    for row in &rows {
        let s = &row.scenario;
        for (i, test) in s.tests.iter().enumerate() {
            writer.write_record([
                s.id.clone(),
                dist_name(s.dist).to_string(),
                interference_name(s.interference).to_string(),
                s.nu.to_string(),
                fmt_g17(s.lambda),
                s.trials.to_string(),
                (if s.ar_noise { "on" } else { "off" }).to_string(),
                test_name(test),
                fmt_g17(row.rate(i)),
                fmt_g17(row.standard_error(i)),
                row.replications.to_string(),
                s.seed.to_string(),
            ])?;
        }
    }
    writer.flush()?;

    let mut manifest = RunManifest::new("simulate");
    manifest.parameter("scenarios", scenarios.len());
    manifest.input(config)?;
    manifest.output(out)?;
    manifest.write_alongside(out)
}

pub fn cmd_limits(grid: &LimitsGrid, out: &Path, config: Option<&Path>) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(out).with_context(|| format!("cannot create {}", out.display()))?;
    writer.write_record(["f", "delta", "k", "prob", "pct_increase"])?;
    for &dist in &grid.dists {
        for &delta in &grid.deltas {
            for &k in &grid.ks {
                let (p, pct) = limit_probability(delta, k, dist)
                    .with_context(|| format!("delta={delta} k={k}"))?;
                writer.write_record([
                    dist_name(dist).to_string(),
                    fmt_g17(delta),
                    k.to_string(),
                    fmt_g17(p),
                    fmt_g17(pct),
                ])?;
            }
        }
    }
    writer.flush()?;

    let mut manifest = RunManifest::new("limits");
    let fmt_list = |v: &[f64]| {
        v.iter().map(|x| fmt_g17(*x)).collect::<Vec<_>>().join(",")
    };
    manifest
        .parameter("deltas", fmt_list(&grid.deltas))
        .parameter(
            "k",
            grid.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","),
        )
        .parameter(
            "f",
            grid.dists.iter().map(|d| dist_name(*d)).collect::<Vec<_>>().join(","),
        );
    if let Some(cfg) = config {
        manifest.input(cfg)?;
    }
    manifest.output(out)?;
    manifest.write_alongside(out)
}

/// Parses `report.csv` back into rows keyed by column name (used by tests
/// and downstream tooling).
pub fn read_report(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(
            headers
                .iter()
                .zip(record.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect(),
        );
    }
    Ok(rows)
}
