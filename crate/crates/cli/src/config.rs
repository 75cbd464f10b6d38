//! Plain-text `key = value` scenario configs.
//!
//! A simulation config describes a grid: list-valued keys (`f`, `ar`) and
//! repeated `row` entries (one per `nu`/`interference` combination) expand
//! into one scenario per cell, each with a seed derived deterministically
//! from the master seed and the cell index. Example:
//!
//! ```text
//! trials = 250
//! lambda = 0.5
//! f = normal,t2
//! ar = off,on
//! ar_sd = 1.1547005383792516
//! tests = ttest,k2,k5,k10
//! replications = 5000
//! seed = 20110812
//! row = nu=1 interference=none
//! row = nu=10 interference=a
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context, Result};
use blockperm_core::sim::{
    scenario_seed, Calibration, Interference, ResponseDist, SimScenario, TCalibration, TestKind,
    Tails,
};

#[derive(Debug, Clone)]
struct RawConfig {
    entries: Vec<(String, String, u64)>, // key, value, line
}

fn parse_raw(text: &str) -> Result<RawConfig> {
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let stripped = line.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let Some((key, value)) = stripped.split_once('=') else {
            bail!("line {line_no}: expected `key = value`, got {stripped:?}");
        };
        entries.push((key.trim().to_string(), value.trim().to_string(), line_no));
    }
    Ok(RawConfig { entries })
}

impl RawConfig {
    fn single(&self, key: &str) -> Result<Option<&str>> {
        let mut found = None;
        for (k, v, line) in &self.entries {
            if k == key {
                if found.is_some() {
                    bail!("line {line}: key {key} given more than once");
                }
                found = Some(v.as_str());
            }
        }
        Ok(found)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.single(key)?
            .ok_or_else(|| anyhow::anyhow!("missing required key {key}"))
    }

    fn repeated(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _, _)| k == key)
            .map(|(_, v, _)| v.as_str())
            .collect()
    }

    fn check_known(&self, known: &[&str]) -> Result<()> {
        let known: BTreeSet<&str> = known.iter().copied().collect();
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _, _)| !known.contains(k.as_str()))
            .map(|(k, _, line)| format!("{k} (line {line})"))
            .collect();
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.join(", "));
        }
        Ok(())
    }
}

fn parse_dist(s: &str) -> Result<ResponseDist> {
    match s {
        "normal" => Ok(ResponseDist::Normal),
        "t2" => Ok(ResponseDist::T2),
        other => bail!("unknown distribution {other:?} (expected normal or t2)"),
    }
}

fn parse_interference(s: &str) -> Result<Interference> {
    match s {
        "none" => Ok(Interference::None),
        "a" => Ok(Interference::A),
        "b" => Ok(Interference::B),
        "c" => Ok(Interference::C),
        "d" => Ok(Interference::D),
        other => bail!("unknown interference {other:?} (expected none, a, b, c or d)"),
    }
}

fn parse_test(s: &str) -> Result<TestKind> {
    if s == "ttest" {
        return Ok(TestKind::TTest);
    }
    if let Some(k) = s.strip_prefix('k') {
        let k: usize = k
            .parse()
            .with_context(|| format!("bad test name {s:?} (expected ttest or k<int>)"))?;
        return Ok(TestKind::Placement { k });
    }
    bail!("unknown test {s:?} (expected ttest or k<int>)")
}

pub fn interference_name(i: Interference) -> &'static str {
    match i {
        Interference::None => "none",
        Interference::A => "a",
        Interference::B => "b",
        Interference::C => "c",
        Interference::D => "d",
    }
}

pub fn dist_name(d: ResponseDist) -> &'static str {
    match d {
        ResponseDist::Normal => "normal",
        ResponseDist::T2 => "t2",
    }
}

pub fn test_name(t: &TestKind) -> String {
    match t {
        TestKind::TTest => "ttest".to_string(),
        TestKind::Placement { k } => format!("k{k}"),
    }
}

/// Parses a simulation config and expands the grid into scenarios.
pub fn load_simulation_config(path: &Path) -> Result<Vec<SimScenario>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let raw = parse_raw(&text).with_context(|| format!("{}", path.display()))?;
    raw.check_known(&[
        "trials",
        "treat_prob",
        "lambda",
        "f",
        "ar",
        "ar_rho",
        "ar_sd",
        "tests",
        "alpha",
        "tails",
        "calibration",
        "t_calibration",
        "t_permutations",
        "replications",
        "seed",
        "row",
    ])
    .with_context(|| format!("{}", path.display()))?;

    let trials: usize = raw.required("trials")?.parse().context("trials")?;
    let treat_prob: f64 = raw
        .single("treat_prob")?
        .unwrap_or("0.5")
        .parse()
        .context("treat_prob")?;
    let lambda: f64 = raw.required("lambda")?.parse().context("lambda")?;
    let dists: Vec<ResponseDist> = raw
        .single("f")?
        .unwrap_or("normal")
        .split(',')
        .map(|s| parse_dist(s.trim()))
        .collect::<Result<_>>()?;
    let ars: Vec<bool> = raw
        .single("ar")?
        .unwrap_or("off")
        .split(',')
        .map(|s| match s.trim() {
            "off" => Ok(false),
            "on" => Ok(true),
            other => bail!("ar must be off or on, got {other:?}"),
        })
        .collect::<Result<_>>()?;
    let ar_rho: f64 = raw.single("ar_rho")?.unwrap_or("0.5").parse().context("ar_rho")?;
    let ar_sd: f64 = raw.single("ar_sd")?.unwrap_or("1.0").parse().context("ar_sd")?;
    let tests: Vec<TestKind> = raw
        .single("tests")?
        .unwrap_or("ttest,k2,k5,k10")
        .split(',')
        .map(|s| parse_test(s.trim()))
        .collect::<Result<_>>()?;
    let alpha: f64 = raw.single("alpha")?.unwrap_or("0.05").parse().context("alpha")?;
    let tails = match raw.single("tails")?.unwrap_or("two") {
        "one" => Tails::One,
        "two" => Tails::Two,
        other => bail!("tails must be one or two, got {other:?}"),
    };
    let calibration = match raw.single("calibration")?.unwrap_or("exact-mc") {
        "exact-mc" => Calibration::ExactMc,
        "normal" => Calibration::NormalApprox,
        other => bail!("calibration must be exact-mc or normal, got {other:?}"),
    };
    let t_calibration = match raw.single("t_calibration")?.unwrap_or("student") {
        "student" => TCalibration::Student,
        "permutation" => {
            let draws: u32 = raw
                .single("t_permutations")?
                .unwrap_or("999")
                .parse()
                .context("t_permutations")?;
            TCalibration::Permutation { draws }
        }
        other => bail!("t_calibration must be student or permutation, got {other:?}"),
    };
    let replications: u64 = raw
        .required("replications")?
        .parse()
        .context("replications")?;
    let seed: u64 = raw.required("seed")?.parse().context("seed")?;

    let rows = raw.repeated("row");
    if rows.is_empty() {
        bail!("{}: no `row = nu=<int> interference=<type>` entries", path.display());
    }
    let mut parsed_rows = Vec::new();
    for row in rows {
        let mut nu = None;
        let mut interference = None;
        for field in row.split_whitespace() {
            let Some((key, value)) = field.split_once('=') else {
                bail!("bad row field {field:?} (expected nu=<int> interference=<type>)");
            };
            match key {
                "nu" => nu = Some(value.parse::<u32>().context("row nu")?),
                "interference" => interference = Some(parse_interference(value)?),
                other => bail!("unknown row field {other:?}"),
            }
        }
        let nu = nu.ok_or_else(|| anyhow::anyhow!("row missing nu: {row:?}"))?;
        let interference =
            interference.ok_or_else(|| anyhow::anyhow!("row missing interference: {row:?}"))?;
        parsed_rows.push((nu, interference));
    }

    let mut scenarios = Vec::new();
    for &dist in &dists {
        for &ar in &ars {
            for &(nu, interference) in &parsed_rows {
                let index = scenarios.len() as u64;
                scenarios.push(SimScenario {
                    id: format!(
                        "{}/ar={}/nu={}/{}",
                        dist_name(dist),
                        if ar { "on" } else { "off" },
                        nu,
                        interference_name(interference)
                    ),
                    trials,
                    treat_prob,
                    lambda,
                    nu,
                    dist,
                    interference,
                    ar_noise: ar,
                    ar_rho,
                    ar_sd,
                    tests: tests.clone(),
                    alpha,
                    tails,
                    calibration,
                    t_calibration,
                    replications,
                    seed: scenario_seed(seed, index),
                });
            }
        }
    }
    Ok(scenarios)
}

/// A limits config: `deltas`, `k`, `f` lists.
#[derive(Debug, Clone)]
pub struct LimitsGrid {
    pub deltas: Vec<f64>,
    pub ks: Vec<usize>,
    pub dists: Vec<ResponseDist>,
}

impl Default for LimitsGrid {
    fn default() -> Self {
        LimitsGrid {
            deltas: vec![0.0, 0.25, 0.5, 1.0],
            ks: vec![2, 5, 10],
            dists: vec![ResponseDist::Normal, ResponseDist::T2],
        }
    }
}

pub fn load_limits_config(path: &Path) -> Result<LimitsGrid> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let raw = parse_raw(&text).with_context(|| format!("{}", path.display()))?;
    raw.check_known(&["deltas", "k", "f"])
        .with_context(|| format!("{}", path.display()))?;
    let mut grid = LimitsGrid::default();
    if let Some(d) = raw.single("deltas")? {
        grid.deltas = d
            .split(',')
            .map(|s| s.trim().parse::<f64>().context("deltas"))
            .collect::<Result<_>>()?;
    }
    if let Some(k) = raw.single("k")? {
        grid.ks = k
            .split(',')
            .map(|s| s.trim().parse::<usize>().context("k"))
            .collect::<Result<_>>()?;
    }
    if let Some(f) = raw.single("f")? {
        grid.dists = f
            .split(',')
            .map(|s| parse_dist(s.trim()))
            .collect::<Result<_>>()?;
    }
    Ok(grid)
}
