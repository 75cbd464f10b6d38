//! Monte Carlo size/power engine and limiting probabilities.
//!
//! One scenario is a completely randomized single-block experiment: each of
//! `trials` units is treated with probability `treat_prob`; a fraction
//! `lambda` of treated trials is successful; a successful trial draws from
//! `F^nu` (the maximum of `nu` independent draws from `F`) when the
//! interference condition on the preceding treatments holds, and from `F`
//! otherwise; stationary AR(1) errors can be added on top. Each replication
//! runs the requested tests and the engine reports rejection frequencies.
//!
//! Rejections for the placement statistics are decided against the exact
//! randomization null by default: the null distribution of the standardized
//! statistic given (N, n) is distribution-free, so two-sided cutoffs are
//! pre-tabulated once per (N, k) by Monte Carlo on a grid of n and
//! interpolated ([`calibrate_placement`]). A plain Normal-approximation mode
//! is available as well.
//!
//! Replication `r` of a scenario uses ChaCha stream `r + 1` of a generator
//! seeded with the scenario seed, so results are bit-identical for any
//! degree of parallelism; calibration tables use their own fixed seed and
//! are shared across scenarios.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binom::binomial_f64;
use crate::nulldist::block_moments;
use crate::special::{integrate, normal_cdf, normal_pdf, normal_quantile, student_t_quantile, t2_cdf, t2_quantile};

/// Fixed seed for null-calibration tables, independent of scenario seeds.
const CALIBRATION_SEED: u64 = 0x626c6f636b7065; // "blockpe"

/// Null draws per calibration grid point.
pub const CALIBRATION_DRAWS: u64 = 40_000;

/// Control-response distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseDist {
    Normal,
    T2,
}

/// Interference pattern restricting when a successful treated trial draws
/// from `F^nu`. A trial with too few predecessors fails the condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interference {
    /// Every successful treated trial draws from `F^nu`.
    None,
    /// Only when the previous trial is a control.
    A,
    /// Only when the previous trial is treated.
    B,
    /// Only when the previous 2 trials are all controls.
    C,
    /// Only when the previous 3 trials are all controls.
    D,
}

/// One test run inside a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    /// Conventional pooled-variance t statistic.
    TTest,
    /// Placement statistic at the given k.
    Placement { k: usize },
}

/// Sidedness of every test's rejection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tails {
    One,
    Two,
}

/// How placement-test cutoffs are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibration {
    /// Pre-tabulated quantiles of the exact randomization null.
    ExactMc,
    /// Standard Normal quantiles for the deviate.
    NormalApprox,
}

/// How the t test is referenced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TCalibration {
    /// Student t with N - 2 degrees of freedom.
    Student,
    /// Permutation distribution of the t statistic within each replication.
    Permutation { draws: u32 },
}

/// Full description of one simulation cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub id: String,
    pub trials: usize,
    pub treat_prob: f64,
    pub lambda: f64,
    pub nu: u32,
    pub dist: ResponseDist,
    pub interference: Interference,
    pub ar_noise: bool,
    pub ar_rho: f64,
    /// Marginal standard deviation of the AR errors.
    pub ar_sd: f64,
    pub tests: Vec<TestKind>,
    pub alpha: f64,
    pub tails: Tails,
    pub calibration: Calibration,
    pub t_calibration: TCalibration,
    pub replications: u64,
    pub seed: u64,
}

impl SimScenario {
    /// A scenario with the defaults shared by the power study: p = 1/2,
    /// rho = 0.5, the four tests, alpha = 0.05, two-sided, exact
    /// calibration.
    pub fn new(id: &str, trials: usize, lambda: f64, nu: u32, dist: ResponseDist) -> Self {
        SimScenario {
            id: String::from(id),
            trials,
            treat_prob: 0.5,
            lambda,
            nu,
            dist,
            interference: Interference::None,
            ar_noise: false,
            ar_rho: 0.5,
            ar_sd: 1.0,
            tests: vec![
                TestKind::TTest,
                TestKind::Placement { k: 2 },
                TestKind::Placement { k: 5 },
                TestKind::Placement { k: 10 },
            ],
            alpha: 0.05,
            tails: Tails::Two,
            calibration: Calibration::ExactMc,
            t_calibration: TCalibration::Student,
            replications: 5000,
            seed: 0,
        }
    }
}

/// Rejection counts for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerRow {
    pub scenario: SimScenario,
    /// One count per entry of `scenario.tests`.
    pub rejections: Vec<u64>,
    pub replications: u64,
    /// Replications redrawn because of an all-treated/all-control draw or a
    /// (measure-zero) tie.
    pub redraws: u64,
}

impl PowerRow {
    pub fn rate(&self, test_index: usize) -> f64 {
        self.rejections[test_index] as f64 / self.replications as f64
    }

    /// Binomial standard error `sqrt(p (1-p) / R)`.
    pub fn standard_error(&self, test_index: usize) -> f64 {
        let p = self.rate(test_index);
        libm::sqrt(p * (1.0 - p) / self.replications as f64)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("scenario needs at least 4 trials")]
    TooFewTrials,
    #[error("invalid scenario field: {0}")]
    Invalid(&'static str),
    #[error("t test needs at least 2 units per group")]
    DegenerateGroups,
    #[error("quadrature failed to converge")]
    Quadrature,
}

/// A uniform draw strictly inside (0, 1) with 53-bit resolution.
#[inline]
fn uniform_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

fn sample(dist: ResponseDist, rng: &mut impl RngCore) -> f64 {
    match dist {
        ResponseDist::Normal => normal_quantile(uniform_open(rng)),
        ResponseDist::T2 => t2_quantile(uniform_open(rng)),
    }
}

/// Draws one response: a successful trial is the maximum of `nu` independent
/// draws from `F`, an unsuccessful one a single draw.
pub fn draw_response(
    dist: ResponseDist,
    nu: u32,
    successful: bool,
    rng: &mut impl RngCore,
) -> f64 {
    if successful {
        let mut best = sample(dist, rng);
        for _ in 1..nu {
            best = best.max(sample(dist, rng));
        }
        best
    } else {
        sample(dist, rng)
    }
}

/// Applies an interference pattern to per-trial success flags. Control
/// trials are never successful.
pub fn apply_interference(
    z: &[bool],
    success: &[bool],
    kind: Interference,
) -> Vec<bool> {
    let n = z.len();
    let mut out = vec![false; n];
    for i in 0..n {
        if !(z[i] && success[i]) {
            continue;
        }
        out[i] = match kind {
            Interference::None => true,
            Interference::A => i >= 1 && !z[i - 1],
            Interference::B => i >= 1 && z[i - 1],
            Interference::C => i >= 2 && !z[i - 1] && !z[i - 2],
            Interference::D => i >= 3 && !z[i - 1] && !z[i - 2] && !z[i - 3],
        };
    }
    out
}

/// Adds stationary AR(1) errors with standard Normal marginals and
/// autocorrelation `rho` to `responses`.
pub fn add_ar_noise(responses: &mut [f64], rho: f64, rng: &mut impl RngCore) {
    assert!((0.0..1.0).contains(&rho));
    let innov_sd = libm::sqrt(1.0 - rho * rho);
    let mut eps = normal_quantile(uniform_open(rng));
    if let Some(first) = responses.first_mut() {
        *first += eps;
    }
    for r in responses.iter_mut().skip(1) {
        eps = rho * eps + innov_sd * normal_quantile(uniform_open(rng));
        *r += eps;
    }
}

/// Pooled-variance two-sample t statistic with a one-sided Student
/// rejection decision at level `alpha`.
pub fn pooled_t_test(
    responses: &[f64],
    treated: &[bool],
    alpha: f64,
) -> Result<(f64, bool), SimError> {
    let t = t_statistic(responses, treated)?;
    let df = (responses.len() - 2) as f64;
    Ok((t, t >= student_t_quantile(1.0 - alpha, df)))
}

fn t_statistic(responses: &[f64], treated: &[bool]) -> Result<f64, SimError> {
    let mut n = 0usize;
    let mut m = 0usize;
    let mut sum_t = 0.0;
    let mut sum_c = 0.0;
    for (&r, &z) in responses.iter().zip(treated) {
        if z {
            n += 1;
            sum_t += r;
        } else {
            m += 1;
            sum_c += r;
        }
    }
    if n < 2 || m < 2 {
        return Err(SimError::DegenerateGroups);
    }
    let (mean_t, mean_c) = (sum_t / n as f64, sum_c / m as f64);
    let mut ss = 0.0;
    for (&r, &z) in responses.iter().zip(treated) {
        let d = r - if z { mean_t } else { mean_c };
        ss += d * d;
    }
    let pooled = ss / (n + m - 2) as f64;
    Ok((mean_t - mean_c) / libm::sqrt(pooled * (1.0 / n as f64 + 1.0 / m as f64)))
}

/// Two-sided (or upper one-sided) cutoffs for the standardized placement
/// statistic, tabulated from the exact randomization null on a grid of
/// treated counts and linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementCalibration {
    pub trials: usize,
    pub k: usize,
    pub alpha: f64,
    pub tails: Tails,
    grid: Vec<(usize, f64, f64)>,
}

impl PlacementCalibration {
    /// Interpolated (lower, upper) deviate cutoffs at treated count `n`.
    pub fn cutoffs(&self, n: usize) -> (f64, f64) {
        let grid = &self.grid;
        if n <= grid[0].0 {
            return (grid[0].1, grid[0].2);
        }
        if n >= grid[grid.len() - 1].0 {
            let last = grid[grid.len() - 1];
            return (last.1, last.2);
        }
        for w in grid.windows(2) {
            let (n0, lo0, hi0) = w[0];
            let (n1, lo1, hi1) = w[1];
            if n0 <= n && n <= n1 {
                let f = (n - n0) as f64 / (n1 - n0) as f64;
                return (lo0 + f * (lo1 - lo0), hi0 + f * (hi1 - hi0));
            }
        }
        unreachable!("grid covers the clamped range")
    }
}

/// One null draw of the standardized placement statistic: scatter `n`
/// treated among `trials` positions uniformly and score the pattern.
fn null_deviate(
    pattern: &mut [bool],
    n: usize,
    score_of_c: &[f64],
    mean: f64,
    sd: f64,
    rng: &mut impl RngCore,
) -> f64 {
    let total = pattern.len();
    for p in pattern.iter_mut() {
        *p = false;
    }
    // Floyd-style sampling via partial Fisher-Yates on indices is O(total);
    // a simple selection loop keeps allocation out of the hot path.
    let mut chosen = 0usize;
    let mut i = 0usize;
    let mut remaining = total;
    let mut need = n;
    while need > 0 {
        // P(select index i) = need / remaining.
        let u = uniform_open(rng);
        if u * (remaining as f64) < (need as f64) {
            pattern[i] = true;
            need -= 1;
            chosen += 1;
        }
        i += 1;
        remaining -= 1;
    }
    debug_assert_eq!(chosen, n);
    let mut controls = 0usize;
    let mut score = 0.0;
    for &p in pattern.iter() {
        if p {
            score += score_of_c[controls];
        } else {
            controls += 1;
        }
    }
    (score - mean) / sd
}

/// Tabulates rejection cutoffs for the placement statistic at (trials, k)
/// by Monte Carlo from the exact null, on a grid of treated counts spanning
/// +/- 4 binomial standard deviations around `trials * treat_prob`.
pub fn calibrate_placement(
    trials: usize,
    treat_prob: f64,
    k: usize,
    alpha: f64,
    tails: Tails,
    draws: u64,
) -> PlacementCalibration {
    let center = trials as f64 * treat_prob;
    let sd_n = libm::sqrt(trials as f64 * treat_prob * (1.0 - treat_prob));
    let step = libm::ceil(sd_n).max(1.0) as i64;
    let mut grid_ns: Vec<usize> = Vec::new();
    for j in -4..=4i64 {
        let n = (libm::round(center) as i64 + j * step).clamp(1, trials as i64 - 1) as usize;
        if grid_ns.last() != Some(&n) {
            grid_ns.push(n);
        }
    }

    let mut grid = Vec::with_capacity(grid_ns.len());
    for (point, &n) in grid_ns.iter().enumerate() {
        let m = trials - n;
        let (mean, var) = block_moments(n, m, k, 1.0);
        let sd = libm::sqrt(var);
        let score_of_c: Vec<f64> = (0..=m)
            .map(|c| binomial_f64(c as u64, (k - 1) as u64))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
        rng.set_stream(splitmix64(
            (trials as u64) << 32 | (k as u64) << 16 | point as u64,
        ));
        let mut devs = Vec::with_capacity(draws as usize);
        let mut pattern = vec![false; trials];
        for _ in 0..draws {
            devs.push(null_deviate(&mut pattern, n, &score_of_c, mean, sd, &mut rng));
        }
        devs.sort_unstable_by(|a, b| a.total_cmp(b));
        let m_f = draws as f64;
        let (lo, hi) = match tails {
            Tails::Two => {
                let lo = devs[libm::floor(alpha / 2.0 * m_f) as usize];
                let hi = devs[(libm::ceil((1.0 - alpha / 2.0) * m_f) as usize - 1)
                    .min(devs.len() - 1)];
                (lo, hi)
            }
            Tails::One => {
                let hi =
                    devs[(libm::ceil((1.0 - alpha) * m_f) as usize - 1).min(devs.len() - 1)];
                (f64::NEG_INFINITY, hi)
            }
        };
        grid.push((n, lo, hi));
    }
    PlacementCalibration {
        trials,
        k,
        alpha,
        tails,
        grid,
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives the seed of scenario `index` from a master seed.
pub fn scenario_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Prepared per-scenario state: calibrations, moment tables, t cutoffs.
pub struct ScenarioRunner {
    scenario: SimScenario,
    /// Calibration per test (None for the t test or Normal mode).
    calibrations: Vec<Option<PlacementCalibration>>,
    /// Per-k moment tables indexed by treated count n.
    moments: Vec<Option<Vec<(f64, f64)>>>,
    t_crit: f64,
    z_lo: f64,
    z_hi: f64,
}

impl ScenarioRunner {
    pub fn new(scenario: &SimScenario) -> Result<Self, SimError> {
        Self::with_shared_calibrations(scenario, &mut Vec::new())
    }

    /// Builds a runner, reusing entries of `shared` (keyed by (trials, k,
    /// alpha-bits, tails)) so that identical calibrations are computed once
    /// across scenarios.
    pub fn with_shared_calibrations(
        scenario: &SimScenario,
        shared: &mut Vec<PlacementCalibration>,
    ) -> Result<Self, SimError> {
        if scenario.trials < 4 {
            return Err(SimError::TooFewTrials);
        }
        if !(scenario.treat_prob > 0.0 && scenario.treat_prob < 1.0) {
            return Err(SimError::Invalid("treat_prob must be in (0,1)"));
        }
        if !(0.0..=1.0).contains(&scenario.lambda) {
            return Err(SimError::Invalid("lambda must be in [0,1]"));
        }
        if scenario.nu < 1 {
            return Err(SimError::Invalid("nu must be at least 1"));
        }
        if !(scenario.alpha > 0.0 && scenario.alpha < 1.0) {
            return Err(SimError::Invalid("alpha must be in (0,1)"));
        }
        if scenario.ar_noise && !(0.0..1.0).contains(&scenario.ar_rho) {
            return Err(SimError::Invalid("ar_rho must be in [0,1)"));
        }
        if scenario.tests.is_empty() {
            return Err(SimError::Invalid("no tests requested"));
        }

        let mut calibrations = Vec::with_capacity(scenario.tests.len());
        let mut moments = Vec::with_capacity(scenario.tests.len());
        for test in &scenario.tests {
            match *test {
                TestKind::TTest => {
                    calibrations.push(None);
                    moments.push(None);
                }
                TestKind::Placement { k } => {
                    if k < 2 {
                        return Err(SimError::Invalid("placement test needs k >= 2"));
                    }
                    if scenario.calibration == Calibration::ExactMc {
                        let found = shared.iter().find(|c| {
                            c.trials == scenario.trials
                                && c.k == k
                                && c.alpha == scenario.alpha
                                && c.tails == scenario.tails
                        });
                        let cal = match found {
                            Some(c) => c.clone(),
                            None => {
                                let c = calibrate_placement(
                                    scenario.trials,
                                    scenario.treat_prob,
                                    k,
                                    scenario.alpha,
                                    scenario.tails,
                                    CALIBRATION_DRAWS,
                                );
                                shared.push(c.clone());
                                c
                            }
                        };
                        calibrations.push(Some(cal));
                    } else {
                        calibrations.push(None);
                    }
                    let table: Vec<(f64, f64)> = (0..=scenario.trials)
                        .map(|n| {
                            if n == 0 || n == scenario.trials {
                                (0.0, 0.0)
                            } else {
                                block_moments(n, scenario.trials - n, k, 1.0)
                            }
                        })
                        .collect();
                    moments.push(Some(table));
                }
            }
        }

        let df = (scenario.trials - 2) as f64;
        let t_crit = match scenario.tails {
            Tails::One => student_t_quantile(1.0 - scenario.alpha, df),
            Tails::Two => student_t_quantile(1.0 - scenario.alpha / 2.0, df),
        };
        let (z_lo, z_hi) = match scenario.tails {
            Tails::One => (f64::NEG_INFINITY, normal_quantile(1.0 - scenario.alpha)),
            Tails::Two => {
                let z = normal_quantile(1.0 - scenario.alpha / 2.0);
                (-z, z)
            }
        };

        Ok(ScenarioRunner {
            scenario: scenario.clone(),
            calibrations,
            moments,
            t_crit,
            z_lo,
            z_hi,
        })
    }

    pub fn scenario(&self) -> &SimScenario {
        &self.scenario
    }

    /// Runs replication `rep`, returning per-test rejection flags and the
    /// number of degenerate draws discarded. Pure function of (scenario,
    /// rep): safe to run replications in parallel in any order.
    pub fn run_replication(&self, rep: u64) -> (Vec<bool>, u64) {
        let s = &self.scenario;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(rep + 1);

        let total = s.trials;
        let mut z = vec![false; total];
        let mut success = vec![false; total];
        let mut responses = vec![0.0f64; total];
        let mut order: Vec<u32> = (0..total as u32).collect();
        let mut redraws = 0u64;

        'redraw: loop {
            let mut n = 0usize;
            for zi in z.iter_mut() {
                *zi = uniform_open(&mut rng) < s.treat_prob;
                n += *zi as usize;
            }
            if n == 0 || n == total {
                redraws += 1;
                continue;
            }
            for (si, &zi) in success.iter_mut().zip(&z) {
                *si = zi && uniform_open(&mut rng) < s.lambda;
            }
            let effective = apply_interference(&z, &success, s.interference);
            for (r, &eff) in responses.iter_mut().zip(&effective) {
                *r = draw_response(s.dist, s.nu, eff, &mut rng);
            }
            if s.ar_noise {
                let innov_sd = s.ar_sd * libm::sqrt(1.0 - s.ar_rho * s.ar_rho);
                let mut eps = s.ar_sd * normal_quantile(uniform_open(&mut rng));
                responses[0] += eps;
                for r in responses.iter_mut().skip(1) {
                    eps = s.ar_rho * eps + innov_sd * normal_quantile(uniform_open(&mut rng));
                    *r += eps;
                }
            }

            // Sorted walk shared by every placement test.
            order.sort_unstable_by(|&a, &b| {
                responses[a as usize].total_cmp(&responses[b as usize])
            });
            for w in order.windows(2) {
                if responses[w[0] as usize] == responses[w[1] as usize] {
                    redraws += 1;
                    continue 'redraw;
                }
            }

            let mut rejects = Vec::with_capacity(s.tests.len());
            for (idx, test) in s.tests.iter().enumerate() {
                let reject = match *test {
                    TestKind::TTest => {
                        let t = match t_statistic(&responses, &z) {
                            Ok(t) => t,
                            Err(_) => {
                                redraws += 1;
                                continue 'redraw;
                            }
                        };
                        match s.t_calibration {
                            TCalibration::Student => match s.tails {
                                Tails::One => t >= self.t_crit,
                                Tails::Two => libm::fabs(t) >= self.t_crit,
                            },
                            TCalibration::Permutation { draws } => {
                                self.permutation_t_reject(t, &responses, n, draws, &mut rng)
                            }
                        }
                    }
                    TestKind::Placement { k } => {
                        let (mean, var) = self.moments[idx].as_ref().expect("placement")[n];
                        if var <= 0.0 {
                            redraws += 1;
                            continue 'redraw;
                        }
                        let mut controls = 0u64;
                        let mut score = 0.0;
                        for &o in &order {
                            if z[o as usize] {
                                score += binomial_f64(controls, (k - 1) as u64);
                            } else {
                                controls += 1;
                            }
                        }
                        let dev = (score - mean) / libm::sqrt(var);
                        match &self.calibrations[idx] {
                            Some(cal) => {
                                let (lo, hi) = cal.cutoffs(n);
                                dev > hi || dev < lo
                            }
                            None => dev > self.z_hi || dev < self.z_lo,
                        }
                    }
                };
                rejects.push(reject);
            }
            return (rejects, redraws);
        }
    }

    fn permutation_t_reject(
        &self,
        observed: f64,
        responses: &[f64],
        n: usize,
        draws: u32,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        let total = responses.len();
        let mut pattern = vec![false; total];
        let mut at_least = 1u32;
        for _ in 0..draws {
            for p in pattern.iter_mut() {
                *p = false;
            }
            let mut need = n;
            let mut remaining = total;
            let mut i = 0usize;
            while need > 0 {
                if uniform_open(rng) * (remaining as f64) < (need as f64) {
                    pattern[i] = true;
                    need -= 1;
                }
                i += 1;
                remaining -= 1;
            }
            if let Ok(t) = t_statistic(responses, &pattern) {
                let exceeds = match self.scenario.tails {
                    Tails::One => t >= observed,
                    Tails::Two => libm::fabs(t) >= libm::fabs(observed),
                };
                if exceeds {
                    at_least += 1;
                }
            }
        }
        (at_least as f64) / (draws as f64 + 1.0) <= self.scenario.alpha
    }

    /// Runs every replication sequentially and aggregates counts.
    pub fn run(&self) -> PowerRow {
        let mut rejections = vec![0u64; self.scenario.tests.len()];
        let mut redraws = 0u64;
        for rep in 0..self.scenario.replications {
            let (flags, re) = self.run_replication(rep);
            for (c, f) in rejections.iter_mut().zip(flags) {
                *c += f as u64;
            }
            redraws += re;
        }
        PowerRow {
            scenario: self.scenario.clone(),
            rejections,
            replications: self.scenario.replications,
            redraws,
        }
    }
}

/// Convenience wrapper: prepare and run one scenario sequentially.
pub fn run_scenario(scenario: &SimScenario) -> Result<PowerRow, SimError> {
    Ok(ScenarioRunner::new(scenario)?.run())
}

/// In the large-sample limit of a shift-`delta` two-sample problem without
/// interference, the probability that one treated response exceeds `k - 1`
/// independent controls, and the percent increase of that probability over
/// the chance level `1/k`.
pub fn limit_probability(
    delta: f64,
    k: usize,
    dist: ResponseDist,
) -> Result<(f64, f64), SimError> {
    if k < 2 {
        return Err(SimError::Invalid("k must be at least 2"));
    }
    let km1 = (k - 1) as i32;
    let p = if delta == 0.0 {
        // Exchangeability: every one of the k units is equally likely to be
        // the maximum.
        1.0 / k as f64
    } else {
        match dist {
            ResponseDist::Normal => {
                let f = |y: f64| normal_pdf(y) * powi(normal_cdf(y + delta), km1);
                integrate(&f, -9.0, 9.0, 1e-9)
            }
            ResponseDist::T2 => {
                // Substituting u = F(y) for the treated base draw keeps the
                // integrand bounded despite the heavy tails.
                let f = |u: f64| {
                    if u <= 0.0 {
                        0.0
                    } else if u >= 1.0 {
                        1.0
                    } else {
                        powi(t2_cdf(t2_quantile(u) + delta), km1)
                    }
                };
                integrate(&f, 0.0, 1.0, 1e-9)
            }
        }
    };
    if !(0.0..=1.0 + 1e-9).contains(&p) {
        return Err(SimError::Quadrature);
    }
    let p = p.min(1.0);
    let pct = 100.0 * (p * k as f64 - 1.0);
    Ok((p, pct))
}

fn powi(base: f64, mut exp: i32) -> f64 {
    let mut acc = 1.0;
    let mut b = base;
    while exp > 0 {
        if exp & 1 == 1 {
            acc *= b;
        }
        b *= b;
        exp >>= 1;
    }
    acc
}
