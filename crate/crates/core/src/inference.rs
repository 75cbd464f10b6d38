//! Tests of no treatment effect and attributable-effect confidence bounds.
//!
//! The observed statistic is compared with the known distribution the same
//! randomization would have produced in a uniformity trial (no active
//! treatment). Because `T - t_tilde_alpha` is a distribution-free
//! 1 - alpha lower confidence bound for the unobservable attributable effect
//! `A = T - T_tilde`, the report carries both the test (deviate, p-value)
//! and the fractional-increase estimates `A / E(T_tilde)`.


use alloc::vec::Vec;

use crate::nulldist::{
    block_exact_pmf, convolve_all, critical_value, total_moments, NullDistError,
    NullDistribution, DEFAULT_DP_BUDGET,
};
use crate::placement::{
    degenerate_block_count, group_trials, placements, resolve_weights, statistic,
    BlockSummary, PlacementError, TrialRecord, WeightScheme,
};
use crate::special::normal_cdf;

/// Direction of the alternative carried by a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Elevation,
    Suppression,
}

/// Requested null-distribution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Exact when feasible (small designs), Normal otherwise.
    Auto,
    Exact,
    Normal,
}

/// Mode actually used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResolvedMode {
    Exact,
    Normal,
}

/// Normal mode is selected automatically at or above this block count.
pub const AUTO_NORMAL_MIN_BLOCKS: usize = 30;

/// Full output of one test.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub k: usize,
    pub t_obs: f64,
    pub null_mean: f64,
    pub null_var: f64,
    /// `(t_obs - null_mean) / sqrt(null_var)`.
    pub deviate: f64,
    /// One-sided upper-tail `P(T_tilde >= t_obs)`.
    pub p_value: f64,
    /// `(t_obs - null_mean) / null_mean`.
    pub point_estimate_fraction: f64,
    /// `(t_obs - t_tilde) / null_mean`.
    pub ci_lower_fraction: f64,
    /// Critical value `t_tilde_alpha`.
    pub t_tilde: f64,
    pub alpha: f64,
    pub direction: Direction,
    pub mode: ResolvedMode,
    pub blocks: usize,
    /// Blocks with `m < k - 1`, which contribute zero score and moments.
    pub degenerate_blocks: usize,
    /// Blocks dropped by lag subsetting (zero otherwise).
    pub dropped_blocks: usize,
}

impl InferenceReport {
    /// Two-sided p-value by doubling the smaller tail.
    pub fn two_sided_p(&self) -> f64 {
        (2.0 * self.p_value.min(1.0 - self.p_value)).min(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InferenceError {
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Null(#[from] NullDistError),
    #[error("alpha must be in (0, 1), got {alpha}")]
    InvalidAlpha { alpha: f64 },
    #[error("no trials supplied")]
    NoTrials,
    #[error("null distribution is degenerate (zero variance); k may exceed every block")]
    DegenerateNull,
    #[error("every block became degenerate after lag subsetting")]
    AllBlocksDropped,
}

fn summarize_blocks(
    trials: &[TrialRecord],
) -> Result<Vec<BlockSummary>, InferenceError> {
    if trials.is_empty() {
        return Err(InferenceError::NoTrials);
    }
    let groups = group_trials(trials);
    let mut out = Vec::with_capacity(groups.len());
    for block in groups.values() {
        out.push(placements(block)?);
    }
    Ok(out)
}

fn report_from_blocks(
    blocks: &[BlockSummary],
    k: usize,
    scheme: WeightScheme,
    mode: Mode,
    alpha: f64,
    direction: Direction,
    dropped_blocks: usize,
) -> Result<InferenceReport, InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidAlpha { alpha });
    }
    let t_obs = statistic(blocks, k, scheme)?;
    let weights = resolve_weights(blocks, k, scheme);
    let moment_spec: Vec<(usize, usize, f64)> = blocks
        .iter()
        .zip(&weights)
        .map(|(b, &w)| (b.n, b.m, w))
        .collect();
    let (null_mean, null_var) = total_moments(&moment_spec, k)?;
    if null_var <= 0.0 || null_mean <= 0.0 {
        return Err(InferenceError::DegenerateNull);
    }

    let exact = match mode {
        Mode::Normal => None,
        Mode::Exact => Some(exact_convolution(&moment_spec, k)?),
        Mode::Auto => {
            if blocks.len() >= AUTO_NORMAL_MIN_BLOCKS {
                None
            } else {
                match exact_convolution(&moment_spec, k) {
                    Ok(d) => Some(d),
                    Err(
                        InferenceError::Null(NullDistError::BudgetExceeded { .. })
                        | InferenceError::Null(NullDistError::CountOverflow)
                        | InferenceError::Null(NullDistError::SupportTooLarge),
                    ) => None,
                    Err(e) => return Err(e),
                }
            }
        }
    };

    let sd = libm::sqrt(null_var);
    let deviate = (t_obs - null_mean) / sd;
    let (p_value, t_tilde, resolved) = match &exact {
        Some(dist) => {
            let cv = critical_value(dist, alpha)?;
            (dist.upper_tail(t_obs), cv.t_tilde, ResolvedMode::Exact)
        }
        None => {
            let normal = NullDistribution::Normal {
                mean: null_mean,
                variance: null_var,
            };
            let cv = critical_value(&normal, alpha)?;
            (1.0 - normal_cdf(deviate), cv.t_tilde, ResolvedMode::Normal)
        }
    };

    Ok(InferenceReport {
        k,
        t_obs,
        null_mean,
        null_var,
        deviate,
        p_value,
        point_estimate_fraction: (t_obs - null_mean) / null_mean,
        ci_lower_fraction: (t_obs - t_tilde) / null_mean,
        t_tilde,
        alpha,
        direction,
        mode: resolved,
        blocks: blocks.len(),
        degenerate_blocks: degenerate_block_count(blocks, k),
        dropped_blocks,
    })
}

fn exact_convolution(
    moment_spec: &[(usize, usize, f64)],
    k: usize,
) -> Result<NullDistribution, InferenceError> {
    let mut dists = Vec::with_capacity(moment_spec.len());
    for &(n, m, w) in moment_spec {
        dists.push(block_exact_pmf(n, m, k, w, DEFAULT_DP_BUDGET)?);
    }
    Ok(convolve_all(&dists)?)
}

/// Tests Fisher's hypothesis of no effect against elevated treated
/// responses, and bounds the attributable effect from below.
pub fn test_no_effect(
    trials: &[TrialRecord],
    k: usize,
    scheme: WeightScheme,
    mode: Mode,
    alpha: f64,
) -> Result<InferenceReport, InferenceError> {
    let blocks = summarize_blocks(trials)?;
    report_from_blocks(&blocks, k, scheme, mode, alpha, Direction::Elevation, 0)
}

/// Tests against suppressed treated responses by negating every response.
pub fn test_suppression(
    trials: &[TrialRecord],
    k: usize,
    scheme: WeightScheme,
    mode: Mode,
    alpha: f64,
) -> Result<InferenceReport, InferenceError> {
    let negated: Vec<TrialRecord> = trials
        .iter()
        .map(|t| TrialRecord {
            response: -t.response,
            ..t.clone()
        })
        .collect();
    let blocks = summarize_blocks(&negated)?;
    let mut report =
        report_from_blocks(&blocks, k, scheme, mode, alpha, Direction::Suppression, 0)?;
    report.direction = Direction::Suppression;
    Ok(report)
}

/// The 1 - alpha lower confidence bound for the attributable effect
/// `A = T - T_tilde`, namely `t_obs - t_tilde_alpha`.
pub fn attributable_bound(report: &InferenceReport) -> f64 {
    report.t_obs - report.t_tilde
}

/// Tests for lagged interference: among current go (control) trials, does
/// the previous trial's treatment predict the response?
///
/// Drops each block's first trial, keeps current-control trials, relabels
/// the previous trial's treatment as the exposure, and runs the usual test.
/// Blocks left without both exposure groups are dropped (counted in the
/// report).
pub fn lagged_interference_test(
    trials: &[TrialRecord],
    k: usize,
    scheme: WeightScheme,
    mode: Mode,
    alpha: f64,
) -> Result<InferenceReport, InferenceError> {
    if trials.is_empty() {
        return Err(InferenceError::NoTrials);
    }
    let groups = group_trials(trials);
    let mut relabeled = Vec::new();
    let mut dropped = 0usize;
    for (block_id, block) in &groups {
        let mut block_records: Vec<TrialRecord> = Vec::new();
        for pair in block.windows(2) {
            let (prev, cur) = (&pair[0], &pair[1]);
            if !cur.treated {
                block_records.push(TrialRecord {
                    block_id: block_id.clone(),
                    index: block_records.len() as u32,
                    treated: prev.treated,
                    response: cur.response,
                });
            }
        }
        let exposed = block_records.iter().filter(|t| t.treated).count();
        if exposed == 0 || exposed == block_records.len() {
            dropped += 1;
            continue;
        }
        relabeled.extend(block_records);
    }
    if relabeled.is_empty() {
        return Err(InferenceError::AllBlocksDropped);
    }
    let blocks = summarize_blocks(&relabeled)?;
    report_from_blocks(
        &blocks,
        k,
        scheme,
        mode,
        alpha,
        Direction::Elevation,
        dropped,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::normal_quantile;
    use alloc::format;
    use alloc::string::ToString;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trial(block: &str, index: u32, treated: bool, response: f64) -> TrialRecord {
        TrialRecord {
            block_id: block.to_string(),
            index,
            treated,
            response,
        }
    }

    #[test]
    fn observed_at_null_mean_gives_zero_deviate() {
        // U(2,2): responses t=(1,4), c=(2,3) give T = 2 = E(T_tilde).
        let trials = vec![
            trial("b", 0, true, 1.0),
            trial("b", 1, true, 4.0),
            trial("b", 2, false, 2.0),
            trial("b", 3, false, 3.0),
        ];
        let r = test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Auto, 0.05).unwrap();
        assert_eq!(r.t_obs, 2.0);
        assert_eq!(r.deviate, 0.0);
        assert_eq!(r.point_estimate_fraction, 0.0);
        assert_eq!(r.mode, ResolvedMode::Exact);
    }

    #[test]
    fn treated_maximum_of_ten_units() {
        // n=1, m=9, k=10: E = 1/10, so a treated maximum gives a 9-fold
        // increase over chance.
        let mut trials = vec![trial("b", 0, true, 100.0)];
        for j in 0..9 {
            trials.push(trial("b", j + 1, false, j as f64));
        }
        let r = test_no_effect(&trials, 10, WeightScheme::Equal, Mode::Exact, 0.05).unwrap();
        assert_eq!(r.t_obs, 1.0);
        assert!((r.null_mean - 0.1).abs() < 1e-12);
        assert!((r.point_estimate_fraction - 9.0).abs() < 1e-9);
        assert!((r.p_value - 0.1).abs() < 1e-12);
    }

    #[test]
    fn suppression_is_elevation_on_negated_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials: Vec<TrialRecord> = (0..40)
            .map(|i| trial("b", i, i % 4 == 0, rng.gen::<f64>()))
            .collect();
        let negated: Vec<TrialRecord> = trials
            .iter()
            .map(|t| TrialRecord {
                response: -t.response,
                ..t.clone()
            })
            .collect();
        let supp = test_suppression(&trials, 2, WeightScheme::Equal, Mode::Auto, 0.05).unwrap();
        let elev = test_no_effect(&negated, 2, WeightScheme::Equal, Mode::Auto, 0.05).unwrap();
        assert_eq!(supp.t_obs, elev.t_obs);
        assert_eq!(supp.deviate, elev.deviate);
        assert_eq!(supp.p_value, elev.p_value);
        assert_eq!(supp.direction, Direction::Suppression);
    }

    #[test]
    fn suppression_on_treated_minimum() {
        let trials = vec![
            trial("b", 0, true, -5.0),
            trial("b", 1, false, 1.0),
            trial("b", 2, false, 2.0),
            trial("b", 3, false, 3.0),
        ];
        let r = test_suppression(&trials, 2, WeightScheme::Equal, Mode::Exact, 0.05).unwrap();
        assert_eq!(r.t_obs, 3.0);
    }

    #[test]
    fn mann_whitney_two_sided_p_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(5..40);
            let m = rng.gen_range(5..40);
            let trials: Vec<TrialRecord> = (0..n + m)
                .map(|i| trial("b", i as u32, (i as usize) < n, rng.gen::<f64>()))
                .collect();
            let r =
                test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Normal, 0.05).unwrap();
            // Independent Mann-Whitney reference: U by pair counting, plain
            // Normal approximation, no continuity correction.
            let treated: Vec<f64> = trials
                .iter()
                .filter(|t| t.treated)
                .map(|t| t.response)
                .collect();
            let controls: Vec<f64> = trials
                .iter()
                .filter(|t| !t.treated)
                .map(|t| t.response)
                .collect();
            let mut u = 0.0;
            for t in &treated {
                for c in &controls {
                    if t > c {
                        u += 1.0;
                    }
                }
            }
            let (nf, mf) = (n as f64, m as f64);
            let z = (u - nf * mf / 2.0) / libm::sqrt(nf * mf * (nf + mf + 1.0) / 12.0);
            let p_ref = 2.0 * (1.0 - normal_cdf(libm::fabs(z)));
            assert!(
                (r.two_sided_p() - p_ref).abs() < 1e-9,
                "n={n} m={m}: {} vs {p_ref}",
                r.two_sided_p()
            );
            assert_eq!(r.t_obs, u);
        }
    }

    #[test]
    fn ci_lower_strictly_below_point_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials: Vec<TrialRecord> = (0..60)
            .map(|i| {
                let treated = i % 3 == 0;
                trial(
                    &format!("b{}", i % 4),
                    i,
                    treated,
                    rng.gen::<f64>() + if treated { 0.4 } else { 0.0 },
                )
            })
            .collect();
        for k in [2usize, 3, 5] {
            let r = test_no_effect(&trials, k, WeightScheme::Equal, Mode::Auto, 0.05).unwrap();
            assert!(r.ci_lower_fraction < r.point_estimate_fraction);
            assert_eq!(attributable_bound(&r), r.t_obs - r.t_tilde);
        }
    }

    #[test]
    fn size_is_nominal_under_null() {
        // B=1, n=m=125 exchangeable responses; one-sided level 0.05.
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let reps = 5000;
        let mut rejections = 0;
        for _ in 0..reps {
            let trials: Vec<TrialRecord> = (0..250)
                .map(|i| trial("b", i, i < 125, rng.gen::<f64>()))
                .collect();
            let r =
                test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Auto, 0.05).unwrap();
            assert_eq!(r.mode, ResolvedMode::Normal);
            if r.p_value <= 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!((rate - 0.05).abs() <= 0.012, "size {rate}");
    }

    #[test]
    fn attributable_bound_coverage_under_rerandomization() {
        // Fixed uniformity responses; re-randomize Z and check
        // P(A >= T - t_tilde) = P(T_tilde <= t_tilde) >= 0.95 in exact mode.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let responses: Vec<f64> = (0..14).map(|_| rng.gen::<f64>()).collect();
        let reps = 4000;
        // t_tilde is data-independent: compute it from any assignment.
        let base: Vec<TrialRecord> = responses
            .iter()
            .enumerate()
            .map(|(i, &r)| trial("b", i as u32, i < 6, r))
            .collect();
        let fixed =
            test_no_effect(&base, 2, WeightScheme::Equal, Mode::Exact, 0.05).unwrap();
        let mut covered = 0;
        let mut order: Vec<usize> = (0..14).collect();
        for _ in 0..reps {
            // Random subset of 6 treated among 14.
            for i in 0..6 {
                let j = rng.gen_range(i..14);
                order.swap(i, j);
            }
            let trials: Vec<TrialRecord> = (0..14)
                .map(|i| trial("b", i as u32, order[..6].contains(&i), responses[i]))
                .collect();
            let r =
                test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Exact, 0.05).unwrap();
            // Uniformity trial: same responses, so T_tilde = T here and
            // A = 0; coverage is the event T_tilde <= t_tilde.
            if 0.0 >= attributable_bound(&r) {
                covered += 1;
            }
            assert_eq!(r.t_tilde, fixed.t_tilde);
        }
        let coverage = covered as f64 / reps as f64;
        assert!(coverage >= 0.94, "coverage {coverage}");
    }

    #[test]
    fn lag_test_hand_trace() {
        let trials = vec![
            trial("b", 0, false, 1.0),
            trial("b", 1, false, 2.0),
            trial("b", 2, true, 3.0),
            trial("b", 3, false, 4.0),
        ];
        let r =
            lagged_interference_test(&trials, 2, WeightScheme::Equal, Mode::Exact, 0.05)
                .unwrap();
        // Kept trials: index 1 (prev control, response 2) and index 3
        // (prev treated, response 4); the exposed unit wins its one pair.
        assert_eq!(r.t_obs, 1.0);
        assert_eq!(r.blocks, 1);
        assert_eq!(r.dropped_blocks, 0);
    }

    #[test]
    fn lag_test_drops_unusable_blocks() {
        // Block "solo" has only go trials after a go, so no exposed group.
        let trials = vec![
            trial("solo", 0, false, 1.0),
            trial("solo", 1, false, 2.0),
            trial("ok", 0, false, 1.0),
            trial("ok", 1, false, 2.5),
            trial("ok", 2, true, 3.0),
            trial("ok", 3, false, 4.0),
        ];
        let r =
            lagged_interference_test(&trials, 2, WeightScheme::Equal, Mode::Exact, 0.05)
                .unwrap();
        assert_eq!(r.dropped_blocks, 1);
        assert_eq!(r.blocks, 1);

        let only_solo = &trials[..2];
        assert!(matches!(
            lagged_interference_test(only_solo, 2, WeightScheme::Equal, Mode::Exact, 0.05),
            Err(InferenceError::AllBlocksDropped)
        ));
    }

    #[test]
    fn lag_test_size_and_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // Size: responses independent of the previous treatment.
        let reps = 2000;
        let mut rejections = 0;
        for _ in 0..reps {
            let mut trials = Vec::new();
            for b in 0..10 {
                for i in 0..40 {
                    trials.push(trial(
                        &format!("b{b:02}"),
                        i,
                        rng.gen::<f64>() < 0.25,
                        rng.gen::<f64>(),
                    ));
                }
            }
            let r =
                lagged_interference_test(&trials, 2, WeightScheme::Equal, Mode::Auto, 0.05)
                    .unwrap();
            if r.p_value <= 0.05 {
                rejections += 1;
            }
        }
        let size = rejections as f64 / reps as f64;
        assert!((size - 0.05).abs() < 0.02, "lag size {size}");

        // Power: a lingering effect of the previous stop trial.
        let mut hits = 0;
        let power_reps = 300;
        for _ in 0..power_reps {
            let mut trials = Vec::new();
            for b in 0..50 {
                let mut prev = false;
                for i in 0..97 {
                    let z = rng.gen::<f64>() < 0.25;
                    let resp = if prev { 1.0 } else { 0.0 } + rng.gen::<f64>();
                    trials.push(trial(&format!("b{b:02}"), i, z, resp));
                    prev = z;
                }
            }
            let r =
                lagged_interference_test(&trials, 2, WeightScheme::Equal, Mode::Auto, 0.05)
                    .unwrap();
            if r.p_value <= 0.05 {
                hits += 1;
            }
        }
        let power = hits as f64 / power_reps as f64;
        assert!(power > 0.9, "lag power {power}");
    }

    #[test]
    fn rejects_bad_alpha_and_empty_input() {
        let trials = vec![trial("b", 0, true, 1.0), trial("b", 1, false, 0.0)];
        assert!(matches!(
            test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Auto, 0.0),
            Err(InferenceError::InvalidAlpha { .. })
        ));
        assert!(matches!(
            test_no_effect(&[], 2, WeightScheme::Equal, Mode::Auto, 0.05),
            Err(InferenceError::NoTrials)
        ));
    }
}
