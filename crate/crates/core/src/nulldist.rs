//! Null distribution of the statistic in the uniformity trial.
//!
//! Within one block, conditional on the responses and on (n, m), every
//! arrangement of the n treated units among the n + m order positions is
//! equally likely, so the distribution of the block score
//! `sum_j C(u_j, k-1)` depends only on (n, m, k). [`block_exact_pmf`]
//! computes it by a dynamic program over ranks; across blocks the total is
//! the convolution of independent block scores ([`convolve`]), with closed
//! form mean and variance ([`block_moments`], [`total_moments`]) and a
//! Normal approximation for many blocks.

use alloc::vec;
use alloc::vec::Vec;

use crate::binom::{binomial_f64, binomial_u64};
use crate::special::{normal_cdf, normal_quantile};

/// Default cap on the DP state space `(n+1)(m+1)(max_score+1)`.
pub const DEFAULT_DP_BUDGET: u64 = 100_000_000;

/// Probability entries below this are pruned (and the rest renormalized)
/// during convolution.
pub const PRUNE_EPS: f64 = 1e-15;

/// Distribution of the uniformity-trial statistic.
#[derive(Debug, Clone, PartialEq)]
pub enum NullDistribution {
    /// Exact pmf on a sorted support.
    Exact {
        values: Vec<f64>,
        probs: Vec<f64>,
        /// Total mass removed by pruning, before renormalization.
        pruned_mass: f64,
    },
    /// Normal approximation, carrying the exact moments.
    Normal { mean: f64, variance: f64 },
}

/// A critical value `t_tilde` at level `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalValue {
    pub alpha: f64,
    pub t_tilde: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NullDistError {
    #[error("exact pmf needs {states} DP states, over the budget of {budget}; use Normal mode")]
    BudgetExceeded { states: u64, budget: u64 },
    #[error("assignment count overflows 128-bit integers; use Normal mode")]
    CountOverflow,
    #[error("convolve requires exact-mode inputs")]
    MixedModes,
    #[error("convolution support too large")]
    SupportTooLarge,
    #[error("critical value undefined for a Normal null with zero variance")]
    ZeroVariance,
    #[error("no blocks supplied")]
    Empty,
    #[error("invalid parameters: {0}")]
    Invalid(&'static str),
}

impl NullDistribution {
    pub fn is_exact(&self) -> bool {
        matches!(self, NullDistribution::Exact { .. })
    }

    pub fn mean(&self) -> f64 {
        match self {
            NullDistribution::Exact { values, probs, .. } => values
                .iter()
                .zip(probs)
                .map(|(v, p)| v * p)
                .sum(),
            NullDistribution::Normal { mean, .. } => *mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            NullDistribution::Exact { values, probs, .. } => {
                let mean = self.mean();
                values
                    .iter()
                    .zip(probs)
                    .map(|(v, p)| (v - mean) * (v - mean) * p)
                    .sum()
            }
            NullDistribution::Normal { variance, .. } => *variance,
        }
    }

    /// `P(T_tilde >= t)`, the one-sided upper-tail probability.
    pub fn upper_tail(&self, t: f64) -> f64 {
        match self {
            NullDistribution::Exact { values, probs, .. } => {
                let eps = 1e-9 * (1.0 + libm::fabs(t));
                values
                    .iter()
                    .zip(probs)
                    .filter(|(v, _)| **v >= t - eps)
                    .map(|(_, p)| p)
                    .sum()
            }
            NullDistribution::Normal { mean, variance } => {
                if *variance <= 0.0 {
                    return if t <= *mean { 1.0 } else { 0.0 };
                }
                1.0 - normal_cdf((t - mean) / libm::sqrt(*variance))
            }
        }
    }

    /// `P(T_tilde <= t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            NullDistribution::Exact { values, probs, .. } => {
                let eps = 1e-9 * (1.0 + libm::fabs(t));
                values
                    .iter()
                    .zip(probs)
                    .filter(|(v, _)| **v <= t + eps)
                    .map(|(_, p)| p)
                    .sum()
            }
            NullDistribution::Normal { mean, variance } => {
                if *variance <= 0.0 {
                    return if t >= *mean { 1.0 } else { 0.0 };
                }
                normal_cdf((t - mean) / libm::sqrt(*variance))
            }
        }
    }
}

/// Null mean and variance of one block's score `sum_j phi(U_j)` with
/// `phi(u) = w C(u, k-1)`.
///
/// The mean is `n * phibar` with `phibar = w C(m+1, k)/(m+1)`; the variance
/// is `n(n+m+1)/((m+1)(m+2)) * [sum_j w^2 C(j,k-1)^2 - (m+1) phibar^2]`.
/// Division is deferred to one final step so that the k = 2 case reduces to
/// the Mann-Whitney forms `nm/2` and `nm(n+m+1)/12` without extra rounding.
pub fn block_moments(n: usize, m: usize, k: usize, w: f64) -> (f64, f64) {
    assert!(n >= 1 && k >= 2, "block_moments requires n >= 1, k >= 2");
    if m + 1 < k {
        return (0.0, 0.0);
    }
    let (n_f, m_f) = (n as f64, m as f64);
    let phibar = w * binomial_f64((m + 1) as u64, k as u64) / (m_f + 1.0);
    let mut sum_sq = 0.0;
    for j in 0..=m {
        let c = w * binomial_f64(j as u64, (k - 1) as u64);
        sum_sq += c * c;
    }
    let bracket = sum_sq - (m_f + 1.0) * phibar * phibar;
    let mean = n_f * phibar;
    let variance = (n_f * (n_f + m_f + 1.0) * bracket) / ((m_f + 1.0) * (m_f + 2.0));
    (mean, variance.max(0.0))
}

/// Sums block means and variances: the blocks are conditionally independent.
pub fn total_moments(blocks: &[(usize, usize, f64)], k: usize) -> Result<(f64, f64), NullDistError> {
    if blocks.is_empty() {
        return Err(NullDistError::Empty);
    }
    let mut mean = 0.0;
    let mut var = 0.0;
    for &(n, m, w) in blocks {
        let (e, v) = block_moments(n, m, k, w);
        mean += e;
        var += v;
    }
    Ok((mean, var))
}

/// Exact pmf of one block's score under uniform random assignment of `n`
/// treated among `n + m` tie-free responses.
///
/// Dynamic program over ranks from smallest to largest: the state is the
/// number of treated placed so far and the accumulated integer score; placing
/// a treated unit after `c` controls adds `C(c, k-1)`. Counts are exact
/// 128-bit integers; `w` scales the support afterwards.
pub fn block_exact_pmf(
    n: usize,
    m: usize,
    k: usize,
    w: f64,
    budget: u64,
) -> Result<NullDistribution, NullDistError> {
    if n < 1 || m < 1 {
        return Err(NullDistError::Invalid("need n >= 1 and m >= 1"));
    }
    if k < 2 {
        return Err(NullDistError::Invalid("need k >= 2"));
    }
    let max_score = binomial_u64(m as u64, (k - 1) as u64)
        .and_then(|c| c.checked_mul(n as u64))
        .ok_or(NullDistError::CountOverflow)?;
    let states = ((n + 1) as u64)
        .checked_mul((m + 1) as u64)
        .and_then(|s| s.checked_mul(max_score + 1))
        .ok_or(NullDistError::BudgetExceeded {
            states: u64::MAX,
            budget,
        })?;
    if states > budget {
        return Err(NullDistError::BudgetExceeded { states, budget });
    }

    let width = (max_score + 1) as usize;
    // score_of_c[c] = C(c, k-1), the increment when a treated unit lands
    // after c controls.
    let score_of_c: Vec<u64> = (0..=m)
        .map(|c| binomial_u64(c as u64, (k - 1) as u64).unwrap_or(0))
        .collect();

    let mut dp: Vec<Vec<u128>> = vec![vec![0u128; width]; n + 1];
    dp[0][0] = 1;
    for i in 0..(n + m) {
        let t_hi = i.min(n);
        let t_lo = i.saturating_sub(m);
        for t in (t_lo..=t_hi).rev() {
            let c = i - t;
            if t < n {
                let shift = score_of_c[c] as usize;
                // Split to appease the borrow checker.
                let (lower, upper) = dp.split_at_mut(t + 1);
                let src = &lower[t];
                let dst = &mut upper[0];
                for s in 0..width.saturating_sub(shift) {
                    let cnt = src[s];
                    if cnt != 0 {
                        dst[s + shift] = dst[s + shift]
                            .checked_add(cnt)
                            .ok_or(NullDistError::CountOverflow)?;
                    }
                }
            }
            if c == m {
                // All controls used: the remaining units must be treated, so
                // this state cannot absorb another control.
                for s in dp[t].iter_mut() {
                    *s = 0;
                }
            }
        }
    }

    let total: u128 = dp[n].iter().sum();
    if total == 0 {
        return Err(NullDistError::Invalid("empty assignment space"));
    }
    let mut values = Vec::new();
    let mut probs = Vec::new();
    for (s, &cnt) in dp[n].iter().enumerate() {
        if cnt != 0 {
            values.push(w * s as f64);
            probs.push(cnt as f64 / total as f64);
        }
    }
    Ok(NullDistribution::Exact {
        values,
        probs,
        pruned_mass: 0.0,
    })
}

/// Exact pmf of the sum of two independent exact distributions, pruning
/// probabilities below [`PRUNE_EPS`] and renormalizing.
pub fn convolve(
    a: &NullDistribution,
    b: &NullDistribution,
) -> Result<NullDistribution, NullDistError> {
    let (av, ap, a_pruned) = match a {
        NullDistribution::Exact {
            values,
            probs,
            pruned_mass,
        } => (values, probs, *pruned_mass),
        _ => return Err(NullDistError::MixedModes),
    };
    let (bv, bp, b_pruned) = match b {
        NullDistribution::Exact {
            values,
            probs,
            pruned_mass,
        } => (values, probs, *pruned_mass),
        _ => return Err(NullDistError::MixedModes),
    };

    let lattice = av.iter().chain(bv.iter()).all(|&v| v >= 0.0 && v == libm::trunc(v));
    let (mut values, mut probs) = if lattice {
        let a_min = av.first().copied().unwrap_or(0.0) as u64;
        let a_max = av.last().copied().unwrap_or(0.0) as u64;
        let b_min = bv.first().copied().unwrap_or(0.0) as u64;
        let b_max = bv.last().copied().unwrap_or(0.0) as u64;
        let len = (a_max + b_max - a_min - b_min + 1) as usize;
        if len > (1 << 27) {
            return Err(NullDistError::SupportTooLarge);
        }
        let offset = a_min + b_min;
        let mut acc = vec![0.0f64; len];
        for (va, pa) in av.iter().zip(ap) {
            let ia = *va as u64;
            for (vb, pb) in bv.iter().zip(bp) {
                acc[(ia + *vb as u64 - offset) as usize] += pa * pb;
            }
        }
        let mut values = Vec::new();
        let mut probs = Vec::new();
        for (s, &p) in acc.iter().enumerate() {
            if p > 0.0 {
                values.push((offset + s as u64) as f64);
                probs.push(p);
            }
        }
        (values, probs)
    } else {
        let mut acc: alloc::collections::BTreeMap<u64, f64> = alloc::collections::BTreeMap::new();
        if av.len() * bv.len() > (1 << 26) {
            return Err(NullDistError::SupportTooLarge);
        }
        for (va, pa) in av.iter().zip(ap) {
            for (vb, pb) in bv.iter().zip(bp) {
                let v = va + vb;
                *acc.entry(v.to_bits()).or_insert(0.0) += pa * pb;
            }
        }
        let values: Vec<f64> = acc.keys().map(|&b| f64::from_bits(b)).collect();
        let probs: Vec<f64> = acc.values().copied().collect();
        (values, probs)
    };

    // Prune and renormalize.
    let mut pruned = 0.0;
    let mut keep_values = Vec::with_capacity(values.len());
    let mut keep_probs = Vec::with_capacity(probs.len());
    for (v, p) in values.drain(..).zip(probs.drain(..)) {
        if p < PRUNE_EPS {
            pruned += p;
        } else {
            keep_values.push(v);
            keep_probs.push(p);
        }
    }
    if keep_probs.is_empty() {
        return Err(NullDistError::Invalid("all mass pruned"));
    }
    if pruned > 0.0 {
        let mass: f64 = keep_probs.iter().sum();
        for p in keep_probs.iter_mut() {
            *p /= mass;
        }
    }
    Ok(NullDistribution::Exact {
        values: keep_values,
        probs: keep_probs,
        pruned_mass: a_pruned + b_pruned + pruned,
    })
}

/// Convolves a sequence of exact distributions by a left fold.
pub fn convolve_all(dists: &[NullDistribution]) -> Result<NullDistribution, NullDistError> {
    let mut iter = dists.iter();
    let first = iter.next().ok_or(NullDistError::Empty)?.clone();
    iter.try_fold(first, |acc, d| convolve(&acc, d))
}

/// The critical value `t_tilde_alpha`: in exact mode the smallest support
/// value with `P(T_tilde <= t) >= 1 - alpha`; in Normal mode
/// `mean + z_{1-alpha} * sd`.
pub fn critical_value(
    dist: &NullDistribution,
    alpha: f64,
) -> Result<CriticalValue, NullDistError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(NullDistError::Invalid("alpha must be in (0, 1)"));
    }
    let t_tilde = match dist {
        NullDistribution::Exact { values, probs, .. } => {
            let mut cdf = 0.0;
            let mut result = *values.last().expect("nonempty support");
            for (v, p) in values.iter().zip(probs) {
                cdf += p;
                if cdf >= 1.0 - alpha - 1e-12 {
                    result = *v;
                    break;
                }
            }
            result
        }
        NullDistribution::Normal { mean, variance } => {
            if *variance <= 0.0 {
                return Err(NullDistError::ZeroVariance);
            }
            mean + normal_quantile(1.0 - alpha) * libm::sqrt(*variance)
        }
    };
    Ok(CriticalValue { alpha, t_tilde })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binom::binomial_u64;

    /// Brute-force pmf by enumerating all C(n+m, n) treated-position
    /// patterns over the sorted ranks.
    fn enumerate_pmf(n: usize, m: usize, k: usize) -> NullDistribution {
        let total_units = n + m;
        assert!(total_units <= 20);
        let mut counts: alloc::collections::BTreeMap<u64, u128> = alloc::collections::BTreeMap::new();
        let mut total: u128 = 0;
        for mask in 0u32..(1 << total_units) {
            if mask.count_ones() as usize != n {
                continue;
            }
            let mut score = 0u64;
            let mut controls_below = 0u64;
            for pos in 0..total_units {
                if mask >> pos & 1 == 1 {
                    score += binomial_u64(controls_below, (k - 1) as u64).unwrap();
                } else {
                    controls_below += 1;
                }
            }
            *counts.entry(score).or_insert(0) += 1;
            total += 1;
        }
        let values: alloc::vec::Vec<f64> = counts.keys().map(|&s| s as f64).collect();
        let probs: alloc::vec::Vec<f64> = counts.values().map(|&c| c as f64 / total as f64).collect();
        NullDistribution::Exact {
            values,
            probs,
            pruned_mass: 0.0,
        }
    }

    #[test]
    fn moments_mann_whitney_reduction() {
        let (mean, var) = block_moments(3, 3, 2, 1.0);
        assert_eq!(mean, 4.5);
        assert_eq!(var, 5.25);
        for n in 1..=12usize {
            for m in 1..=12usize {
                let (mean, var) = block_moments(n, m, 2, 1.0);
                assert_eq!(mean, (n * m) as f64 / 2.0, "mean n={n} m={m}");
                assert_eq!(var, (n * m * (n + m + 1)) as f64 / 12.0, "var n={n} m={m}");
            }
        }
    }

    #[test]
    fn moments_degenerate_block_is_zero() {
        assert_eq!(block_moments(3, 2, 4, 1.0), (0.0, 0.0));
    }

    #[test]
    fn moments_match_enumeration() {
        // n=2, m=4, k=3 over all C(6,2)=15 assignments.
        let pmf = enumerate_pmf(2, 4, 3);
        let (mean, var) = block_moments(2, 4, 3, 1.0);
        assert!((pmf.mean() - mean).abs() < 1e-12);
        assert!((pmf.variance() - var).abs() < 1e-12);
    }

    #[test]
    fn total_moments_additivity() {
        let one = total_moments(&[(3, 5, 1.0)], 2).unwrap();
        let single = block_moments(3, 5, 2, 1.0);
        assert_eq!(one, single);
        let two = total_moments(&[(3, 5, 1.0), (3, 5, 1.0)], 2).unwrap();
        assert_eq!(two, (2.0 * single.0, 2.0 * single.1));
        // 232 blocks at the paper's medians, k = 2.
        let blocks: alloc::vec::Vec<(usize, usize, f64)> =
            (0..232).map(|_| (24, 73, 1.0)).collect();
        let (mean, _) = total_moments(&blocks, 2).unwrap();
        assert_eq!(mean, 203_232.0);
    }

    #[test]
    fn exact_pmf_single_pair() {
        let d = block_exact_pmf(1, 1, 2, 1.0, DEFAULT_DP_BUDGET).unwrap();
        match &d {
            NullDistribution::Exact { values, probs, .. } => {
                assert_eq!(values.as_slice(), &[0.0, 1.0]);
                assert!((probs[0] - 0.5).abs() < 1e-15);
                assert!((probs[1] - 0.5).abs() < 1e-15);
            }
            _ => panic!("expected exact"),
        }
    }

    #[test]
    fn exact_pmf_mann_whitney_2_2() {
        let d = block_exact_pmf(2, 2, 2, 1.0, DEFAULT_DP_BUDGET).unwrap();
        match &d {
            NullDistribution::Exact { values, probs, .. } => {
                assert_eq!(values.as_slice(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
                let expected = [1.0, 1.0, 2.0, 1.0, 1.0];
                for (p, e) in probs.iter().zip(expected) {
                    assert_eq!(*p, e / 6.0);
                }
            }
            _ => panic!("expected exact"),
        }
    }

    #[test]
    fn exact_pmf_matches_enumeration() {
        for (n, m, k) in [(2, 3, 3), (3, 4, 2), (2, 5, 4), (4, 4, 3)] {
            let dp = block_exact_pmf(n, m, k, 1.0, DEFAULT_DP_BUDGET).unwrap();
            let brute = enumerate_pmf(n, m, k);
            assert_eq!(dp, brute, "n={n} m={m} k={k}");
        }
    }

    #[test]
    fn exact_pmf_budget_guard() {
        let err = block_exact_pmf(24, 73, 5, 1.0, DEFAULT_DP_BUDGET).unwrap_err();
        assert!(matches!(err, NullDistError::BudgetExceeded { .. }));
    }

    #[test]
    fn convolve_point_mass_identity() {
        let d = block_exact_pmf(2, 2, 2, 1.0, DEFAULT_DP_BUDGET).unwrap();
        let point = NullDistribution::Exact {
            values: alloc::vec![0.0],
            probs: alloc::vec![1.0],
            pruned_mass: 0.0,
        };
        assert_eq!(convolve(&d, &point).unwrap(), d);
    }

    #[test]
    fn convolve_two_blocks_matches_paired_enumeration() {
        let u22 = block_exact_pmf(2, 2, 2, 1.0, DEFAULT_DP_BUDGET).unwrap();
        let conv = convolve(&u22, &u22).unwrap();
        // Direct enumeration over the 36 pairs of assignments.
        let mut counts = [0u32; 9];
        let pmf = [1, 1, 2, 1, 1];
        for (i, ci) in pmf.iter().enumerate() {
            for (j, cj) in pmf.iter().enumerate() {
                counts[i + j] += ci * cj;
            }
        }
        match &conv {
            NullDistribution::Exact { values, probs, .. } => {
                assert_eq!(values.len(), 9);
                for (idx, (v, p)) in values.iter().zip(probs).enumerate() {
                    assert_eq!(*v, idx as f64);
                    assert!((p - counts[idx] as f64 / 36.0).abs() < 1e-15);
                }
            }
            _ => panic!(),
        }
        // Moment additivity.
        assert!((conv.mean() - 2.0 * u22.mean()).abs() < 1e-9);
        assert!((conv.variance() - 2.0 * u22.variance()).abs() < 1e-9);
    }

    #[test]
    fn critical_values() {
        let normal = NullDistribution::Normal {
            mean: 0.0,
            variance: 1.0,
        };
        let cv = critical_value(&normal, 0.05).unwrap();
        assert!((cv.t_tilde - 1.6449).abs() < 1e-4);

        let u22 = block_exact_pmf(2, 2, 2, 1.0, DEFAULT_DP_BUDGET).unwrap();
        assert_eq!(critical_value(&u22, 0.05).unwrap().t_tilde, 4.0);

        let point = NullDistribution::Exact {
            values: alloc::vec![7.0],
            probs: alloc::vec![1.0],
            pruned_mass: 0.0,
        };
        assert_eq!(critical_value(&point, 0.3).unwrap().t_tilde, 7.0);

        let degenerate = NullDistribution::Normal {
            mean: 1.0,
            variance: 0.0,
        };
        assert!(critical_value(&degenerate, 0.05).is_err());
    }

    #[test]
    fn cdf_monotone_and_support_sorted() {
        let d = block_exact_pmf(3, 5, 3, 1.0, DEFAULT_DP_BUDGET).unwrap();
        if let NullDistribution::Exact { values, probs, .. } = &d {
            assert!(values.windows(2).all(|w| w[0] < w[1]));
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
        let mut prev = -1.0;
        for s in 0..=15 {
            let c = d.cdf(s as f64);
            assert!(c >= prev);
            prev = c;
        }
    }
}
