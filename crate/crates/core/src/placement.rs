//! Placements and the placement statistic.
//!
//! For a treated unit, its placement is the number of controls in the same
//! block with responses less than or equal to its own. With no ties, the
//! observed statistic is
//!
//! ```text
//! T = sum over blocks b of  w_b * sum over treated j of  C(u_bj, k - 1)
//! ```
//!
//! where `u_bj` is the placement count and `C(l, k-1) = 0` for `l < k - 1`.
//! Each term counts the subsets of one treated unit and `k - 1` controls in
//! which the treated response is the largest; `k = 2` with one block and unit
//! weight is the Mann-Whitney U count. [`statistic_by_subsets`] enumerates
//! those subsets directly and exists as an independent cross-check.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::binom::{binomial_f64, binomial_u64};

/// One experimental unit: block, within-block position, treatment, response.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub block_id: String,
    /// Within-block position, 0-based, in temporal order.
    pub index: u32,
    pub treated: bool,
    pub response: f64,
}

/// Per-block counts, weight, and the placements of its treated units.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary {
    pub block_id: String,
    /// Number of treated units.
    pub n: usize,
    /// Number of control units.
    pub m: usize,
    /// Block weight `w_b`; `placements` initializes this to 1.
    pub weight: f64,
    /// One placement per treated unit, each in `0..=m`.
    pub placements: Vec<usize>,
}

/// Block weighting for the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// `w_b = 1`: the statistic is a count of sets.
    Equal,
    /// `1/w_b = B * n_b * C(m_b, k-1)`: the statistic is the unweighted
    /// average over blocks of the proportion of sets won by the treated unit.
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlacementError {
    /// Tied responses invalidate the null distribution; the CLI offers a
    /// jitter flag instead of silently midranking.
    #[error("tied responses within block {block}")]
    Ties { block: String },
    #[error("block {block} needs at least one treated and one control unit")]
    DegenerateBlock { block: String },
    #[error("k must be at least 2, got {k}")]
    InvalidK { k: usize },
    #[error("no blocks supplied")]
    Empty,
    #[error("subset oracle budget exceeded in block {block}: {sets} sets")]
    OracleBudget { block: String, sets: u64 },
}

/// Groups trials by block id (sorted), each block sorted by within-block
/// index. The deterministic order fixes floating-point summation order
/// downstream.
pub fn group_trials(trials: &[TrialRecord]) -> BTreeMap<String, Vec<TrialRecord>> {
    let mut map: BTreeMap<String, Vec<TrialRecord>> = BTreeMap::new();
    for t in trials {
        map.entry(t.block_id.clone()).or_default().push(t.clone());
    }
    for block in map.values_mut() {
        block.sort_by_key(|t| t.index);
    }
    map
}

/// Computes the placements of one block's treated units.
///
/// Errors on any tied responses within the block and on blocks that are all
/// treated or all control.
pub fn placements(block_trials: &[TrialRecord]) -> Result<BlockSummary, PlacementError> {
    let block_id = block_trials
        .first()
        .map(|t| t.block_id.clone())
        .unwrap_or_default();
    let n = block_trials.iter().filter(|t| t.treated).count();
    let m = block_trials.len() - n;
    if n == 0 || m == 0 {
        return Err(PlacementError::DegenerateBlock { block: block_id });
    }

    let mut order: Vec<usize> = (0..block_trials.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        block_trials[a]
            .response
            .total_cmp(&block_trials[b].response)
    });
    for w in order.windows(2) {
        if block_trials[w[0]].response == block_trials[w[1]].response {
            return Err(PlacementError::Ties { block: block_id });
        }
    }

    let mut placements = Vec::with_capacity(n);
    let mut controls_seen = 0usize;
    for &i in &order {
        if block_trials[i].treated {
            placements.push(controls_seen);
        } else {
            controls_seen += 1;
        }
    }
    Ok(BlockSummary {
        block_id,
        n,
        m,
        weight: 1.0,
        placements,
    })
}

/// The per-placement score `w * C(u_count, k - 1)`.
pub fn phi(u_count: usize, k: usize, w: f64) -> f64 {
    w * binomial_f64(u_count as u64, (k - 1) as u64)
}

/// Resolves the per-block weights for a scheme.
///
/// Blocks with `m < k - 1` have no scorable sets; under `Balanced` they get
/// weight 0 (their score and null moments are identically 0 either way).
pub fn resolve_weights(blocks: &[BlockSummary], k: usize, scheme: WeightScheme) -> Vec<f64> {
    match scheme {
        WeightScheme::Equal => blocks.iter().map(|_| 1.0).collect(),
        WeightScheme::Balanced => {
            let b = blocks.len() as f64;
            blocks
                .iter()
                .map(|blk| {
                    let sets = blk.n as f64 * binomial_f64(blk.m as u64, (k - 1) as u64);
                    if sets > 0.0 {
                        1.0 / (b * sets)
                    } else {
                        0.0
                    }
                })
                .collect()
        }
    }
}

/// Number of blocks with `m < k - 1`, which contribute 0 to the statistic
/// and to the null moments; callers surface this as a warning.
pub fn degenerate_block_count(blocks: &[BlockSummary], k: usize) -> usize {
    blocks.iter().filter(|b| b.m + 1 < k).count()
}

/// Integer score of one block, `sum_j C(u_j, k-1)`, exact while every
/// coefficient fits a u64; otherwise a floating-point sum.
fn block_score(placements: &[usize], k: usize) -> f64 {
    let mut exact: u128 = 0;
    for &u in placements {
        match binomial_u64(u as u64, (k - 1) as u64) {
            Some(c) => exact += c as u128,
            None => {
                return placements
                    .iter()
                    .map(|&u| binomial_f64(u as u64, (k - 1) as u64))
                    .sum();
            }
        }
    }
    exact as f64
}

/// The observed statistic `T` over all blocks.
pub fn statistic(
    blocks: &[BlockSummary],
    k: usize,
    scheme: WeightScheme,
) -> Result<f64, PlacementError> {
    if blocks.is_empty() {
        return Err(PlacementError::Empty);
    }
    if k < 2 {
        return Err(PlacementError::InvalidK { k });
    }
    let weights = resolve_weights(blocks, k, scheme);
    Ok(blocks
        .iter()
        .zip(weights.iter())
        .map(|(b, &w)| w * block_score(&b.placements, k))
        .sum())
}

/// Brute-force reference: enumerates every set of one treated unit and
/// `k - 1` controls and counts those in which the treated response is
/// strictly largest. Small blocks only.
pub fn statistic_by_subsets(
    block_trials: &[TrialRecord],
    k: usize,
    scheme: WeightScheme,
) -> Result<f64, PlacementError> {
    if block_trials.is_empty() {
        return Err(PlacementError::Empty);
    }
    if k < 2 {
        return Err(PlacementError::InvalidK { k });
    }
    let groups = group_trials(block_trials);
    let mut summaries = Vec::new();
    for block in groups.values() {
        summaries.push(placements(block)?);
    }
    let weights = resolve_weights(&summaries, k, scheme);

    let mut total = 0.0;
    for (block, &w) in groups.values().zip(weights.iter()) {
        let treated: Vec<f64> = block
            .iter()
            .filter(|t| t.treated)
            .map(|t| t.response)
            .collect();
        let controls: Vec<f64> = block
            .iter()
            .filter(|t| !t.treated)
            .map(|t| t.response)
            .collect();
        let sets = (treated.len() as u64)
            .checked_mul(binomial_u64(controls.len() as u64, (k - 1) as u64).unwrap_or(u64::MAX))
            .unwrap_or(u64::MAX);
        if sets > 1_000_000 {
            return Err(PlacementError::OracleBudget {
                block: block[0].block_id.clone(),
                sets,
            });
        }
        if controls.len() + 1 < k {
            continue;
        }
        let mut count = 0u64;
        for &t in &treated {
            let mut chosen = vec_of_len(k - 1);
            count += count_winning_subsets(t, &controls, &mut chosen, 0, 0);
        }
        total += w * count as f64;
    }
    Ok(total)
}

fn vec_of_len(len: usize) -> Vec<usize> {
    let mut v = Vec::with_capacity(len);
    v.resize(len, 0);
    v
}

fn count_winning_subsets(
    treated: f64,
    controls: &[f64],
    chosen: &mut Vec<usize>,
    depth: usize,
    start: usize,
) -> u64 {
    if depth == chosen.len() {
        let won = chosen[..depth]
            .iter()
            .all(|&i| treated > controls[i]);
        return won as u64;
    }
    let mut count = 0;
    for i in start..controls.len() {
        chosen[depth] = i;
        count += count_winning_subsets(treated, controls, chosen, depth + 1, i + 1);
    }
    count
}
