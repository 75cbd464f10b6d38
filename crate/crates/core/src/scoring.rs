//! Scoring of event-related time series into one response per trial.
//!
//! The hemodynamic response function is a weighted difference of two gamma
//! densities,
//!
//! ```text
//! hrf(x) = g(16x; 6, 1/16) - g(16x; 16, 1/16) / 6,
//! g(x; w, th) = th^w x^(w-1) exp(-th x) / Gamma(w)
//! ```
//!
//! with `x` in seconds. Sampling it at the 17 two-second interval starts
//! 0, 2, ..., 32 and normalizing to unit sum gives the trial weights; the
//! response of a trial is the weighted sum of the samples following its
//! onset, with the weight vector truncated and renormalized when a session
//! ends early. A discrete-cosine high-pass filter removes slow drifts.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::placement::TrialRecord;

/// Number of two-second intervals covered by the HRF weights.
pub const HRF_WEIGHT_COUNT: usize = 17;

/// One session's evenly sampled signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSeries {
    pub block_id: String,
    pub values: Vec<f64>,
    pub sample_interval_seconds: f64,
}

/// One trial onset within a session.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialEvent {
    pub block_id: String,
    pub onset_index: usize,
    pub treated: bool,
}

/// The 17 normalized HRF weights.
#[derive(Debug, Clone, PartialEq)]
pub struct HrfWeights {
    weights: [f64; HRF_WEIGHT_COUNT],
}

impl HrfWeights {
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("hrf is defined for nonnegative times, got {x}")]
    NegativeTime { x: f64 },
    #[error("series {block} is empty")]
    EmptySeries { block: String },
    #[error("sample interval must be positive")]
    BadInterval,
    #[error("event at onset {onset} lies past the end of series {block} (length {len})")]
    OnsetPastEnd {
        block: String,
        onset: usize,
        len: usize,
    },
    #[error("event block {event_block} does not match series block {series_block}")]
    BlockMismatch {
        event_block: String,
        series_block: String,
    },
    #[error("degenerate trial at onset {onset}: truncated weights sum to zero")]
    DegenerateTrial { onset: usize },
    #[error("high-pass filter needs at least 4 samples")]
    SeriesTooShort,
    #[error("high-pass cutoff must exceed twice the sample interval")]
    CutoffTooShort,
}

/// The canonical double-gamma HRF at `x` seconds.
pub fn hrf(x: f64) -> Result<f64, ScoringError> {
    if x < 0.0 {
        return Err(ScoringError::NegativeTime { x });
    }
    // gamma_density(16x; w, 1/16) simplifies to x^(w-1) e^(-x) / (16 Gamma(w)).
    fn scaled_gamma(x: f64, shape: f64) -> f64 {
        if x == 0.0 {
            return 0.0;
        }
        libm::exp((shape - 1.0) * libm::log(x) - x - libm::lgamma(shape)) / 16.0
    }
    Ok(scaled_gamma(x, 6.0) - scaled_gamma(x, 16.0) / 6.0)
}

/// Evaluates the HRF at 0, 2, ..., 32 seconds and normalizes to unit sum.
pub fn compute_weights() -> HrfWeights {
    let mut raw = [0.0; HRF_WEIGHT_COUNT];
    for (i, w) in raw.iter_mut().enumerate() {
        *w = hrf(2.0 * i as f64).expect("nonnegative grid");
    }
    let sum: f64 = raw.iter().sum();
    for w in raw.iter_mut() {
        *w /= sum;
    }
    HrfWeights { weights: raw }
}

/// Scores every event of a session: response = weighted sum of the samples
/// from the onset onward, truncating and renormalizing the weights when
/// fewer than 17 samples remain.
pub fn score_trials(
    series: &SessionSeries,
    events: &[TrialEvent],
    w: &HrfWeights,
) -> Result<Vec<TrialRecord>, ScoringError> {
    if series.values.is_empty() {
        return Err(ScoringError::EmptySeries {
            block: series.block_id.clone(),
        });
    }
    if !(series.sample_interval_seconds > 0.0) {
        return Err(ScoringError::BadInterval);
    }
    let mut out = Vec::with_capacity(events.len());
    for (trial_index, event) in events.iter().enumerate() {
        if event.block_id != series.block_id {
            return Err(ScoringError::BlockMismatch {
                event_block: event.block_id.clone(),
                series_block: series.block_id.clone(),
            });
        }
        if event.onset_index >= series.values.len() {
            return Err(ScoringError::OnsetPastEnd {
                block: series.block_id.clone(),
                onset: event.onset_index,
                len: series.values.len(),
            });
        }
        let avail = (series.values.len() - event.onset_index).min(HRF_WEIGHT_COUNT);
        let weights = &w.weights[..avail];
        let response = if avail == HRF_WEIGHT_COUNT {
            dot(weights, &series.values[event.onset_index..event.onset_index + avail])
        } else {
            let norm: f64 = weights.iter().sum();
            if libm::fabs(norm) <= 1e-9 {
                return Err(ScoringError::DegenerateTrial {
                    onset: event.onset_index,
                });
            }
            dot(weights, &series.values[event.onset_index..event.onset_index + avail]) / norm
        };
        out.push(TrialRecord {
            block_id: event.block_id.clone(),
            index: trial_index as u32,
            treated: event.treated,
            response,
        });
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes low-frequency content below `1/cutoff_seconds` Hz by projecting
/// out a drift basis: the constant, a linear trend, and every
/// discrete-cosine component with period at least `cutoff_seconds`.
pub fn highpass_filter(
    series: &SessionSeries,
    cutoff_seconds: f64,
) -> Result<SessionSeries, ScoringError> {
    let n = series.values.len();
    if n < 4 {
        return Err(ScoringError::SeriesTooShort);
    }
    if !(cutoff_seconds > 2.0 * series.sample_interval_seconds) {
        return Err(ScoringError::CutoffTooShort);
    }

    // DCT component r has period 2 N dt / r; keep r <= 2 N dt / cutoff for
    // removal.
    let n_f = n as f64;
    let r_max_f = 2.0 * n_f * series.sample_interval_seconds / cutoff_seconds;
    let r_max = (libm::floor(r_max_f) as usize).min(n.saturating_sub(2));

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(r_max + 2);
    basis.push(vec![1.0 / libm::sqrt(n_f); n]);
    for r in 1..=r_max {
        let scale = libm::sqrt(2.0 / n_f);
        let col: Vec<f64> = (0..n)
            .map(|t| scale * libm::cos(core::f64::consts::PI * r as f64 * (2 * t + 1) as f64 / (2.0 * n_f)))
            .collect();
        basis.push(col);
    }
    // Linear trend, orthogonalized against the columns so far; a sampled
    // ramp is not in the span of finitely many cosines, and drifts should
    // vanish exactly.
    let mut trend: Vec<f64> = (0..n).map(|t| t as f64).collect();
    for col in &basis {
        let c = dot(&trend, col);
        for (tv, bv) in trend.iter_mut().zip(col) {
            *tv -= c * bv;
        }
    }
    let norm = libm::sqrt(dot(&trend, &trend));
    if norm > 1e-9 * n_f {
        for tv in trend.iter_mut() {
            *tv /= norm;
        }
        basis.push(trend);
    }

    let mut residual = series.values.clone();
    for col in &basis {
        let c = dot(&residual, col);
        for (rv, bv) in residual.iter_mut().zip(col) {
            *rv -= c * bv;
        }
    }
    Ok(SessionSeries {
        block_id: series.block_id.clone(),
        values: residual,
        sample_interval_seconds: series.sample_interval_seconds,
    })
}
