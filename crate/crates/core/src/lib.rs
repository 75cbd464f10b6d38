//! Randomization inference for blocked randomized experiments with
//! interference between units.
//!
//! The statistic of interest is a weighted count, over all within-block
//! subsets of one treated unit and `k - 1` controls, of the subsets in which
//! the treated unit has the largest response. It is computed from Orban-Wolfe
//! placements, its null distribution in the uniformity trial is known exactly
//! (and approximately Normal for many blocks), and inverting the test yields
//! one-sided confidence bounds for the attributable effect even when units
//! interfere arbitrarily.
//!
//! Modules:
//! - [`scoring`]: HRF weighting of event-related time series into one scalar
//!   response per trial, plus discrete-cosine high-pass filtering.
//! - [`placement`]: placements, the binomial score function, and the observed
//!   statistic (with a brute-force subset oracle).
//! - [`nulldist`]: exact per-block null pmfs, convolution across blocks,
//!   closed-form moments, and critical values.
//! - [`inference`]: tests of no effect, attributable-effect bounds, and the
//!   lagged-interference (previous-treatment) test.
//! - [`robust`]: Huber M-estimation covariance adjustment.
//! - [`sim`]: Monte Carlo size/power engine and limiting probabilities.
//! - [`special`]: the small set of special functions the above need.
//!
//! The crate is `no_std` (with `alloc`); all IO lives in the companion CLI
//! crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod binom;
pub mod inference;
pub mod nulldist;
pub mod placement;
pub mod robust;
pub mod scoring;
pub mod sim;
pub mod special;
pub use inference::{test_no_effect, Direction, InferenceReport, Mode};
pub use placement::{placements, statistic, BlockSummary, TrialRecord, WeightScheme};
