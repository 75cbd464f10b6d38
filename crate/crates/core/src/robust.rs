//! Huber M-estimation covariance adjustment.
//!
//! Responses are regressed on measured covariates (head motion, say) by
//! iteratively reweighted least squares with Huber weights
//! `w(e) = min(1, tuning * scale / |e|)` and scale re-estimated each
//! iteration as `median(|residual|) / 0.6745`; inference then runs on the
//! residuals. The treatment indicator is never part of the design, since
//! adjusting for it would absorb the effect under test.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::inference::{test_no_effect, InferenceError, InferenceReport, Mode};
use crate::placement::{group_trials, TrialRecord, WeightScheme};

/// Default Huber tuning constant (95% Gaussian efficiency).
pub const DEFAULT_TUNING: f64 = 1.345;
/// Default convergence tolerance on the coefficient change.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 50;

const MAD_CONSISTENCY: f64 = 0.6745;

/// Covariates aligned one-to-one with a trial sequence. The intercept is
/// implicit and must not be included as a column.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    pub names: Vec<String>,
    /// One row per trial, each of length `names.len()`.
    pub rows: Vec<Vec<f64>>,
}

/// Result of one robust fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustFit {
    /// Intercept followed by one coefficient per covariate column.
    pub coefficients: Vec<f64>,
    /// Robust residual scale (MAD / 0.6745) at convergence.
    pub scale: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Vec<f64>,
    /// Final Huber weights.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RobustError {
    #[error("design matrix is rank deficient (column {column})")]
    RankDeficient { column: usize },
    #[error("need more rows than columns: {rows} rows for {cols} columns plus intercept")]
    TooFewRows { rows: usize, cols: usize },
    #[error("covariate rows ({rows}) do not match trial count ({trials})")]
    RowMismatch { rows: usize, trials: usize },
    #[error("covariate row {row} has {got} values, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

fn median(sorted_scratch: &mut Vec<f64>) -> f64 {
    sorted_scratch.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = sorted_scratch.len();
    if n % 2 == 1 {
        sorted_scratch[n / 2]
    } else {
        0.5 * (sorted_scratch[n / 2 - 1] + sorted_scratch[n / 2])
    }
}

/// Solves the weighted least squares normal equations by Cholesky.
fn wls_solve(
    design: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
) -> Result<Vec<f64>, RobustError> {
    let q = design[0].len();
    let mut ata = vec![vec![0.0f64; q]; q];
    let mut atb = vec![0.0f64; q];
    for (row, (&yi, &wi)) in design.iter().zip(y.iter().zip(w)) {
        for a in 0..q {
            atb[a] += wi * row[a] * yi;
            for b in a..q {
                ata[a][b] += wi * row[a] * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            ata[a][b] = ata[b][a];
        }
    }

    // Cholesky with a relative pivot tolerance for rank detection.
    let max_diag = (0..q).fold(0.0f64, |acc, i| acc.max(ata[i][i]));
    let mut l = vec![vec![0.0f64; q]; q];
    for i in 0..q {
        for j in 0..=i {
            let mut sum = ata[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 1e-10 * max_diag {
                    return Err(RobustError::RankDeficient { column: i });
                }
                l[i][j] = libm::sqrt(sum);
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // Forward and back substitution.
    let mut z = vec![0.0f64; q];
    for i in 0..q {
        let mut sum = atb[i];
        for k in 0..i {
            sum -= l[i][k] * z[k];
        }
        z[i] = sum / l[i][i];
    }
    let mut beta = vec![0.0f64; q];
    for i in (0..q).rev() {
        let mut sum = z[i];
        for k in (i + 1)..q {
            sum -= l[k][i] * beta[k];
        }
        beta[i] = sum / l[i][i];
    }
    Ok(beta)
}

/// Huber IRLS regression of `y` on `x` (plus an intercept).
pub fn huber_fit(
    y: &[f64],
    x: &CovariateMatrix,
    tuning: f64,
    tol: f64,
    max_iter: usize,
) -> Result<RobustFit, RobustError> {
    let rows = y.len();
    let cols = x.names.len();
    if x.rows.len() != rows {
        return Err(RobustError::RowMismatch {
            rows: x.rows.len(),
            trials: rows,
        });
    }
    if rows <= cols + 1 {
        return Err(RobustError::TooFewRows { rows, cols });
    }
    for (i, row) in x.rows.iter().enumerate() {
        if row.len() != cols {
            return Err(RobustError::RaggedRow {
                row: i,
                got: row.len(),
                expected: cols,
            });
        }
    }

    let design: Vec<Vec<f64>> = x
        .rows
        .iter()
        .map(|row| {
            let mut d = Vec::with_capacity(cols + 1);
            d.push(1.0);
            d.extend_from_slice(row);
            d
        })
        .collect();

    let mut y_abs: Vec<f64> = y.iter().map(|v| libm::fabs(*v)).collect();
    let y_scale = median(&mut y_abs).max(1.0);

    let mut weights = vec![1.0f64; rows];
    let mut beta = wls_solve(&design, y, &weights)?;
    let mut residuals = vec![0.0f64; rows];
    let mut scale = 0.0;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=max_iter {
        iterations = iter;
        for (i, row) in design.iter().enumerate() {
            let fitted: f64 = row.iter().zip(&beta).map(|(d, b)| d * b).sum();
            residuals[i] = y[i] - fitted;
        }
        let mut abs_res: Vec<f64> = residuals.iter().map(|r| libm::fabs(*r)).collect();
        scale = median(&mut abs_res) / MAD_CONSISTENCY;
        if scale <= 1e-12 * y_scale {
            // Exact (or numerically exact) fit.
            converged = true;
            for w in weights.iter_mut() {
                *w = 1.0;
            }
            break;
        }
        let threshold = tuning * scale;
        for (w, r) in weights.iter_mut().zip(&residuals) {
            let a = libm::fabs(*r);
            *w = if a <= threshold { 1.0 } else { threshold / a };
        }
        let next = wls_solve(&design, y, &weights)?;
        let delta = next
            .iter()
            .zip(&beta)
            .fold(0.0f64, |acc, (a, b)| acc.max(libm::fabs(a - b)));
        beta = next;
        if delta < tol {
            converged = true;
            for (i, row) in design.iter().enumerate() {
                let fitted: f64 = row.iter().zip(&beta).map(|(d, b)| d * b).sum();
                residuals[i] = y[i] - fitted;
            }
            break;
        }
    }

    Ok(RobustFit {
        coefficients: beta,
        scale,
        iterations,
        converged,
        weights,
        residuals,
    })
}

/// Replaces each response by its Huber-fit residual.
///
/// `x` rows must align with the trials sorted by (block_id, index); the
/// returned trials are in that order. With `per_block`, one regression is
/// fitted within each block instead of one pooled fit.
pub fn residualize(
    trials: &[TrialRecord],
    x: &CovariateMatrix,
    tuning: f64,
    per_block: bool,
) -> Result<(Vec<TrialRecord>, Vec<RobustFit>), RobustError> {
    let groups = group_trials(trials);
    let ordered: Vec<TrialRecord> = groups.values().flatten().cloned().collect();
    if x.rows.len() != ordered.len() {
        return Err(RobustError::RowMismatch {
            rows: x.rows.len(),
            trials: ordered.len(),
        });
    }

    let mut residual_trials = ordered.clone();
    let mut fits = Vec::new();
    if per_block {
        let mut offset = 0;
        for block in groups.values() {
            let len = block.len();
            let y: Vec<f64> = block.iter().map(|t| t.response).collect();
            let sub = CovariateMatrix {
                names: x.names.clone(),
                rows: x.rows[offset..offset + len].to_vec(),
            };
            let fit = huber_fit(&y, &sub, tuning, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            for (t, r) in residual_trials[offset..offset + len]
                .iter_mut()
                .zip(&fit.residuals)
            {
                t.response = *r;
            }
            fits.push(fit);
            offset += len;
        }
    } else {
        let y: Vec<f64> = ordered.iter().map(|t| t.response).collect();
        let fit = huber_fit(&y, x, tuning, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        for (t, r) in residual_trials.iter_mut().zip(&fit.residuals) {
            t.response = *r;
        }
        fits.push(fit);
    }
    Ok((residual_trials, fits))
}

/// Covariance-adjusted inference: residualize, then test no effect on the
/// residuals.
#[allow(clippy::too_many_arguments)]
pub fn adjusted_inference(
    trials: &[TrialRecord],
    x: &CovariateMatrix,
    k: usize,
    scheme: WeightScheme,
    mode: Mode,
    alpha: f64,
    tuning: f64,
    per_block: bool,
) -> Result<(InferenceReport, Vec<RobustFit>), RobustError> {
    let (residual_trials, fits) = residualize(trials, x, tuning, per_block)?;
    let report = test_no_effect(&residual_trials, k, scheme, mode, alpha)?;
    Ok((report, fits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn covariates(names: &[&str], rows: Vec<Vec<f64>>) -> CovariateMatrix {
        CovariateMatrix {
            names: names.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    /// Plain OLS via Gaussian elimination, written independently of the
    /// production solver.
    fn ols(y: &[f64], x: &CovariateMatrix) -> Vec<f64> {
        let q = x.names.len() + 1;
        let mut a = alloc::vec![alloc::vec![0.0f64; q + 1]; q];
        for (row, &yi) in x.rows.iter().zip(y) {
            let mut d = alloc::vec![1.0];
            d.extend_from_slice(row);
            for i in 0..q {
                for j in 0..q {
                    a[i][j] += d[i] * d[j];
                }
                a[i][q] += d[i] * yi;
            }
        }
        for col in 0..q {
            let piv = (col..q).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            let p = a[col][col];
            for j in col..=q {
                a[col][j] /= p;
            }
            for i in 0..q {
                if i != col {
                    let f = a[i][col];
                    for j in col..=q {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
        (0..q).map(|i| a[i][q]).collect()
    }

    #[test]
    fn near_noiseless_gaussian_matches_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 500;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| alloc::vec![rng.gen::<f64>(), rng.gen::<f64>() * 2.0 - 1.0])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| {
                let noise: f64 = {
                    // Box-Muller pair, first member.
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
                };
                2.0 + 3.0 * r[0] - 1.5 * r[1] + 1e-6 * noise
            })
            .collect();
        let x = covariates(&["a", "b"], rows);
        let fit = huber_fit(&y, &x, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let reference = ols(&y, &x);
        assert!(fit.converged);
        for (b, r) in fit.coefficients.iter().zip(&reference) {
            assert!(
                ((b - r) / r).abs() < 1e-6,
                "huber {b} vs ols {r} on clean data"
            );
        }
    }

    #[test]
    fn exact_linear_data_is_fitted_exactly() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| alloc::vec![i as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 4.0 - 0.75 * r[0]).collect();
        let x = covariates(&["t"], rows);
        let fit = huber_fit(&y, &x, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - 4.0).abs() < 1e-10);
        assert!((fit.coefficients[1] + 0.75).abs() < 1e-12);
        assert!(fit.residuals.iter().all(|r| r.abs() < 1e-10));
    }

    #[test]
    fn gross_outliers_leave_slope_intact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| alloc::vec![rng.gen::<f64>() * 10.0]).collect();
        let y: Vec<f64> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let noise: f64 = {
                    let u1: f64 = rng.gen::<f64>().max(1e-12);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
                };
                let base = 1.0 + 2.0 * r[0] + noise;
                if i % 10 == 0 {
                    base + 50.0
                } else {
                    base
                }
            })
            .collect();
        let x = covariates(&["v"], rows);
        let robust = huber_fit(&y, &x, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let plain = ols(&y, &x);
        assert!(
            (robust.coefficients[1] - 2.0).abs() < 0.05,
            "robust slope {}",
            robust.coefficients[1]
        );
        assert!((plain[1] - 2.0).abs() > 0.2 || (plain[0] - 1.0).abs() > 0.2);
    }

    #[test]
    fn residuals_have_weighted_mean_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| alloc::vec![rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r[0] - r[1] + (rng.gen::<f64>() - 0.5) * 4.0)
            .collect();
        let x = covariates(&["a", "b"], rows);
        let fit = huber_fit(&y, &x, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let weighted_mean: f64 = fit
            .weights
            .iter()
            .zip(&fit.residuals)
            .map(|(w, r)| w * r)
            .sum::<f64>()
            / fit.weights.iter().sum::<f64>();
        assert!(weighted_mean.abs() < 1e-8, "weighted mean {weighted_mean}");
    }

    #[test]
    fn coefficients_equivariant_under_column_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..150)
            .map(|_| alloc::vec![rng.gen::<f64>() * 3.0])
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 0.5 + 1.2 * r[0] + (rng.gen::<f64>() - 0.5))
            .collect();
        let x = covariates(&["a"], rows.clone());
        let fit = huber_fit(&y, &x, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();

        // a' = 10 a - 7.
        let rows2: Vec<Vec<f64>> = rows.iter().map(|r| alloc::vec![10.0 * r[0] - 7.0]).collect();
        let x2 = covariates(&["a"], rows2);
        let fit2 = huber_fit(&y, &x2, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((fit2.coefficients[1] - fit.coefficients[1] / 10.0).abs() < 1e-7);
        for (r1, r2) in fit.residuals.iter().zip(&fit2.residuals) {
            assert!((r1 - r2).abs() < 1e-9);
        }
    }

    #[test]
    fn huge_tuning_reduces_to_ols_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let rows: Vec<Vec<f64>> = (0..120).map(|_| alloc::vec![rng.gen::<f64>()]).collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| 2.0 * r[0] + (rng.gen::<f64>() - 0.5) * 3.0)
            .collect();
        let x = covariates(&["a"], rows);
        let fit = huber_fit(&y, &x, 1e12, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let reference = ols(&y, &x);
        for (i, row) in x.rows.iter().enumerate() {
            let r = y[i] - reference[0] - reference[1] * row[0];
            assert!((fit.residuals[i] - r).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_column_is_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| alloc::vec![i as f64, 3.0]).collect();
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let x = covariates(&["t", "const"], rows);
        assert!(matches!(
            huber_fit(&y, &x, DEFAULT_TUNING, DEFAULT_TOL, DEFAULT_MAX_ITER),
            Err(RobustError::RankDeficient { .. })
        ));
    }

    #[test]
    fn noise_covariates_barely_move_the_deviate() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut trials = Vec::new();
        let mut rows = Vec::new();
        for b in 0..6 {
            for i in 0..60u32 {
                let treated = rng.gen::<f64>() < 0.25;
                trials.push(TrialRecord {
                    block_id: alloc::format!("b{b}"),
                    index: i,
                    treated,
                    response: rng.gen::<f64>() + if treated { 0.5 } else { 0.0 },
                });
                rows.push(alloc::vec![rng.gen::<f64>(), rng.gen::<f64>()]);
            }
        }
        let unadjusted =
            test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Normal, 0.05).unwrap();
        let x = covariates(&["m1", "m2"], rows);
        let (adjusted, fits) = adjusted_inference(
            &trials,
            &x,
            2,
            WeightScheme::Equal,
            Mode::Normal,
            0.05,
            DEFAULT_TUNING,
            false,
        )
        .unwrap();
        assert_eq!(fits.len(), 1);
        assert!(
            (adjusted.deviate - unadjusted.deviate).abs() < 0.5,
            "adjusted {} vs unadjusted {}",
            adjusted.deviate,
            unadjusted.deviate
        );
    }

    #[test]
    fn strong_nuisance_adjustment_raises_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let reps = 200;
        let mut adj_hits = 0;
        let mut raw_hits = 0;
        for _ in 0..reps {
            let mut trials = Vec::new();
            let mut rows = Vec::new();
            for i in 0..80u32 {
                let treated = i % 2 == 0;
                let nuisance = rng.gen::<f64>() * 4.0 - 2.0;
                let noise = rng.gen::<f64>() - 0.5;
                trials.push(TrialRecord {
                    block_id: "b".to_string(),
                    index: i,
                    treated,
                    response: 0.25 * (treated as u8 as f64) + 3.0 * nuisance + noise,
                });
                rows.push(alloc::vec![nuisance]);
            }
            let x = covariates(&["n"], rows);
            let raw =
                test_no_effect(&trials, 2, WeightScheme::Equal, Mode::Normal, 0.05).unwrap();
            let (adj, _) = adjusted_inference(
                &trials,
                &x,
                2,
                WeightScheme::Equal,
                Mode::Normal,
                0.05,
                DEFAULT_TUNING,
                false,
            )
            .unwrap();
            if raw.p_value <= 0.05 {
                raw_hits += 1;
            }
            if adj.p_value <= 0.05 {
                adj_hits += 1;
            }
        }
        assert!(
            adj_hits > raw_hits + reps / 5,
            "adjusted {adj_hits}/{reps} vs raw {raw_hits}/{reps}"
        );
    }

    #[test]
    fn per_block_fits_one_regression_per_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let mut trials = Vec::new();
        let mut rows = Vec::new();
        for b in 0..3 {
            for i in 0..40u32 {
                trials.push(TrialRecord {
                    block_id: alloc::format!("b{b}"),
                    index: i,
                    treated: i % 4 == 0,
                    response: rng.gen(),
                });
                rows.push(alloc::vec![rng.gen::<f64>()]);
            }
        }
        let x = covariates(&["c"], rows);
        let (_, fits) = adjusted_inference(
            &trials,
            &x,
            2,
            WeightScheme::Equal,
            Mode::Normal,
            0.05,
            DEFAULT_TUNING,
            true,
        )
        .unwrap();
        assert_eq!(fits.len(), 3);
    }
}
