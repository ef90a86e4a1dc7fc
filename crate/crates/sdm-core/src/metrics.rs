//! Model-choice and discrimination metrics: AIC, its M-estimator (TIC)
//! form, and rank-based AUC with background cells as pseudo-absences.

use crate::error::{Result, SdmError};
use crate::fit::{fit_mle, FitOptions, FitResult};
use crate::grid::CovariateGrid;

/// Metric summary attached to fit outputs.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub aic: Option<f64>,
    pub tic: Option<f64>,
    pub auc: Option<f64>,
    pub n_presence: usize,
    pub n_background: usize,
}

/// Akaike information criterion `2k - 2 loglik`.
///
/// Only defined for likelihood-based (KL) fits; other objectives are not
/// log-likelihoods, so callers are pointed at [`tic`].
pub fn aic(fit: &FitResult) -> Result<f64> {
    match fit.loglik {
        Some(l) => Ok(2.0 * fit.n_params as f64 - 2.0 * l),
        None => Err(SdmError::Metric(format!(
            "AIC is undefined for the {} objective; use tic()",
            fit.spec.label()
        ))),
    }
}

/// Takeuchi-form information criterion for M-estimators:
/// `2 trace(J^-1 K) - 2 * (-objective)`.
///
/// For a correctly specified KL fit `trace(J^-1 K)` tends to the
/// parameter count and `tic` tends to `aic`.
pub fn tic(fit: &FitResult) -> Result<f64> {
    let j_inv = fit
        .info_j
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| SdmError::Singular {
            context: "TIC Jacobian".into(),
        })?;
    let trace = (&j_inv * &fit.info_k).trace();
    Ok(2.0 * trace + 2.0 * fit.objective)
}

/// Mann-Whitney AUC: `P(score_presence > score_background) + 0.5 P(tie)`,
/// computed from rank sums with average ranks for ties.
pub fn auc(scores_presence: &[f64], scores_background: &[f64]) -> Result<f64> {
    if scores_presence.is_empty() || scores_background.is_empty() {
        return Err(SdmError::Metric(
            "AUC needs nonempty presence and background score sets".into(),
        ));
    }
    if scores_presence
        .iter()
        .chain(scores_background)
        .any(|s| !s.is_finite())
    {
        return Err(SdmError::Metric("AUC scores must be finite".into()));
    }
    let np = scores_presence.len();
    let nb = scores_background.len();
    // (score, is_presence)
    let mut all: Vec<(f64, bool)> = scores_presence
        .iter()
        .map(|&s| (s, true))
        .chain(scores_background.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let mut rank_sum_presence = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average 1-based rank over the tie block [i, j]
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_presence += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_presence - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nb as f64))
}

/// AUC of a fitted log-linear model on its grid, scoring cells by the
/// linear predictor (any strictly increasing transform gives the same
/// value). Presence points score once per point; background cells are
/// those with no presence.
pub fn auc_for_fit(fit: &FitResult, grid: &CovariateGrid) -> Result<f64> {
    let eta = |x: &[f64]| -> f64 {
        let (t0, t1) = if fit.params.len() == grid.p() + 1 {
            (fit.params[0], &fit.params[1..])
        } else {
            (0.0, &fit.params[..])
        };
        t0 + t1.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut pres = Vec::new();
    let mut bg = Vec::new();
    for c in &grid.cells {
        let s = eta(&c.x);
        if c.presence_count > 0 {
            for _ in 0..c.presence_count {
                pres.push(s);
            }
        } else {
            bg.push(s);
        }
    }
    auc(&pres, &bg)
}

/// Variable selection by AIC over habitat features: exhaustive best-subset
/// up to 12 features, greedy backward elimination above that.
pub fn select_features_aic(
    grid: &CovariateGrid,
    opts: &FitOptions,
) -> Result<(Vec<usize>, FitResult)> {
    let p = grid.p();
    if p == 0 {
        return Err(SdmError::Validation("no features to select".into()));
    }
    let restrict = |keep: &[usize]| -> CovariateGrid {
        let mut g = grid.clone();
        for (cnew, cold) in g.cells.iter_mut().zip(grid.cells.iter()) {
            cnew.x = keep.iter().map(|&j| cold.x[j]).collect();
        }
        g.feature_names.x = keep
            .iter()
            .map(|&j| {
                grid.feature_names
                    .x
                    .get(j)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", j + 1))
            })
            .collect();
        g
    };
    let fit_subset = |keep: &[usize]| -> Result<(f64, FitResult)> {
        let fit = fit_mle(&restrict(keep), opts)?;
        let a = aic(&fit)?;
        Ok((a, fit))
    };

    if p <= 12 {
        let mut best: Option<(f64, Vec<usize>, FitResult)> = None;
        for mask in 1u32..(1 << p) {
            let keep: Vec<usize> = (0..p).filter(|j| mask >> j & 1 == 1).collect();
            if let Ok((a, fit)) = fit_subset(&keep) {
                if best.as_ref().is_none_or(|(b, _, _)| a < *b) {
                    best = Some((a, keep, fit));
                }
            }
        }
        let (_, keep, fit) =
            best.ok_or_else(|| SdmError::Validation("no feature subset fitted".into()))?;
        Ok((keep, fit))
    } else {
        let mut keep: Vec<usize> = (0..p).collect();
        let (mut best_aic, mut best_fit) = fit_subset(&keep)?;
        loop {
            let mut improved = false;
            for drop_pos in 0..keep.len() {
                if keep.len() == 1 {
                    break;
                }
                let mut cand = keep.clone();
                cand.remove(drop_pos);
                if let Ok((a, fit)) = fit_subset(&cand) {
                    if a < best_aic {
                        best_aic = a;
                        best_fit = fit;
                        keep = cand;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                return Ok((keep, best_fit));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn brute_force_auc(pres: &[f64], bg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in pres {
            for &b in bg {
                if a > b {
                    s += 1.0;
                } else if a == b {
                    s += 0.5;
                }
            }
        }
        s / (pres.len() * bg.len()) as f64
    }

    #[test]
    fn auc_perfect_separation() {
        assert_eq!(auc(&[2.0, 3.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn auc_identical_scores_is_half() {
        assert_eq!(auc(&[1.0, 1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_hand_worked_example() {
        // pairs: .9>.5 W, .9>.1 W, .4<.5 L, .4>.1 W -> 3/4
        let v = auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap();
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let pres = [0.1, 0.5, 0.5, 0.9, 0.3];
        let bg = [0.5, 0.2, 0.9, 0.0];
        let fast = auc(&pres, &bg).unwrap();
        let slow = brute_force_auc(&pres, &bg);
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn auc_complement_identity() {
        let a = [0.3, 0.8, 0.2];
        let b = [0.5, 0.1];
        let x = auc(&a, &b).unwrap();
        let y = auc(&b, &a).unwrap();
        assert!((x + y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn auc_empty_is_error() {
        assert!(auc(&[], &[1.0]).is_err());
        assert!(auc(&[1.0], &[]).is_err());
    }

    #[test]
    fn aic_formula() {
        let grid = crate::testutil::ramp_grid(30, 0.0, 0.8);
        let mut fit = fit_mle(&grid, &FitOptions::default()).unwrap();
        fit.loglik = Some(-10.0);
        fit.n_params = 2;
        assert_eq!(aic(&fit).unwrap(), 24.0);
    }

    #[test]
    fn aic_refused_for_divergence_fits() {
        let grid = crate::testutil::ramp_grid(30, 0.0, 0.8);
        let fit = crate::fit::fit_beta_power(&grid, 0.5, &FitOptions::default()).unwrap();
        let err = aic(&fit).unwrap_err();
        assert!(err.to_string().contains("tic"));
    }

    #[test]
    fn tic_equals_aic_when_k_equals_j() {
        let grid = crate::testutil::ramp_grid(40, -0.1, 0.9);
        let mut fit = fit_mle(&grid, &FitOptions::default()).unwrap();
        fit.info_k = fit.info_j.clone();
        let t = tic(&fit).unwrap();
        let a = aic(&fit).unwrap();
        assert!((t - a).abs() < 1e-9, "tic {t} vs aic {a}");
    }

    #[test]
    fn tic_singular_j_is_error() {
        let grid = crate::testutil::ramp_grid(40, -0.1, 0.9);
        let mut fit = fit_mle(&grid, &FitOptions::default()).unwrap();
        fit.info_j = DMatrix::zeros(2, 2);
        assert!(tic(&fit).is_err());
    }

    #[test]
    fn nested_model_aic_difference() {
        // AIC difference = 2 dk - 2 dloglik by definition
        let grid = crate::testutil::ramp_grid(60, -0.2, 1.1);
        let full = fit_mle(&grid, &FitOptions::default()).unwrap();
        let mut null_grid = grid.clone();
        for c in null_grid.cells.iter_mut() {
            c.x = vec![];
        }
        null_grid.feature_names.x.clear();
        let null = fit_mle(&null_grid, &FitOptions::default()).unwrap();
        let d_aic = aic(&full).unwrap() - aic(&null).unwrap();
        let expect = 2.0 * (full.n_params as f64 - null.n_params as f64)
            - 2.0 * (full.loglik.unwrap() - null.loglik.unwrap());
        assert!((d_aic - expect).abs() < 1e-9);
    }

    #[test]
    fn best_subset_drops_pure_noise_feature() {
        // feature 0 drives the counts, feature 1 is constant noise-free zero
        let mut grid = crate::testutil::ramp_grid(80, 0.0, 1.2);
        for (i, c) in grid.cells.iter_mut().enumerate() {
            let junk = if i % 2 == 0 { 1e-4 } else { -1e-4 };
            c.x.push(junk);
        }
        let (keep, _) = select_features_aic(&grid, &FitOptions::default()).unwrap();
        assert!(keep.contains(&0));
    }
}
