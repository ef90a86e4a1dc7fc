//! Synthetic data generation for every model in scope.
//!
//! Counts are drawn cell-wise as `Poisson(w_i lambda_i)`, the cell-level
//! equivalent of drawing the total from `Poisson(Lambda)` and placing
//! points by the normalized intensity; every estimator in the crate
//! consumes cell-level data, so nothing finer is needed. Replicate
//! streams are derived by hashing `(seed, replicate, tag)` into a ChaCha
//! key, so parallel replicates are reproducible and independent.

use crate::error::{Result, SdmError};
use crate::grid::CovariateGrid;
use crate::integrated::{occupancy_prob, DsData, SurveyData, SurveyDesign};
use crate::model::{dot, IntensityModel};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Binomial, Distribution, Poisson};

/// Replication settings for simulation studies; a fixed seed makes every
/// derived stream, and therefore every output, bit-identical.
#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub seed: u64,
    pub replicates: usize,
}

impl SimConfig {
    pub fn stream(&self, replicate: u64, tag: &str) -> ChaCha12Rng {
        substream(self.seed, replicate, tag)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent, reproducible stream for `(seed, replicate, tag)`.
pub fn substream(seed: u64, replicate: u64, tag: &str) -> ChaCha12Rng {
    let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a over the tag
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    let mut state = seed ^ h.rotate_left(17) ^ replicate.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Draw per-cell presence counts from `Poisson(w_i lambda_i)`.
pub fn simulate_ppp<R: Rng>(
    truth: &IntensityModel,
    grid: &CovariateGrid,
    rng: &mut R,
) -> Result<Vec<u64>> {
    let mut counts = Vec::with_capacity(grid.m());
    for c in &grid.cells {
        let mean = c.w * truth.eval(c)?;
        if !mean.is_finite() {
            return Err(SdmError::Overflow {
                cell: c.id,
                eta: mean,
            });
        }
        let n = if mean <= 0.0 {
            0
        } else {
            let pois = Poisson::new(mean).map_err(|_| SdmError::Validation(format!(
                "invalid Poisson mean {mean} at cell {}",
                c.id
            )))?;
            pois.sample(rng) as u64
        };
        counts.push(n);
    }
    Ok(counts)
}

/// Independently retain each point with a per-cell probability.
pub fn thin<R: Rng>(counts: &[u64], detect_prob: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    if counts.len() != detect_prob.len() {
        return Err(SdmError::Dimension {
            expected: counts.len(),
            got: detect_prob.len(),
            context: "thinning probabilities".into(),
        });
    }
    let mut out = Vec::with_capacity(counts.len());
    for (&n, &p) in counts.iter().zip(detect_prob) {
        if !(0.0..=1.0).contains(&p) {
            return Err(SdmError::Validation(format!(
                "detection probability {p} outside [0, 1]"
            )));
        }
        let kept = if n == 0 || p == 0.0 {
            0
        } else if p == 1.0 {
            n
        } else {
            Binomial::new(n, p)
                .map_err(|_| SdmError::Validation("invalid binomial".into()))?
                .sample(rng)
        };
        out.push(kept);
    }
    Ok(out)
}

/// Generate a survey matrix: each region occupied with probability
/// `Psi_i`, and detected per visit with `logistic(tau' z_ij)` when
/// occupied.
pub fn simulate_so<R: Rng>(
    beta_shared: &[f64],
    tau_detect: &[f64],
    grid: &CovariateGrid,
    design: &SurveyDesign,
    rng: &mut R,
) -> Result<SurveyData> {
    design.validate(grid)?;
    let mut y = Vec::with_capacity(design.k_regions());
    for (i, region) in design.regions.iter().enumerate() {
        let psi = occupancy_prob(beta_shared, grid, region)?;
        let occupied = rng.random_bool(psi.clamp(0.0, 1.0));
        let mut row = Vec::with_capacity(design.t_visits);
        for j in 0..design.t_visits {
            if occupied {
                let u = dot(tau_detect, &design.zdet[i][j]);
                let q = 1.0 / (1.0 + (-u).exp());
                row.push(u8::from(rng.random_bool(q)));
            } else {
                row.push(0);
            }
        }
        y.push(row);
    }
    Ok(SurveyData { y })
}

/// Generate distance-sampling detections: a latent `Poisson(w lambda0)`
/// per cell, thinned by the half-normal detection probability.
pub fn simulate_ds<R: Rng>(
    beta_shared: &[f64],
    omega: &[f64],
    grid_b: &CovariateGrid,
    distances: Vec<f64>,
    scale_features: Vec<Vec<f64>>,
    rng: &mut R,
) -> Result<DsData> {
    let truth = IntensityModel::LogLinear(crate::model::LogLinearParams::new(
        beta_shared[0],
        beta_shared[1..].to_vec(),
    ));
    let latent = simulate_ppp(&truth, grid_b, rng)?;
    let template = DsData {
        point_cells: vec![],
        distances,
        scale_features,
    };
    template.validate(grid_b)?;
    let probs: Vec<f64> = (0..grid_b.m())
        .map(|c| template.detection_prob(c, omega))
        .collect();
    let kept = thin(&latent, &probs, rng)?;
    let mut point_cells = Vec::new();
    for (cell, &k) in kept.iter().enumerate() {
        for _ in 0..k {
            point_cells.push(cell);
        }
    }
    Ok(DsData {
        point_cells,
        ..template
    })
}

/// Clone a grid with new presence counts.
pub fn with_counts(grid: &CovariateGrid, counts: &[u64]) -> CovariateGrid {
    let mut g = grid.clone();
    for (c, &n) in g.cells.iter_mut().zip(counts) {
        c.presence_count = n;
    }
    g
}

/// Monte-Carlo Fisher blocks for the shared coefficients: average of
/// negative numerical Hessians over datasets simulated at the estimate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mc_fisher_blocks(
    grid: &CovariateGrid,
    design: &SurveyDesign,
    beta: &[f64],
    alpha: &[f64],
    tau: &[f64],
    alpha_intercept: bool,
    reps: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if reps == 0 {
        return Err(SdmError::Validation(
            "Monte-Carlo Fisher needs at least one replicate".into(),
        ));
    }
    let pb = crate::integrated::PbModel {
        beta_shared: beta.to_vec(),
        alpha_detect: alpha.to_vec(),
        alpha_intercept,
    };
    let p_beta = beta.len();
    let mut acc_pb = DMatrix::zeros(p_beta, p_beta);
    let mut acc_so = DMatrix::zeros(p_beta, p_beta);
    let mut acc_i = DMatrix::zeros(p_beta, p_beta);
    // thinned intensity for the PB observations
    let probs: Vec<f64> = grid.cells.iter().map(|c| pb.detection_prob(&c.v)).collect();
    let truth = IntensityModel::LogLinear(crate::model::LogLinearParams::new(
        beta[0],
        beta[1..].to_vec(),
    ));
    for rep in 0..reps {
        let mut rng_pb = substream(seed, rep as u64, "fisher-pb");
        let latent = simulate_ppp(&truth, grid, &mut rng_pb)?;
        let observed = thin(&latent, &probs, &mut rng_pb)?;
        let sim_grid = with_counts(grid, &observed);
        let so_data = if design.k_regions() > 0 {
            let mut rng_so = substream(seed, rep as u64, "fisher-so");
            simulate_so(beta, tau, grid, design, &mut rng_so)?
        } else {
            SurveyData { y: vec![] }
        };
        let (i_pb, i_so, i_both) = crate::integrated::observed_fisher_blocks(
            &sim_grid,
            design,
            &so_data,
            beta,
            alpha,
            tau,
            alpha_intercept,
        )?;
        acc_pb += i_pb;
        acc_so += i_so;
        acc_i += i_both;
    }
    let r = reps as f64;
    Ok((acc_pb / r, acc_so / r, acc_i / r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LogLinearParams;
    use crate::testutil::grid_from;

    fn const_grid(m: usize, w: f64) -> CovariateGrid {
        grid_from(&vec![vec![0.0]; m], &vec![w; m], &vec![0; m])
    }

    fn const_model(lam: f64) -> IntensityModel {
        IntensityModel::LogLinear(LogLinearParams::new(lam.ln(), vec![0.0]))
    }

    #[test]
    fn zero_intensity_gives_empty_realization() {
        let grid = const_grid(20, 5.0);
        let model = IntensityModel::LogLinear(LogLinearParams::new(-50.0, vec![0.0]));
        let mut rng = substream(1, 0, "ppp");
        let counts = simulate_ppp(&model, &grid, &mut rng).unwrap();
        assert!(counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn total_count_mean_matches_cumulative_intensity() {
        // lambda = 2 over area 100 -> Lambda = 200; mean over R reps within
        // 3 sqrt(200 / R)
        let grid = const_grid(10, 10.0);
        let model = const_model(2.0);
        let reps = 10_000;
        let mut total = 0u64;
        for rep in 0..reps {
            let mut rng = substream(7, rep, "ppp");
            total += simulate_ppp(&model, &grid, &mut rng).unwrap().iter().sum::<u64>();
        }
        let mean = total as f64 / reps as f64;
        let band = 3.0 * (200.0_f64 / reps as f64).sqrt();
        assert!((mean - 200.0).abs() < band, "mean {mean}, band {band}");
    }

    #[test]
    fn disjoint_subregion_counts_uncorrelated() {
        let grid = const_grid(10, 10.0);
        let model = const_model(1.0);
        let reps = 10_000;
        let mut a = Vec::with_capacity(reps);
        let mut b = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut rng = substream(11, rep as u64, "ppp");
            let counts = simulate_ppp(&model, &grid, &mut rng).unwrap();
            a.push(counts[..5].iter().sum::<u64>() as f64);
            b.push(counts[5..].iter().sum::<u64>() as f64);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..reps {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma).powi(2);
            vb += (b[i] - mb).powi(2);
        }
        let r = cov / (va.sqrt() * vb.sqrt());
        assert!(r.abs() < 0.05, "correlation {r}");
    }

    #[test]
    fn thin_extremes() {
        let counts = vec![3, 0, 7, 2];
        let mut rng = substream(2, 0, "thin");
        assert_eq!(
            thin(&counts, &[0.0; 4], &mut rng).unwrap(),
            vec![0, 0, 0, 0]
        );
        assert_eq!(thin(&counts, &[1.0; 4], &mut rng).unwrap(), counts);
        assert!(thin(&counts, &[1.5, 0.0, 0.0, 0.0], &mut rng).is_err());
    }

    #[test]
    fn half_thinning_halves_the_mean() {
        let grid = const_grid(10, 10.0);
        let model = const_model(2.0);
        let reps = 10_000;
        let mut total = 0u64;
        for rep in 0..reps {
            let mut rng = substream(3, rep, "thin");
            let counts = simulate_ppp(&model, &grid, &mut rng).unwrap();
            let kept = thin(&counts, &[0.5; 10], &mut rng).unwrap();
            total += kept.iter().sum::<u64>();
        }
        let mean = total as f64 / reps as f64;
        let band = 3.0 * (100.0_f64 / reps as f64).sqrt();
        assert!((mean - 100.0).abs() < band, "mean {mean}");
    }

    #[test]
    fn thinning_superposition_consistency() {
        // thin(lambda, p) + thin(lambda, 1-p) on independent copies has
        // total mean Lambda
        let grid = const_grid(10, 10.0);
        let model = const_model(1.5);
        let reps = 10_000;
        let p = 0.3;
        let mut total = 0u64;
        for rep in 0..reps {
            let mut rng1 = substream(5, rep, "half-a");
            let mut rng2 = substream(5, rep, "half-b");
            let c1 = simulate_ppp(&model, &grid, &mut rng1).unwrap();
            let c2 = simulate_ppp(&model, &grid, &mut rng2).unwrap();
            let k1 = thin(&c1, &[p; 10], &mut rng1).unwrap();
            let k2 = thin(&c2, &[1.0 - p; 10], &mut rng2).unwrap();
            total += k1.iter().sum::<u64>() + k2.iter().sum::<u64>();
        }
        let mean = total as f64 / reps as f64;
        let band = 3.0 * (150.0_f64 / reps as f64).sqrt() * 1.2;
        assert!((mean - 150.0).abs() < band, "mean {mean}");
    }

    #[test]
    fn so_zero_occupancy_is_all_zero() {
        let grid = const_grid(12, 1.0);
        let design = SurveyDesign {
            regions: (0..4).map(|i| vec![3 * i, 3 * i + 1, 3 * i + 2]).collect(),
            t_visits: 3,
            zdet: vec![vec![vec![1.0]; 3]; 4],
        };
        let mut rng = substream(4, 0, "so");
        let data = simulate_so(&[-50.0, 0.0], &[0.0], &grid, &design, &mut rng).unwrap();
        assert!(data.y.iter().flatten().all(|&v| v == 0));
    }

    #[test]
    fn so_certain_occupancy_detects_half_the_time() {
        // Psi ~ 1 via a big region integral; tau'z = 0 -> q = 0.5
        let grid = const_grid(12, 10.0);
        let design = SurveyDesign {
            regions: vec![(0..12).collect()],
            t_visits: 4,
            zdet: vec![vec![vec![1.0]; 4]],
        };
        let reps = 4000;
        let mut detections = 0u32;
        for rep in 0..reps {
            let mut rng = substream(6, rep, "so");
            let data = simulate_so(&[1.0, 0.0], &[0.0], &grid, &design, &mut rng).unwrap();
            detections += data.y[0].iter().map(|&v| u32::from(v)).sum::<u32>();
        }
        let mean_row_sum = f64::from(detections) / reps as f64;
        // per-row mean T/2 = 2 with per-rep variance T/4 = 1
        let band = 3.0 * (1.0 / reps as f64).sqrt();
        assert!((mean_row_sum - 2.0).abs() < band, "mean {mean_row_sum}");
    }

    #[test]
    fn ds_distance_extremes() {
        let grid = const_grid(8, 1.0);
        let mut rng = substream(8, 0, "ds");
        let far = simulate_ds(
            &[1.0, 0.0],
            &[0.0],
            &grid,
            vec![1e6; 8],
            vec![vec![]; 8],
            &mut rng,
        )
        .unwrap();
        assert!(far.point_cells.is_empty());

        let mut rng = substream(8, 1, "ds");
        let latent_mean: f64 = 8.0 * 1.0_f64.exp(); // sum w lambda
        let near = simulate_ds(
            &[1.0, 0.0],
            &[0.0],
            &grid,
            vec![0.0; 8],
            vec![vec![]; 8],
            &mut rng,
        )
        .unwrap();
        // no thinning: count is a plain Poisson draw, loosely banded
        assert!((near.point_cells.len() as f64) < latent_mean + 6.0 * latent_mean.sqrt());
    }

    #[test]
    fn ds_retention_at_distance_sigma() {
        // d = sigma everywhere: retention fraction ~ exp(-1/2)
        let grid = const_grid(10, 10.0);
        let reps = 10_000;
        let mut latent_total = 0u64;
        let mut kept_total = 0u64;
        for rep in 0..reps {
            let mut rng = substream(9, rep, "ds");
            let ds = simulate_ds(
                &[0.5, 0.0],
                &[0.0],
                &grid,
                vec![1.0; 10],
                vec![vec![]; 10],
                &mut rng,
            )
            .unwrap();
            kept_total += ds.point_cells.len() as u64;
            // reconstruct latent mean from an independent stream draw
            let mut rng2 = substream(9, rep, "ds-latent");
            let latent = simulate_ppp(&const_model(0.5_f64.exp()), &grid, &mut rng2).unwrap();
            latent_total += latent.iter().sum::<u64>();
        }
        let frac = kept_total as f64 / latent_total as f64;
        let expect = (-0.5_f64).exp();
        assert!((frac - expect).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn identical_config_reproduces_bitwise() {
        let grid = const_grid(30, 2.0);
        let model = const_model(1.3);
        let mut r1 = substream(42, 3, "ppp");
        let mut r2 = substream(42, 3, "ppp");
        let c1 = simulate_ppp(&model, &grid, &mut r1).unwrap();
        let c2 = simulate_ppp(&model, &grid, &mut r2).unwrap();
        assert_eq!(c1, c2);
        let mut r3 = substream(42, 4, "ppp");
        let c3 = simulate_ppp(&model, &grid, &mut r3).unwrap();
        assert_ne!(c1, c3);
    }

    #[test]
    fn poisson_mean_equals_variance_in_band() {
        let grid = const_grid(5, 8.0);
        let model = const_model(1.0); // Lambda = 40
        let reps = 10_000;
        let mut totals = Vec::with_capacity(reps);
        for rep in 0..reps {
            let mut rng = substream(13, rep as u64, "ppp");
            totals.push(
                simulate_ppp(&model, &grid, &mut rng)
                    .unwrap()
                    .iter()
                    .sum::<u64>() as f64,
            );
        }
        let mean = totals.iter().sum::<f64>() / reps as f64;
        let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((mean - 40.0).abs() < 3.0 * (40.0_f64 / reps as f64).sqrt());
        // variance of the sample variance of Poisson(40): ~ (2*40^2 + 40)/R
        let var_band = 3.0 * ((2.0 * 1600.0 + 40.0) / reps as f64).sqrt();
        assert!((var - 40.0).abs() < var_band, "variance {var}");
    }
}
