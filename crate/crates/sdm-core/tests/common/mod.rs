//! Helpers shared by the integration suites.

use sdm_core::grid::{Cell, CovariateGrid, FeatureNames};
use sdm_core::model::{IntensityModel, LogLinearParams};
use sdm_core::sim::{simulate_ppp, substream, with_counts};

/// Uniform-weight grid over `[0, 1)` with caller-supplied features.
pub fn uniform_grid<F>(m: usize, area: f64, features: F) -> CovariateGrid
where
    F: Fn(usize, f64) -> Vec<f64>,
{
    let w = area / m as f64;
    let cells: Vec<Cell> = (0..m)
        .map(|i| {
            let t = (i as f64 + 0.5) / m as f64;
            Cell {
                id: i as u64,
                lon: None,
                lat: None,
                w,
                x: features(i, t),
                z: vec![],
                v: vec![],
                presence_count: 0,
            }
        })
        .collect();
    CovariateGrid::new(cells, area, FeatureNames::default()).unwrap()
}

/// Three smooth, non-collinear features of position.
pub fn three_features(i: usize, t: f64) -> Vec<f64> {
    vec![
        2.0 * t - 1.0,
        (6.0 * t).sin(),
        ((i % 13) as f64) / 6.0 - 1.0,
    ]
}

pub fn two_features(i: usize, t: f64) -> Vec<f64> {
    vec![2.0 * t - 1.0, ((i % 11) as f64) / 5.0 - 1.0]
}

/// Simulate presence counts from a log-linear truth into a grid copy.
pub fn simulate_counts(
    grid: &CovariateGrid,
    theta: &[f64],
    seed: u64,
    rep: u64,
    tag: &str,
) -> CovariateGrid {
    let truth = IntensityModel::LogLinear(LogLinearParams::new(theta[0], theta[1..].to_vec()));
    let mut rng = substream(seed, rep, tag);
    let counts = simulate_ppp(&truth, grid, &mut rng).unwrap();
    with_counts(grid, &counts)
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Two-stage grid search aligned to the fine lattice `lo + k * fine`, so
/// the result equals the full fine-grid argmin whenever the global
/// minimizer lies inside the refinement window around the coarse winner.
pub fn grid_search_2d<F>(lo: f64, hi: f64, coarse: f64, fine: f64, f: F) -> [f64; 2]
where
    F: Fn(f64, f64) -> Option<f64>,
{
    let scan = |x0: f64, x1: f64, y0: f64, y1: f64, step: f64| -> (f64, f64) {
        let mut best = (f64::INFINITY, x0, y0);
        let nx = ((x1 - x0) / step).round() as usize;
        let ny = ((y1 - y0) / step).round() as usize;
        for i in 0..=nx {
            let x = x0 + i as f64 * step;
            for j in 0..=ny {
                let y = y0 + j as f64 * step;
                if let Some(v) = f(x, y) {
                    if v < best.0 {
                        best = (v, x, y);
                    }
                }
            }
        }
        (best.1, best.2)
    };
    let (cx, cy) = scan(lo, hi, lo, hi, coarse);
    let snap = |v: f64| lo + ((v - 2.0 * coarse - lo) / fine).floor() * fine;
    let span = 4.0 * coarse;
    let fx0 = snap(cx).max(lo);
    let fy0 = snap(cy).max(lo);
    let (bx, by) = scan(
        fx0,
        (fx0 + span).min(hi),
        fy0,
        (fy0 + span).min(hi),
        fine,
    );
    [bx, by]
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}
