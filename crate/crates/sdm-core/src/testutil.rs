//! Shared helpers for in-crate tests.

use crate::grid::{Cell, CovariateGrid, FeatureNames};

pub(crate) fn grid_from(xs: &[Vec<f64>], w: &[f64], counts: &[u64]) -> CovariateGrid {
    let cells: Vec<Cell> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| Cell {
            id: i as u64,
            lon: None,
            lat: None,
            w: w[i],
            x: x.clone(),
            z: vec![],
            v: vec![],
            presence_count: counts[i],
        })
        .collect();
    let area = w.iter().sum();
    CovariateGrid::new(cells, area, FeatureNames::default()).unwrap()
}

/// Deterministic synthetic grid: one feature on a ramp, counts set by
/// rounding the true mean so they are reproducible without an RNG.
pub(crate) fn ramp_grid(m: usize, theta0: f64, theta1: f64) -> CovariateGrid {
    let xs: Vec<Vec<f64>> = (0..m)
        .map(|i| vec![-1.0 + 2.0 * i as f64 / (m as f64 - 1.0)])
        .collect();
    let w = vec![1.0; m];
    let counts: Vec<u64> = xs
        .iter()
        .map(|x| {
            let mu = (theta0 + theta1 * x[0]).exp();
            (mu + 0.5).floor() as u64
        })
        .collect();
    grid_from(&xs, &w, &counts)
}
