use sdm_core::bridge::*;
use sdm_core::fit::{fit_mle, FitOptions};
use sdm_core::grid::{Cell, CovariateGrid, FeatureNames};
use sdm_core::model::{IntensityModel, LogLinearParams};
use sdm_core::sim::{simulate_ppp, substream, with_counts};

fn base_grid(m: usize) -> CovariateGrid {
    let cells: Vec<Cell> = (0..m)
        .map(|i| {
            let t = i as f64 / (m as f64 - 1.0);
            let x = vec![2.0 * t - 1.0, ((i * 7) % 11) as f64 / 5.0 - 1.0];
            Cell { id: i as u64, lon: None, lat: None, w: 1.0, x, z: vec![], v: vec![], presence_count: 0 }
        })
        .collect();
    CovariateGrid::new(cells, m as f64, FeatureNames::default()).unwrap()
}

fn main() {
    for m in [1000, 5000, 20000] {
        let grid0 = base_grid(m);
        let t0 = (40.0 / m as f64).ln();
        let truth = IntensityModel::LogLinear(LogLinearParams::new(t0, vec![0.9, -0.5]));
        let mut rng = substream(2024, 0, "bridge");
        let counts = simulate_ppp(&truth, &grid0, &mut rng).unwrap();
        let grid = with_counts(&grid0, &counts);
        let n = grid.n_presence();
        let ppp = fit_mle(&grid, &FitOptions::default()).unwrap();
        let iwlr = fit_weighted_logistic(&grid, &WeightScheme::Infinite { background_weight: 1000.0 }, &FitOptions::default()).unwrap();
        let sup = iwlr.params[1..].iter().zip(&ppp.params[1..]).map(|(a,b)|(a-b).abs()).fold(0.0,f64::max);
        println!("m={m} n={n} sup={sup:.6} iwlr_conv={} ppp={:?}", iwlr.converged, &ppp.params[1..]);
    }
}
