//! Intensity and probability model families.
//!
//! Three families are supported: the log-linear intensity
//! `lambda(s) = exp(theta0 + theta1' x(s))`, the quasi-linear intensity that
//! mixes a habitat intensity with a sampling-bias intensity through a
//! power mean, and the deformed exponential probability model used by the
//! beta-entropy variant of Maxent.

use crate::error::{Result, SdmError};
use crate::grid::{Cell, CovariateGrid};

/// Linear predictors beyond this bound would overflow `exp`.
pub(crate) const ETA_MAX: f64 = 700.0;

/// The default entropy-index grid for the deformed model.
pub const BETA_GRID: [f64; 7] = [
    -1.0,
    -1.0 / 3.0,
    -1.0 / 5.0,
    0.0,
    1.0 / 5.0,
    1.0 / 3.0,
    1.0,
];

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Log-linear intensity parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearParams {
    pub theta0: f64,
    pub theta1: Vec<f64>,
}

impl LogLinearParams {
    pub fn new(theta0: f64, theta1: Vec<f64>) -> LogLinearParams {
        LogLinearParams { theta0, theta1 }
    }

    pub fn log_intensity(&self, cell: &Cell) -> f64 {
        self.theta0 + dot(&self.theta1, &cell.x)
    }
}

/// Quasi-linear intensity parameters.
///
/// `ql_tau` selects the power mean: -1 harmonic, 0 geometric, 1 arithmetic
/// (closed forms), any other nonzero real the generic Kolmogorov-Nagumo
/// mean. `theta` and `alpha_bias` both carry their intercept in slot 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiLinearParams {
    pub ql_tau: f64,
    pub theta: Vec<f64>,
    pub alpha_bias: Vec<f64>,
}

impl QuasiLinearParams {
    pub fn log_habitat(&self, cell: &Cell) -> f64 {
        self.theta[0] + dot(&self.theta[1..], &cell.x)
    }

    pub fn log_bias(&self, cell: &Cell) -> f64 {
        self.alpha_bias[0] + dot(&self.alpha_bias[1..], &cell.z)
    }
}

/// Deformed exponential (beta-Maxent) probability model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedParams {
    pub beta_ent: f64,
    pub alpha1: Vec<f64>,
}

/// A parametric intensity: log-linear or quasi-linear.
#[derive(Debug, Clone)]
pub enum IntensityModel {
    LogLinear(LogLinearParams),
    QuasiLinear(QuasiLinearParams),
}

impl IntensityModel {
    /// Intensity at a cell, per unit area.
    pub fn eval(&self, cell: &Cell) -> Result<f64> {
        match self {
            IntensityModel::LogLinear(p) => eval_loglinear(p, cell),
            IntensityModel::QuasiLinear(p) => eval_quasilinear(p, cell),
        }
    }

    /// Gradient of `log lambda` with respect to the parameter vector.
    pub fn grad_log(&self, cell: &Cell) -> Vec<f64> {
        model_gradients(self, cell)
    }

    pub fn dim(&self) -> usize {
        match self {
            IntensityModel::LogLinear(p) => 1 + p.theta1.len(),
            IntensityModel::QuasiLinear(p) => p.theta.len() + p.alpha_bias.len(),
        }
    }
}

/// `lambda = exp(theta0 + theta1' x)`.
pub fn eval_loglinear(params: &LogLinearParams, cell: &Cell) -> Result<f64> {
    let eta = params.log_intensity(cell);
    if eta > ETA_MAX {
        return Err(SdmError::Overflow { cell: cell.id, eta });
    }
    Ok(eta.exp())
}

/// Kolmogorov-Nagumo power mean of the habitat and bias intensities.
///
/// Computed in log space so large predictors cannot overflow the
/// intermediate powers.
pub fn eval_quasilinear(params: &QuasiLinearParams, cell: &Cell) -> Result<f64> {
    let log_lam = eval_quasilinear_log(params, cell)?;
    if log_lam > ETA_MAX {
        return Err(SdmError::Overflow {
            cell: cell.id,
            eta: log_lam,
        });
    }
    Ok(log_lam.exp())
}

pub(crate) fn eval_quasilinear_log(params: &QuasiLinearParams, cell: &Cell) -> Result<f64> {
    let la = params.log_habitat(cell);
    let lb = params.log_bias(cell);
    if !la.is_finite() || !lb.is_finite() {
        return Err(SdmError::Overflow {
            cell: cell.id,
            eta: f64::NAN,
        });
    }
    let tau = params.ql_tau;
    let log_lam = if tau == 0.0 {
        0.5 * (la + lb)
    } else if tau == 1.0 {
        // log((exp(la) + exp(lb)) / 2)
        log_sum_exp(la, lb) - std::f64::consts::LN_2
    } else if tau == -1.0 {
        // harmonic mean: 2 / (1/a + 1/b)
        std::f64::consts::LN_2 - (log_sum_exp(-la, -lb))
    } else {
        (log_sum_exp(tau * la, tau * lb) - std::f64::consts::LN_2) / tau
    };
    Ok(log_lam)
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// The mixing weight `omega = lambda^tau / (lambda^tau + b^tau)`, a
/// logistic function of `tau (log lambda - log b)`.
pub fn quasilinear_weight(params: &QuasiLinearParams, cell: &Cell) -> f64 {
    if params.ql_tau == 0.0 {
        return 0.5;
    }
    let u = params.ql_tau * (params.log_habitat(cell) - params.log_bias(cell));
    1.0 / (1.0 + (-u).exp())
}

/// All deformed-model probabilities over a grid.
///
/// Enforces the positivity domain `1 + beta a1' x > 0` cell-wide; a
/// violation is an error listing the offending cells rather than a clip.
pub fn deformed_probs(params: &DeformedParams, grid: &CovariateGrid) -> Result<Vec<f64>> {
    let beta = params.beta_ent;
    if beta == 0.0 {
        // softmax with max subtraction
        let etas: Vec<f64> = grid
            .cells
            .iter()
            .map(|c| dot(&params.alpha1, &c.x))
            .collect();
        let max = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = etas.iter().map(|&e| (e - max).exp()).collect();
        let z: f64 = unnorm.iter().sum();
        return Ok(unnorm.into_iter().map(|u| u / z).collect());
    }
    let mut bad = Vec::new();
    let mut unnorm = Vec::with_capacity(grid.m());
    for c in &grid.cells {
        let u = 1.0 + beta * dot(&params.alpha1, &c.x);
        if u <= 0.0 {
            bad.push(c.id);
        } else {
            unnorm.push(u.powf(1.0 / beta));
        }
    }
    if !bad.is_empty() {
        return Err(SdmError::PositivityViolation { cells: bad });
    }
    let z: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|u| u / z).collect())
}

/// Probability of one cell under the deformed model.
pub fn eval_deformed(
    params: &DeformedParams,
    grid: &CovariateGrid,
    cell_index: usize,
) -> Result<f64> {
    let probs = deformed_probs(params, grid)?;
    probs
        .get(cell_index)
        .copied()
        .ok_or_else(|| SdmError::Validation(format!("cell index {cell_index} out of range")))
}

/// Cumulative intensity `Lambda = sum_i w_i lambda(s_i)` by cell quadrature.
pub fn cumulative_intensity(model: &IntensityModel, grid: &CovariateGrid) -> Result<f64> {
    let mut total = 0.0;
    for c in &grid.cells {
        total += c.w * model.eval(c)?;
    }
    Ok(total)
}

/// Gradient of `log lambda` with respect to all free parameters.
///
/// Log-linear: `(1, x)`. Quasi-linear: the theta block is scaled by the
/// mixing weight `omega(s)` and the alpha block by `1 - omega(s)`.
pub fn model_gradients(model: &IntensityModel, cell: &Cell) -> Vec<f64> {
    match model {
        IntensityModel::LogLinear(p) => {
            let mut g = Vec::with_capacity(1 + p.theta1.len());
            g.push(1.0);
            g.extend_from_slice(&cell.x);
            g
        }
        IntensityModel::QuasiLinear(p) => {
            let omega = quasilinear_weight(p, cell);
            let mut g = Vec::with_capacity(p.theta.len() + p.alpha_bias.len());
            g.push(omega);
            g.extend(cell.x.iter().map(|&x| omega * x));
            g.push(1.0 - omega);
            g.extend(cell.z.iter().map(|&z| (1.0 - omega) * z));
            g
        }
    }
}
