//! Estimators equivalent or adjacent to the point-process MLE.
//!
//! Maxent slopes coincide with the PPP slopes and the PPP intercept is
//! recovered from the Maxent normalizer; the deformed (beta-entropy)
//! Maxent generalizes this with a power-entropy index chosen by an
//! M-estimator information criterion; weighted logistic regressions
//! approximate the PPP score under heavy background weighting; and the
//! quasi-linear intensity mixes habitat and sampling-bias predictors
//! through a power mean indexed by tau.

use crate::error::{Result, SdmError};
use crate::fit::{negloglik, score_kl, FitOptions, PoissonDesign};
use crate::grid::{CovariateGrid, Standardize};
use crate::model::{
    dot, quasilinear_weight, DeformedParams, IntensityModel, QuasiLinearParams, BETA_GRID,
};
use crate::optim::{minimize, Objective};
use nalgebra::{DMatrix, DVector};

/// Standardized slopes beyond this are treated as separation: the
/// likelihood keeps improving along a divergent direction while its
/// gradient vanishes, so the optimizer alone cannot tell.
const SEPARATION_BOUND: f64 = 10.0;

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn log1pexp(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Case weights for the logistic bridge estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightScheme {
    /// Prevalence correction `(mu / ybar)` on presences and
    /// `(1 - mu) / (1 - ybar)` on background.
    CaseControl { mu: f64, ybar: f64 },
    /// Unit weight on presences, a large constant on background rows.
    Infinite { background_weight: f64 },
    /// Weight `exp(eta) / (exp(eta) + kappa)` from the three-parameter
    /// logistic model.
    Asymmetric { kappa: f64 },
}

impl WeightScheme {
    pub const DEFAULT_BACKGROUND_WEIGHT: f64 = 1000.0;

    fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::CaseControl { mu, ybar } => {
                if !(0.0 < mu && mu < 1.0 && 0.0 < ybar && ybar < 1.0) {
                    return Err(SdmError::Validation(format!(
                        "case-control prevalences must lie in (0,1): mu={mu}, ybar={ybar}"
                    )));
                }
            }
            WeightScheme::Infinite { background_weight } => {
                if background_weight <= 0.0 {
                    return Err(SdmError::Validation(format!(
                        "background weight must be positive, got {background_weight}"
                    )));
                }
            }
            WeightScheme::Asymmetric { kappa } => {
                if kappa <= 0.0 {
                    return Err(SdmError::Validation(format!(
                        "kappa must be positive, got {kappa}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The asymmetric-logistic weight at a linear predictor value.
pub fn asymmetric_weight(eta: f64, kappa: f64) -> f64 {
    let e = eta.exp();
    e / (e + kappa)
}

/// A likelihood-based bridge fit (weighted logistic or quasi-linear).
#[derive(Debug, Clone)]
pub struct BridgeFit {
    pub params: Vec<f64>,
    pub param_names: Vec<String>,
    pub loglik: f64,
    pub aic: f64,
    pub converged: bool,
    pub score_norm: f64,
    pub iterations: usize,
    pub covariance: DMatrix<f64>,
}

/// Maxent estimate with its normalizer and the implied PPP intercept.
#[derive(Debug, Clone)]
pub struct MaxentFit {
    pub alpha1: Vec<f64>,
    /// `Z = sum_cells exp(alpha1' x)` on the grid feature scale.
    pub z_norm: f64,
    /// `log(m n / (|A| Z))`, the PPP intercept implied by the fit.
    pub theta0_equiv: f64,
    pub loglik: f64,
    pub converged: bool,
    pub score_norm: f64,
    pub iterations: usize,
}

// ---------------------------------------------------------------------
// Maxent.

struct MaxentObjective<'a> {
    d: &'a PoissonDesign,
    n: f64,
}

impl MaxentObjective<'_> {
    /// Softmax probabilities over cells and the stable `log Z`.
    fn probs(&self, a: &[f64]) -> Option<(Vec<f64>, f64)> {
        let etas = self.d.etas(a)?;
        let max = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut t = Vec::with_capacity(etas.len());
        for &e in &etas {
            let v = (e - max).exp();
            z += v;
            t.push(v);
        }
        let log_z = max + z.ln();
        Some((t.into_iter().map(|v| v / z).collect(), log_z))
    }
}

impl Objective for MaxentObjective<'_> {
    fn dim(&self) -> usize {
        self.d.k()
    }

    /// `-sum_presence log pi = -sum_c count eta_c + n log Z`.
    fn value(&self, a: &[f64]) -> Option<f64> {
        let etas = self.d.etas(a)?;
        let (_, log_z) = self.probs(a)?;
        let mut v = self.n * log_z;
        for (i, &e) in etas.iter().enumerate() {
            v -= self.d.counts[i] * e;
        }
        Some(v)
    }

    fn gradient(&self, a: &[f64]) -> Option<DVector<f64>> {
        let (pi, _) = self.probs(a)?;
        let mut g = DVector::zeros(self.d.k());
        for (i, row) in self.d.rows.iter().enumerate() {
            let f = self.n * pi[i] - self.d.counts[i];
            for (gk, &rk) in g.iter_mut().zip(row.iter()) {
                *gk += f * rk;
            }
        }
        Some(g)
    }

    fn hessian(&self, a: &[f64]) -> Option<DMatrix<f64>> {
        let (pi, _) = self.probs(a)?;
        let k = self.d.k();
        let mut mean = vec![0.0; k];
        for (i, row) in self.d.rows.iter().enumerate() {
            for (m, &rk) in mean.iter_mut().zip(row.iter()) {
                *m += pi[i] * rk;
            }
        }
        let mut h = DMatrix::zeros(k, k);
        for (i, row) in self.d.rows.iter().enumerate() {
            for a_ in 0..k {
                for b in 0..k {
                    h[(a_, b)] += self.n * pi[i] * (row[a_] - mean[a_]) * (row[b] - mean[b]);
                }
            }
        }
        Some(h)
    }
}

/// Maximize the Maxent log-likelihood over the presence cells.
///
/// A non-converged result signals separation (the likelihood is
/// unbounded when a feature perfectly splits presences from background).
pub fn fit_maxent(grid: &CovariateGrid, opts: &FitOptions) -> Result<MaxentFit> {
    grid.validate()?;
    let n = grid.n_presence();
    if n == 0 {
        return Err(SdmError::Validation(
            "Maxent requires at least one presence point".into(),
        ));
    }
    if grid.p() == 0 {
        return Err(SdmError::Validation("Maxent needs habitat features".into()));
    }
    let d = PoissonDesign::build(grid, false, opts.standardize);
    let obj = MaxentObjective { d: &d, n: n as f64 };
    let out = minimize(&obj, &vec![0.0; d.k()], &opts.optim_options());
    let separated = out.x.iter().any(|v| v.abs() > SEPARATION_BOUND);
    let alpha1 = d.back_transform(&out.x);
    let z_norm: f64 = grid
        .cells
        .iter()
        .map(|c| dot(&alpha1, &c.x).exp())
        .sum();
    let m = grid.m() as f64;
    let theta0_equiv = (m * n as f64 / (grid.area * z_norm)).ln();
    Ok(MaxentFit {
        alpha1,
        z_norm,
        theta0_equiv,
        loglik: -out.value,
        converged: out.converged && !separated,
        score_norm: out.score_norm,
        iterations: out.iterations,
    })
}

// ---------------------------------------------------------------------
// Beta-Maxent.

/// One row of the beta selection table.
#[derive(Debug, Clone)]
pub struct BetaMaxentRow {
    pub beta: f64,
    pub loss: f64,
    /// M-estimator information criterion (cross-entropy calibrated so
    /// rows are comparable across beta); `NaN` when the fit failed.
    pub tic: f64,
    pub converged: bool,
    pub alpha1: Vec<f64>,
}

/// The selected deformed model and the full selection table.
#[derive(Debug, Clone)]
pub struct BetaMaxentSelection {
    pub best: DeformedParams,
    pub best_tic: f64,
    pub table: Vec<BetaMaxentRow>,
}

/// Scale-only standardized design: the deformed model has no intercept
/// inside `1 + beta a' x`, so centering would change the model class.
struct DeformedDesign {
    rows: Vec<Vec<f64>>,
    counts: Vec<f64>,
    n: f64,
    sds: Vec<f64>,
}

impl DeformedDesign {
    fn build(grid: &CovariateGrid, standardize: bool) -> DeformedDesign {
        let xrows: Vec<&[f64]> = grid.cells.iter().map(|c| c.x.as_slice()).collect();
        let tr = if standardize {
            Some(Standardize::fit(&xrows, false))
        } else {
            None
        };
        let rows = grid
            .cells
            .iter()
            .map(|c| match &tr {
                Some(t) => t.apply(&c.x),
                None => c.x.clone(),
            })
            .collect();
        DeformedDesign {
            rows,
            counts: grid.cells.iter().map(|c| c.presence_count as f64).collect(),
            n: grid.n_presence() as f64,
            sds: tr.map(|t| t.sds).unwrap_or_else(|| vec![1.0; grid.p()]),
        }
    }

    fn back_transform(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(&self.sds).map(|(&v, &s)| v / s).collect()
    }
}

/// Per-cell state of the deformed model at a coefficient vector.
struct DeformedState {
    pi: Vec<f64>,
    /// `d log pi / d a` per cell.
    grad_log_pi: Vec<Vec<f64>>,
}

fn deformed_state(d: &DeformedDesign, beta: f64, a: &[f64]) -> Option<DeformedState> {
    let m = d.rows.len();
    let k = a.len();
    let mut u = Vec::with_capacity(m);
    let mut t = Vec::with_capacity(m);
    if beta == 0.0 {
        let etas: Vec<f64> = d.rows.iter().map(|r| dot(r, a)).collect();
        let max = etas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &e in &etas {
            u.push(1.0);
            t.push((e - max).exp());
        }
    } else {
        for r in &d.rows {
            let ui = 1.0 + beta * dot(r, a);
            if ui <= 0.0 || !ui.is_finite() {
                return None;
            }
            u.push(ui);
            t.push(ui.powf(1.0 / beta));
        }
    }
    let z: f64 = t.iter().sum();
    if !z.is_finite() || z <= 0.0 {
        return None;
    }
    let pi: Vec<f64> = t.iter().map(|&v| v / z).collect();
    // Z'/Z = sum_c pi_c x_c / u_c  (u = 1 at beta = 0)
    let mut zratio = vec![0.0; k];
    for (i, r) in d.rows.iter().enumerate() {
        for (zr, &rk) in zratio.iter_mut().zip(r.iter()) {
            *zr += pi[i] * rk / u[i];
        }
    }
    let grad_log_pi = d
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .zip(&zratio)
                .map(|(&rk, &zr)| rk / u[i] - zr)
                .collect()
        })
        .collect();
    Some(DeformedState { pi, grad_log_pi })
}

struct BetaMaxentObjective<'a> {
    d: &'a DeformedDesign,
    beta: f64,
}

impl Objective for BetaMaxentObjective<'_> {
    fn dim(&self) -> usize {
        self.d.sds.len()
    }

    fn value(&self, a: &[f64]) -> Option<f64> {
        let st = deformed_state(self.d, self.beta, a)?;
        let b = self.beta;
        let n = self.d.n;
        let mut loss = 0.0;
        if b == 0.0 {
            for (i, &pi) in st.pi.iter().enumerate() {
                if self.d.counts[i] > 0.0 {
                    loss -= self.d.counts[i] * pi.ln() / n;
                }
            }
            loss += 1.0; // the beta -> 0 limit of the quadrature term
        } else if b == -1.0 {
            // Itakura-Saito limit: the constant part of the second term
            // diverges, so the standard limit form is used.
            for (i, &pi) in st.pi.iter().enumerate() {
                if self.d.counts[i] > 0.0 {
                    loss += self.d.counts[i] * (1.0 / pi - 1.0) / n;
                }
                loss += pi.ln();
            }
        } else {
            for (i, &pi) in st.pi.iter().enumerate() {
                if self.d.counts[i] > 0.0 {
                    loss -= self.d.counts[i] * (pi.powf(b) - 1.0) / (n * b);
                }
                loss += pi.powf(1.0 + b) / (1.0 + b);
            }
        }
        loss.is_finite().then_some(loss)
    }

    fn gradient(&self, a: &[f64]) -> Option<DVector<f64>> {
        let st = deformed_state(self.d, self.beta, a)?;
        let b = self.beta;
        let n = self.d.n;
        let k = a.len();
        let mut g = DVector::zeros(k);
        for (i, glp) in st.grad_log_pi.iter().enumerate() {
            let pi_b = if b == 0.0 { 1.0 } else { st.pi[i].powf(b) };
            // -(1/n) sum_pres pi^b dlogpi + sum_c pi^{1+b} dlogpi
            let f = st.pi[i] * pi_b - self.d.counts[i] * pi_b / n;
            for (gk, &gl) in g.iter_mut().zip(glp.iter()) {
                *gk += f * gl;
            }
        }
        g.iter().all(|v: &f64| v.is_finite()).then_some(g)
    }
}

/// Cross-entropy calibrated information criterion for one beta fit:
/// `-2 sum_presence log pi + 2 trace(R^-1 Q)` with `R` the loss Hessian
/// and `Q` the empirical cross-product of the per-point estimating
/// function with the model score.
fn beta_maxent_tic(d: &DeformedDesign, beta: f64, a: &[f64]) -> Option<f64> {
    let st = deformed_state(d, beta, a)?;
    let k = a.len();
    let n = d.n;
    // quadrature part of the per-point estimating function
    let mut c_grad = vec![0.0; k];
    for (i, glp) in st.grad_log_pi.iter().enumerate() {
        let pi_1b = if beta == 0.0 {
            st.pi[i]
        } else {
            st.pi[i].powf(1.0 + beta)
        };
        for (cg, &gl) in c_grad.iter_mut().zip(glp.iter()) {
            *cg += pi_1b * gl;
        }
    }
    let mut fit_term = 0.0;
    let mut q = DMatrix::zeros(k, k);
    for (i, glp) in st.grad_log_pi.iter().enumerate() {
        if d.counts[i] == 0.0 {
            continue;
        }
        fit_term += d.counts[i] * st.pi[i].ln();
        let pi_b = if beta == 0.0 { 1.0 } else { st.pi[i].powf(beta) };
        for r in 0..k {
            let psi_r = pi_b * glp[r] - c_grad[r];
            for c in 0..k {
                q[(r, c)] += d.counts[i] * psi_r * glp[c] / n;
            }
        }
    }
    let obj = BetaMaxentObjective { d, beta };
    let hess = crate::optim::fd_jacobian_of(k, a, |y| obj.gradient(y))?;
    let r_inv = (0.5 * (&hess + hess.transpose())).lu().try_inverse()?;
    let trace = (&r_inv * &q).trace();
    Some(-2.0 * fit_term + 2.0 * trace)
}

/// Fit the deformed Maxent over a grid of entropy indices and select by
/// the M-estimator information criterion. The `beta = 0` entry is the
/// ordinary Maxent fit.
pub fn fit_beta_maxent(
    grid: &CovariateGrid,
    beta_grid: &[f64],
    opts: &FitOptions,
) -> Result<BetaMaxentSelection> {
    grid.validate()?;
    if grid.n_presence() == 0 {
        return Err(SdmError::Validation(
            "beta-Maxent requires at least one presence point".into(),
        ));
    }
    let d = DeformedDesign::build(grid, opts.standardize);
    let betas: Vec<f64> = if beta_grid.is_empty() {
        BETA_GRID.to_vec()
    } else {
        beta_grid.to_vec()
    };
    let mut table = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let obj = BetaMaxentObjective { d: &d, beta };
        let out = minimize(&obj, &vec![0.0; grid.p()], &opts.optim_options());
        let tic = if out.converged {
            beta_maxent_tic(&d, beta, &out.x).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        table.push(BetaMaxentRow {
            beta,
            loss: out.value,
            tic,
            converged: out.converged && tic.is_finite(),
            alpha1: d.back_transform(&out.x),
        });
    }
    let best_row = table
        .iter()
        .filter(|r| r.converged)
        .min_by(|a, b| a.tic.partial_cmp(&b.tic).unwrap())
        .ok_or_else(|| SdmError::NonConvergence {
            iterations: opts.max_iter,
            score_norm: f64::NAN,
        })?;
    Ok(BetaMaxentSelection {
        best: DeformedParams {
            beta_ent: best_row.beta,
            alpha1: best_row.alpha1.clone(),
        },
        best_tic: best_row.tic,
        table,
    })
}

// ---------------------------------------------------------------------
// Weighted logistic regression.

struct LogisticDesign {
    rows: Vec<Vec<f64>>, // (1, x_std)
    y: Vec<f64>,
    weight: Vec<f64>,
    transform: Standardize,
}

impl LogisticDesign {
    /// Presence points become `y = 1` rows (one per point); cells without
    /// presence become `y = 0` background rows.
    fn build(grid: &CovariateGrid, scheme: &WeightScheme) -> LogisticDesign {
        let xrows: Vec<&[f64]> = grid.cells.iter().map(|c| c.x.as_slice()).collect();
        let transform = Standardize::fit(&xrows, true);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut weight = Vec::new();
        let mut push = |x: &[f64], yi: f64| {
            let mut r = Vec::with_capacity(1 + x.len());
            r.push(1.0);
            r.extend(transform.apply(x));
            rows.push(r);
            y.push(yi);
            weight.push(match *scheme {
                WeightScheme::CaseControl { mu, ybar } => {
                    if yi == 1.0 {
                        mu / ybar
                    } else {
                        (1.0 - mu) / (1.0 - ybar)
                    }
                }
                WeightScheme::Infinite { background_weight } => {
                    if yi == 1.0 {
                        1.0
                    } else {
                        background_weight
                    }
                }
                WeightScheme::Asymmetric { .. } => 1.0,
            });
        };
        for c in &grid.cells {
            for _ in 0..c.presence_count {
                push(&c.x, 1.0);
            }
            if c.presence_count == 0 {
                push(&c.x, 0.0);
            }
        }
        LogisticDesign {
            rows,
            y,
            weight,
            transform,
        }
    }
}

struct WeightedLogisticObjective<'a> {
    d: &'a LogisticDesign,
    kappa: Option<f64>,
}

impl Objective for WeightedLogisticObjective<'_> {
    fn dim(&self) -> usize {
        self.d.rows[0].len()
    }

    fn value(&self, b: &[f64]) -> Option<f64> {
        let mut v = 0.0;
        for (i, r) in self.d.rows.iter().enumerate() {
            let eta = dot(r, b);
            if eta > crate::model::ETA_MAX {
                return None;
            }
            match self.kappa {
                None => v += self.d.weight[i] * (log1pexp(eta) - self.d.y[i] * eta),
                Some(kappa) => {
                    // three-parameter logistic: P = (e^eta + kappa) / (1 + e^eta + kappa)
                    let a = eta.exp() + kappa;
                    v -= self.d.y[i] * a.ln() - (1.0 + a).ln();
                }
            }
        }
        v.is_finite().then_some(v)
    }

    fn gradient(&self, b: &[f64]) -> Option<DVector<f64>> {
        let k = self.dim();
        let mut g = DVector::zeros(k);
        for (i, r) in self.d.rows.iter().enumerate() {
            let eta = dot(r, b);
            if eta > crate::model::ETA_MAX {
                return None;
            }
            let f = match self.kappa {
                None => self.d.weight[i] * (sigmoid(eta) - self.d.y[i]),
                Some(kappa) => {
                    let p = (eta.exp() + kappa) / (1.0 + eta.exp() + kappa);
                    asymmetric_weight(eta, kappa) * (p - self.d.y[i])
                }
            };
            for (gk, &rk) in g.iter_mut().zip(r.iter()) {
                *gk += f * rk;
            }
        }
        Some(g)
    }

    fn hessian(&self, b: &[f64]) -> Option<DMatrix<f64>> {
        match self.kappa {
            Some(_) => crate::optim::fd_jacobian_of(self.dim(), b, |y| self.gradient(y)),
            None => {
                let k = self.dim();
                let mut h = DMatrix::zeros(k, k);
                for (i, r) in self.d.rows.iter().enumerate() {
                    let p = sigmoid(dot(r, b));
                    let f = self.d.weight[i] * p * (1.0 - p);
                    for a in 0..k {
                        for c in 0..k {
                            h[(a, c)] += f * r[a] * r[c];
                        }
                    }
                }
                Some(h)
            }
        }
    }
}

/// Weighted logistic regression of presence against background under one
/// of the three weight schemes.
pub fn fit_weighted_logistic(
    grid: &CovariateGrid,
    scheme: &WeightScheme,
    opts: &FitOptions,
) -> Result<BridgeFit> {
    grid.validate()?;
    scheme.validate()?;
    if grid.n_presence() == 0 {
        return Err(SdmError::Validation(
            "logistic fit requires at least one presence point".into(),
        ));
    }
    let d = LogisticDesign::build(grid, scheme);
    let kappa = match *scheme {
        WeightScheme::Asymmetric { kappa } => Some(kappa),
        _ => None,
    };
    let obj = WeightedLogisticObjective { d: &d, kappa };
    let out = minimize(&obj, &vec![0.0; obj.dim()], &opts.optim_options());
    // only slopes: the infinite-weight intercept legitimately sits near -log W
    let separated = out.x[1..].iter().any(|v| v.abs() > SEPARATION_BOUND);

    // back-transform to the grid scale
    let (b0, b1) = d.transform.destandardize_coefs(out.x[0], &out.x[1..]);
    let mut params = vec![b0];
    params.extend(b1);
    let mut names = vec!["(intercept)".to_string()];
    names.extend(grid.feature_names.x.iter().cloned());
    if names.len() != params.len() {
        names = (0..params.len())
            .map(|j| {
                if j == 0 {
                    "(intercept)".into()
                } else {
                    format!("x{j}")
                }
            })
            .collect();
    }

    let k = obj.dim();
    let covariance = match (obj.hessian(&out.x), out.converged) {
        (Some(h), true) => {
            // sandwich with realized per-row outer products
            let mut kmat = DMatrix::zeros(k, k);
            for (i, r) in d.rows.iter().enumerate() {
                let eta = dot(r, &out.x);
                let f = match kappa {
                    None => d.weight[i] * (d.y[i] - sigmoid(eta)),
                    Some(kp) => {
                        let p = (eta.exp() + kp) / (1.0 + eta.exp() + kp);
                        asymmetric_weight(eta, kp) * (d.y[i] - p)
                    }
                };
                for a in 0..k {
                    for c in 0..k {
                        kmat[(a, c)] += f * f * r[a] * r[c];
                    }
                }
            }
            match h.clone().lu().try_inverse() {
                Some(hi) => {
                    let cov_std = &hi * &kmat * hi.transpose();
                    // carry to the raw scale
                    let mut a = DMatrix::identity(k, k);
                    for j in 1..k {
                        a[(j, j)] = 1.0 / d.transform.sds[j - 1];
                        a[(0, j)] = -d.transform.means[j - 1] / d.transform.sds[j - 1];
                    }
                    crate::fit::psd_project(&(&a * cov_std * a.transpose()))
                }
                None => DMatrix::zeros(k, k),
            }
        }
        _ => DMatrix::zeros(k, k),
    };

    Ok(BridgeFit {
        aic: 2.0 * params.len() as f64 + 2.0 * out.value,
        params,
        param_names: names,
        loglik: -out.value,
        converged: out.converged && !separated,
        score_norm: out.score_norm,
        iterations: out.iterations,
        covariance,
    })
}

// ---------------------------------------------------------------------
// Quasi-linear Poisson point process.

/// One row of the tau selection table.
#[derive(Debug, Clone)]
pub struct QuasiLinearRow {
    pub tau: f64,
    pub loglik: f64,
    pub aic: f64,
    pub converged: bool,
    pub params: QuasiLinearParams,
}

/// The AIC-selected quasi-linear fit, the per-tau table and the
/// sampling-bias proportion map `1 - omega(s_i)` of the selected fit.
#[derive(Debug, Clone)]
pub struct QuasiLinearSelection {
    pub best: QuasiLinearParams,
    pub best_aic: f64,
    pub table: Vec<QuasiLinearRow>,
    pub bias_proportion: Vec<f64>,
}

struct QuasiLinearObjective<'a> {
    grid: &'a CovariateGrid,
    tau: f64,
    /// Free habitat coefficients; excludes the intercept when it is
    /// pinned at zero.
    p_free_theta: usize,
    x_intercept: bool,
}

impl QuasiLinearObjective<'_> {
    fn model(&self, th: &[f64]) -> IntensityModel {
        let theta = if self.x_intercept {
            th[..self.p_free_theta].to_vec()
        } else {
            let mut t = vec![0.0];
            t.extend_from_slice(&th[..self.p_free_theta]);
            t
        };
        IntensityModel::QuasiLinear(QuasiLinearParams {
            ql_tau: self.tau,
            theta,
            alpha_bias: th[self.p_free_theta..].to_vec(),
        })
    }
}

impl Objective for QuasiLinearObjective<'_> {
    fn dim(&self) -> usize {
        self.p_free_theta + self.grid.q() + 1
    }

    fn value(&self, th: &[f64]) -> Option<f64> {
        negloglik(&self.model(th), self.grid).ok()
    }

    fn gradient(&self, th: &[f64]) -> Option<DVector<f64>> {
        score_kl(&self.model(th), self.grid).ok().map(|s| -s)
    }
}

/// Maximize the quasi-linear log-likelihood for each tau in the grid
/// (default `{-1, 0, 1}`) and select by AIC.
pub fn fit_quasilinear_ppp(
    grid: &CovariateGrid,
    tau_grid: &[f64],
    opts: &FitOptions,
) -> Result<QuasiLinearSelection> {
    grid.validate()?;
    if grid.n_presence() == 0 {
        return Err(SdmError::Validation(
            "quasi-linear fit requires at least one presence point".into(),
        ));
    }
    let taus: Vec<f64> = if tau_grid.is_empty() {
        vec![-1.0, 0.0, 1.0]
    } else {
        tau_grid.to_vec()
    };

    // Standardize x and z in a working copy. Without a free habitat
    // intercept the centering shift of x is not absorbable, so x is
    // scaled only in that case; the bias predictor always carries an
    // intercept.
    let mut work = grid.clone();
    let x_tr = Standardize::fit(
        &grid.cells.iter().map(|c| c.x.as_slice()).collect::<Vec<_>>(),
        opts.x_intercept,
    );
    let z_tr = Standardize::fit(
        &grid.cells.iter().map(|c| c.z.as_slice()).collect::<Vec<_>>(),
        true,
    );
    if opts.standardize {
        for c in work.cells.iter_mut() {
            c.x = x_tr.apply(&c.x);
            c.z = z_tr.apply(&c.z);
        }
    }

    let p_free_theta = grid.p() + usize::from(opts.x_intercept);
    let mut table = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let obj = QuasiLinearObjective {
            grid: &work,
            tau,
            p_free_theta,
            x_intercept: opts.x_intercept,
        };
        let out = minimize(&obj, &vec![0.0; obj.dim()], &opts.optim_options());
        let (theta, alpha) = if opts.standardize {
            let (t0, t1) = if opts.x_intercept {
                x_tr.destandardize_coefs(out.x[0], &out.x[1..p_free_theta])
            } else {
                x_tr.destandardize_coefs(0.0, &out.x[..p_free_theta])
            };
            let (a0, a1) =
                z_tr.destandardize_coefs(out.x[p_free_theta], &out.x[p_free_theta + 1..]);
            let mut theta = vec![t0];
            theta.extend(t1);
            let mut alpha = vec![a0];
            alpha.extend(a1);
            (theta, alpha)
        } else {
            let mut theta = if opts.x_intercept {
                vec![]
            } else {
                vec![0.0]
            };
            theta.extend_from_slice(&out.x[..p_free_theta]);
            (theta, out.x[p_free_theta..].to_vec())
        };
        let params = QuasiLinearParams {
            ql_tau: tau,
            theta,
            alpha_bias: alpha,
        };
        let k = obj.dim() as f64;
        table.push(QuasiLinearRow {
            tau,
            loglik: -out.value,
            aic: 2.0 * k + 2.0 * out.value,
            converged: out.converged,
            params,
        });
    }
    let best_row = table
        .iter()
        .filter(|r| r.converged)
        .min_by(|a, b| a.aic.partial_cmp(&b.aic).unwrap())
        .ok_or_else(|| SdmError::NonConvergence {
            iterations: opts.max_iter,
            score_norm: f64::NAN,
        })?;
    let bias_proportion = grid
        .cells
        .iter()
        .map(|c| 1.0 - quasilinear_weight(&best_row.params, c))
        .collect();
    Ok(QuasiLinearSelection {
        best: best_row.params.clone(),
        best_aic: best_row.aic,
        table,
        bias_proportion,
    })
}
