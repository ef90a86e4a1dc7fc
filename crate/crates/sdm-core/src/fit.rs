//! Divergence-minimizing fits of log-linear intensities over a grid.
//!
//! Four objectives share one damped-Newton engine: the negative
//! log-likelihood (extended KL), the beta-power loss, the gamma-power
//! loss, and the cdf-weighted U-divergence estimating equation. All are
//! expressed through the pseudo-response form `sum_i w_i (zeta_i -
//! lambda_i) weight_i d(log lambda)/d(theta)`.

use crate::error::{Result, SdmError};
use crate::grid::{pseudo_responses, CovariateGrid, Standardize};
use crate::model::{cumulative_intensity, dot, IntensityModel, ETA_MAX};
use crate::optim::{
    fd_jacobian_of, minimize, solve_root, EstimatingFunction, Objective, OptimOptions,
    OptimOutcome,
};
use nalgebra::{DMatrix, DVector};

/// Weight distribution for the cdf-weighted (U-divergence) score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CdfFamily {
    /// `F(u) = 1` for `u > 0`; reduces the U fit to the MLE.
    Step,
    /// `F(u) = 1 - exp(-u)`.
    Exponential,
    /// `F(u) = min(u, 1)`.
    UniformCap,
}

impl CdfFamily {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            CdfFamily::Step => {
                if u > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            CdfFamily::Exponential => -(-u).exp_m1(),
            CdfFamily::UniformCap => u.min(1.0),
        }
    }

    pub fn deriv(self, u: f64) -> f64 {
        match self {
            CdfFamily::Step => 0.0,
            CdfFamily::Exponential => (-u).exp(),
            CdfFamily::UniformCap => {
                if u < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Which discrepancy the fit minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DivergenceSpec {
    /// Maximum likelihood (extended Kullback-Leibler).
    Kl,
    BetaPower(f64),
    GammaPower(f64),
    UCdf { cdf: CdfFamily, ucdf_tau: f64 },
}

impl DivergenceSpec {
    pub fn label(&self) -> String {
        match self {
            DivergenceSpec::Kl => "kl".into(),
            DivergenceSpec::BetaPower(b) => format!("beta({b})"),
            DivergenceSpec::GammaPower(g) => format!("gamma({g})"),
            DivergenceSpec::UCdf { cdf, ucdf_tau } => format!("ucdf({cdf:?},{ucdf_tau})"),
        }
    }
}

/// Options shared by all fitters.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Sup-norm tolerance on the estimating function (in fitting
    /// coordinates).
    pub tol: f64,
    pub max_iter: usize,
    /// Fit in standardized feature coordinates (coefficients are always
    /// reported on the grid scale).
    pub standardize: bool,
    /// Include an intercept column in the design.
    pub x_intercept: bool,
    pub ridge_jitter: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 200,
            standardize: true,
            x_intercept: true,
            ridge_jitter: 1e-8,
        }
    }
}

impl FitOptions {
    pub(crate) fn optim_options(&self) -> OptimOptions {
        OptimOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ridge_jitter: self.ridge_jitter,
        }
    }
}

/// A fitted model with convergence diagnostics and a sandwich covariance.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: DivergenceSpec,
    /// Coefficients on the grid feature scale: `[theta0, theta1...]` when
    /// the design has an intercept, `[theta1...]` otherwise.
    pub params: Vec<f64>,
    pub param_names: Vec<String>,
    /// Final loss value. For the U-cdf fit (which has no closed-form
    /// loss) this is the KL loss at the solution, kept for monitoring.
    pub objective: f64,
    /// Log-likelihood for KL fits; `None` for other objectives.
    pub loglik: Option<f64>,
    /// Sup-norm of the estimating function at the solution, in fitting
    /// (standardized) coordinates.
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whether any Newton system needed ridge stabilization.
    pub ridged: bool,
    /// Sandwich covariance `J^-1 K J^-T` on the reported scale.
    pub covariance: DMatrix<f64>,
    /// Number of free parameters (the pinned gamma intercept is not free).
    pub n_params: usize,
    pub aic: Option<f64>,
    pub tic: Option<f64>,
    /// Estimating-function Jacobian and score-variance blocks in fitting
    /// coordinates, kept for information criteria.
    pub info_j: DMatrix<f64>,
    pub info_k: DMatrix<f64>,
}

/// Negative log-likelihood `-sum_points log lambda + Lambda` for any
/// intensity model, by cell quadrature.
pub fn negloglik(model: &IntensityModel, grid: &CovariateGrid) -> Result<f64> {
    let mut loss = cumulative_intensity(model, grid)?;
    for c in &grid.cells {
        if c.presence_count > 0 {
            loss -= c.presence_count as f64 * model.eval(c)?.ln();
        }
    }
    Ok(loss)
}

/// KL score `sum_i w_i (zeta_i - lambda_i) d(log lambda_i)/d(theta)`;
/// equals `-grad negloglik`.
pub fn score_kl(model: &IntensityModel, grid: &CovariateGrid) -> Result<DVector<f64>> {
    let zeta = pseudo_responses(grid);
    let mut score = DVector::zeros(model.dim());
    for (c, &z) in grid.cells.iter().zip(zeta.iter()) {
        let lam = model.eval(c)?;
        let g = model.grad_log(c);
        let f = c.w * (z - lam);
        for (s, gk) in score.iter_mut().zip(g.iter()) {
            *s += f * gk;
        }
    }
    Ok(score)
}

// ---------------------------------------------------------------------
// Internal design shared by the fitters.

pub(crate) struct PoissonDesign {
    /// Row `g_i` per cell (includes the leading 1 when `intercept`).
    pub rows: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub counts: Vec<f64>,
    pub intercept: bool,
    pub transform: Option<Standardize>,
    pub names: Vec<String>,
}

impl PoissonDesign {
    pub fn build(grid: &CovariateGrid, intercept: bool, standardize: bool) -> PoissonDesign {
        let xrows: Vec<&[f64]> = grid.cells.iter().map(|c| c.x.as_slice()).collect();
        let transform = if standardize {
            Some(Standardize::fit(&xrows, true))
        } else {
            None
        };
        let rows = grid
            .cells
            .iter()
            .map(|c| {
                let x = match &transform {
                    Some(t) => t.apply(&c.x),
                    None => c.x.clone(),
                };
                if intercept {
                    let mut r = Vec::with_capacity(1 + x.len());
                    r.push(1.0);
                    r.extend(x);
                    r
                } else {
                    x
                }
            })
            .collect();
        let mut names = Vec::new();
        if intercept {
            names.push("(intercept)".into());
        }
        if grid.feature_names.x.len() == grid.p() {
            names.extend(grid.feature_names.x.iter().cloned());
        } else {
            names.extend((0..grid.p()).map(|j| format!("x{}", j + 1)));
        }
        PoissonDesign {
            rows,
            w: grid.cells.iter().map(|c| c.w).collect(),
            counts: grid.cells.iter().map(|c| c.presence_count as f64).collect(),
            intercept,
            transform,
            names,
        }
    }

    pub fn k(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Linear predictors; `None` when any would overflow `exp`.
    pub fn etas(&self, th: &[f64]) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            let eta = dot(r, th);
            if !eta.is_finite() || eta > ETA_MAX {
                return None;
            }
            out.push(eta);
        }
        Some(out)
    }

    /// Map fitted coefficients back to the grid feature scale.
    pub(crate) fn back_transform(&self, th: &[f64]) -> Vec<f64> {
        match &self.transform {
            None => th.to_vec(),
            Some(t) => {
                if self.intercept {
                    let (t0, t1) = t.destandardize_coefs(th[0], &th[1..]);
                    let mut out = vec![t0];
                    out.extend(t1);
                    out
                } else {
                    th.iter().zip(t.sds.iter()).map(|(&v, &s)| v / s).collect()
                }
            }
        }
    }

    /// Linear map `A` with `params_raw = A params_std`, used to carry the
    /// covariance to the reported scale.
    fn back_transform_matrix(&self) -> DMatrix<f64> {
        let k = self.k();
        let mut a = DMatrix::identity(k, k);
        if let Some(t) = &self.transform {
            if self.intercept {
                for j in 1..k {
                    a[(j, j)] = 1.0 / t.sds[j - 1];
                    a[(0, j)] = -t.means[j - 1] / t.sds[j - 1];
                }
            } else {
                for j in 0..k {
                    a[(j, j)] = 1.0 / t.sds[j];
                }
            }
        }
        a
    }
}

// ---------------------------------------------------------------------
// Objectives.

struct KlObjective<'a> {
    d: &'a PoissonDesign,
}

impl KlObjective<'_> {
    /// `sum_i [w_i lambda_i - count_i eta_i]`; equals the negative
    /// log-likelihood.
    fn loss(&self, etas: &[f64]) -> f64 {
        let d = self.d;
        etas.iter()
            .enumerate()
            .map(|(i, &e)| d.w[i] * e.exp() - d.counts[i] * e)
            .sum()
    }
}

impl Objective for KlObjective<'_> {
    fn dim(&self) -> usize {
        self.d.k()
    }

    fn value(&self, th: &[f64]) -> Option<f64> {
        Some(self.loss(&self.d.etas(th)?))
    }

    fn gradient(&self, th: &[f64]) -> Option<DVector<f64>> {
        let d = self.d;
        let etas = d.etas(th)?;
        let mut g = DVector::zeros(d.k());
        for (i, &e) in etas.iter().enumerate() {
            let f = d.w[i] * e.exp() - d.counts[i];
            for (gk, &rk) in g.iter_mut().zip(d.rows[i].iter()) {
                *gk += f * rk;
            }
        }
        Some(g)
    }

    fn hessian(&self, th: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.d;
        let etas = d.etas(th)?;
        let mut h = DMatrix::zeros(d.k(), d.k());
        for (i, &e) in etas.iter().enumerate() {
            let f = d.w[i] * e.exp();
            accumulate_outer(&mut h, &d.rows[i], f);
        }
        Some(h)
    }
}

struct BetaObjective<'a> {
    d: &'a PoissonDesign,
    beta: f64,
}

impl Objective for BetaObjective<'_> {
    fn dim(&self) -> usize {
        self.d.k()
    }

    fn value(&self, th: &[f64]) -> Option<f64> {
        let d = self.d;
        let etas = d.etas(th)?;
        let b = self.beta;
        let mut loss = 0.0;
        if b == -1.0 {
            // Itakura-Saito limit: sum_points 1/lambda + int log lambda
            for (i, &e) in etas.iter().enumerate() {
                loss += d.counts[i] * (-e).exp() + d.w[i] * e;
            }
        } else {
            for (i, &e) in etas.iter().enumerate() {
                loss += -d.counts[i] * (b * e).exp() / b
                    + d.w[i] * ((b + 1.0) * e).exp() / (b + 1.0);
            }
        }
        loss.is_finite().then_some(loss)
    }

    fn gradient(&self, th: &[f64]) -> Option<DVector<f64>> {
        let d = self.d;
        let etas = d.etas(th)?;
        let b = self.beta;
        let mut g = DVector::zeros(d.k());
        for (i, &e) in etas.iter().enumerate() {
            // -(count - w lambda) lambda^beta per cell
            let f = (d.w[i] * e.exp() - d.counts[i]) * (b * e).exp();
            if !f.is_finite() {
                return None;
            }
            for (gk, &rk) in g.iter_mut().zip(d.rows[i].iter()) {
                *gk += f * rk;
            }
        }
        Some(g)
    }

    fn hessian(&self, th: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.d;
        let etas = d.etas(th)?;
        let b = self.beta;
        let mut h = DMatrix::zeros(d.k(), d.k());
        for (i, &e) in etas.iter().enumerate() {
            let lam_b = (b * e).exp();
            let f = lam_b * ((b + 1.0) * d.w[i] * e.exp() - b * d.counts[i]);
            if !f.is_finite() {
                return None;
            }
            accumulate_outer(&mut h, &d.rows[i], f);
        }
        Some(h)
    }
}

struct GammaObjective<'a> {
    d: &'a PoissonDesign,
    gamma: f64,
}

impl GammaObjective<'_> {
    /// Presence- and quadrature-normalized powered intensities.
    fn pq(&self, etas: &[f64]) -> Option<(f64, f64)> {
        let d = self.d;
        let g = self.gamma;
        let mut p = 0.0;
        let mut q = 0.0;
        for (i, &e) in etas.iter().enumerate() {
            p += d.counts[i] * (g * e).exp();
            q += d.w[i] * ((g + 1.0) * e).exp();
        }
        (p.is_finite() && q.is_finite() && q > 0.0).then_some((p, q))
    }
}

impl Objective for GammaObjective<'_> {
    fn dim(&self) -> usize {
        self.d.k()
    }

    fn value(&self, th: &[f64]) -> Option<f64> {
        let etas = self.d.etas(th)?;
        let (p, q) = self.pq(&etas)?;
        let loss = -(1.0 / self.gamma) * p * q.powf(-self.gamma / (self.gamma + 1.0));
        loss.is_finite().then_some(loss)
    }

    fn gradient(&self, th: &[f64]) -> Option<DVector<f64>> {
        let d = self.d;
        let g = self.gamma;
        let etas = d.etas(th)?;
        let (p, q) = self.pq(&etas)?;
        // grad = -Q^{-g/(g+1)} [ sum_pts lambda^g x - (P/Q) sum w lambda^{g+1} x ]
        let scale = q.powf(-g / (g + 1.0));
        let mut out = DVector::zeros(d.k());
        for (i, &e) in etas.iter().enumerate() {
            let f = d.counts[i] * (g * e).exp() - (p / q) * d.w[i] * ((g + 1.0) * e).exp();
            for (gk, &rk) in out.iter_mut().zip(d.rows[i].iter()) {
                *gk += -scale * f * rk;
            }
        }
        out.iter().all(|v: &f64| v.is_finite()).then_some(out)
    }
}

struct UcdfFunction<'a> {
    d: &'a PoissonDesign,
    cdf: CdfFamily,
    tau: f64,
}

impl EstimatingFunction for UcdfFunction<'_> {
    fn dim(&self) -> usize {
        self.d.k()
    }

    /// `sum_i F(tau lambda_i) (count_i - w_i lambda_i) g_i`.
    fn eval(&self, th: &[f64]) -> Option<DVector<f64>> {
        let d = self.d;
        let etas = d.etas(th)?;
        let mut out = DVector::zeros(d.k());
        for (i, &e) in etas.iter().enumerate() {
            let lam = e.exp();
            let f = self.cdf.eval(self.tau * lam) * (d.counts[i] - d.w[i] * lam);
            for (gk, &rk) in out.iter_mut().zip(d.rows[i].iter()) {
                *gk += f * rk;
            }
        }
        Some(out)
    }

    fn jacobian(&self, th: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.d;
        let etas = d.etas(th)?;
        let mut j = DMatrix::zeros(d.k(), d.k());
        for (i, &e) in etas.iter().enumerate() {
            let lam = e.exp();
            let u = self.tau * lam;
            let f = self.cdf.deriv(u) * u * (d.counts[i] - d.w[i] * lam)
                - self.cdf.eval(u) * d.w[i] * lam;
            accumulate_outer(&mut j, &d.rows[i], f);
        }
        Some(j)
    }
}

fn accumulate_outer(h: &mut DMatrix<f64>, row: &[f64], f: f64) {
    let k = row.len();
    for a in 0..k {
        let fa = f * row[a];
        for b in 0..k {
            h[(a, b)] += fa * row[b];
        }
    }
}

// ---------------------------------------------------------------------
// Sandwich pieces.

/// Score-variance estimate for the weighted point-process scores.
///
/// For the KL, beta and U objectives the estimating function is
/// `sum_points h(s) - int h lambda` with `h = weight * g`, whose variance
/// is `int h h' lambda` by Campbell's formula; the empirical version sums
/// `h h'` over the observed points. This makes the estimate exactly
/// invariant under quadrature refinement. The gamma score is normalized by
/// data-dependent sums, so it falls back to realized per-cell outer
/// products.
fn score_variance(
    d: &PoissonDesign,
    spec: &DivergenceSpec,
    etas: &[f64],
) -> DMatrix<f64> {
    let k = d.k();
    let mut kmat = DMatrix::zeros(k, k);
    match spec {
        DivergenceSpec::Kl => {
            for (i, _) in etas.iter().enumerate() {
                if d.counts[i] > 0.0 {
                    accumulate_outer(&mut kmat, &d.rows[i], d.counts[i]);
                }
            }
        }
        DivergenceSpec::BetaPower(b) => {
            for (i, &e) in etas.iter().enumerate() {
                if d.counts[i] > 0.0 {
                    accumulate_outer(&mut kmat, &d.rows[i], d.counts[i] * (2.0 * b * e).exp());
                }
            }
        }
        DivergenceSpec::UCdf { cdf, ucdf_tau } => {
            for (i, &e) in etas.iter().enumerate() {
                if d.counts[i] > 0.0 {
                    let f = cdf.eval(ucdf_tau * e.exp());
                    accumulate_outer(&mut kmat, &d.rows[i], d.counts[i] * f * f);
                }
            }
        }
        DivergenceSpec::GammaPower(g) => {
            let mut p = 0.0;
            let mut q = 0.0;
            for (i, &e) in etas.iter().enumerate() {
                p += d.counts[i] * (g * e).exp();
                q += d.w[i] * ((g + 1.0) * e).exp();
            }
            for (i, &e) in etas.iter().enumerate() {
                let u = (g * e).exp() / p;
                let v = ((g + 1.0) * e).exp() / q;
                let psi = d.counts[i] * u - d.w[i] * v;
                accumulate_outer(&mut kmat, &d.rows[i], psi * psi);
            }
        }
    }
    kmat
}

/// Estimating function for a spec on a design, used for the numerical `J`.
fn estimating_function(
    d: &PoissonDesign,
    spec: &DivergenceSpec,
    th: &[f64],
) -> Option<DVector<f64>> {
    match spec {
        DivergenceSpec::Kl => KlObjective { d }.gradient(th).map(|g| -g),
        DivergenceSpec::BetaPower(b) => BetaObjective { d, beta: *b }.gradient(th).map(|g| -g),
        DivergenceSpec::GammaPower(g) => {
            GammaObjective { d, gamma: *g }.gradient(th).map(|g| -g)
        }
        DivergenceSpec::UCdf { cdf, ucdf_tau } => UcdfFunction {
            d,
            cdf: *cdf,
            tau: *ucdf_tau,
        }
        .eval(th),
    }
}

/// Symmetrize and floor the eigenvalues of a covariance at zero.
pub(crate) fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let mut rebuilt = DMatrix::zeros(m.nrows(), m.ncols());
    for (idx, val) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(idx);
        let lam = val.max(0.0);
        rebuilt += lam * &v * v.transpose();
    }
    rebuilt
}

/// Sandwich covariance `J^-1 K J^-T` in the given coordinates.
///
/// `J` is the numerical Jacobian of the estimating function at the
/// solution. With `jitter == None` a singular `J` is an error suggesting
/// a ridge; with a jitter the diagonal is inflated until `J` inverts and
/// the caller flags the fit as ridge-stabilized.
fn sandwich_in_design(
    d: &PoissonDesign,
    spec: &DivergenceSpec,
    th: &[f64],
    jitter: Option<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, bool)> {
    let k = d.k();
    let jac = fd_jacobian_of(k, th, |y| estimating_function(d, spec, y)).ok_or_else(|| {
        SdmError::Singular {
            context: "estimating-function Jacobian".into(),
        }
    })?;
    let j = -jac; // orient so the KL case is the Fisher information
    let etas = d.etas(th).ok_or_else(|| SdmError::Singular {
        context: "intensity evaluation at solution".into(),
    })?;
    let kmat = score_variance(d, spec, &etas);
    let mut jittered = false;
    let j_inv = match j.clone().lu().try_inverse() {
        Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
        _ => match jitter {
            None => {
                return Err(SdmError::Singular {
                    context: "sandwich J".into(),
                })
            }
            Some(base) => {
                let scale = j.diagonal().amax().max(1.0);
                let mut amount = base * scale;
                let mut found = None;
                for _ in 0..12 {
                    let mut jj = j.clone();
                    for i in 0..k {
                        jj[(i, i)] += amount;
                    }
                    if let Some(inv) = jj.lu().try_inverse() {
                        if inv.iter().all(|v| v.is_finite()) {
                            found = Some(inv);
                            break;
                        }
                    }
                    amount *= 10.0;
                }
                jittered = true;
                found.ok_or_else(|| SdmError::Singular {
                    context: "sandwich J".into(),
                })?
            }
        },
    };
    let cov = &j_inv * &kmat * j_inv.transpose();
    Ok((psd_project(&cov), j, kmat, jittered))
}

/// Sandwich covariance of a converged fit, on the reported scale.
pub fn sandwich_covariance(fit: &FitResult, grid: &CovariateGrid) -> Result<DMatrix<f64>> {
    if !fit.converged {
        return Err(SdmError::Validation(
            "sandwich covariance requires a converged fit".into(),
        ));
    }
    let slopes_only = matches!(fit.spec, DivergenceSpec::GammaPower(_));
    let d = PoissonDesign::build(grid, !slopes_only, false);
    let th: Vec<f64> = if slopes_only && fit.params.len() == grid.p() + 1 {
        fit.params[1..].to_vec()
    } else {
        fit.params.clone()
    };
    let (cov, _, _, _) = sandwich_in_design(&d, &fit.spec, &th, None)?;
    if slopes_only && fit.params.len() == grid.p() + 1 {
        let mut full = DMatrix::zeros(fit.params.len(), fit.params.len());
        full.view_mut((1, 1), (grid.p(), grid.p())).copy_from(&cov);
        return Ok(full);
    }
    Ok(cov)
}

// ---------------------------------------------------------------------
// Fitters.

/// Maximum-likelihood fit of the log-linear intensity.
pub fn fit_mle(grid: &CovariateGrid, opts: &FitOptions) -> Result<FitResult> {
    fit_divergence(grid, DivergenceSpec::Kl, opts)
}

/// Minimum beta-power divergence fit; `beta == 0` dispatches to the MLE.
pub fn fit_beta_power(grid: &CovariateGrid, beta: f64, opts: &FitOptions) -> Result<FitResult> {
    fit_divergence(grid, DivergenceSpec::BetaPower(beta), opts)
}

/// Minimum gamma-power divergence fit.
///
/// The gamma loss is invariant to the intensity scale, so slopes are
/// fitted without an intercept and the intercept is pinned afterwards so
/// that the fitted cumulative intensity matches the observed count.
pub fn fit_gamma_power(grid: &CovariateGrid, gamma: f64, opts: &FitOptions) -> Result<FitResult> {
    fit_divergence(grid, DivergenceSpec::GammaPower(gamma), opts)
}

/// Cdf-weighted U-divergence fit, solved directly on its estimating
/// equation; with the Step cdf it coincides with the MLE.
pub fn fit_u_cdf(
    grid: &CovariateGrid,
    cdf: CdfFamily,
    ucdf_tau: f64,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_divergence(grid, DivergenceSpec::UCdf { cdf, ucdf_tau }, opts)
}

/// Dispatching fitter behind the four public entry points.
pub fn fit_divergence(
    grid: &CovariateGrid,
    spec: DivergenceSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    grid.validate()?;
    if grid.n_presence() == 0 {
        return Err(SdmError::Validation(
            "fit requires at least one presence point".into(),
        ));
    }
    match spec {
        DivergenceSpec::BetaPower(b) if b == 0.0 => {
            return fit_divergence(grid, DivergenceSpec::Kl, opts)
        }
        DivergenceSpec::GammaPower(g) if g == 0.0 || g <= -1.0 => {
            return Err(SdmError::Validation(format!(
                "gamma must be nonzero and greater than -1, got {g}"
            )));
        }
        DivergenceSpec::UCdf { ucdf_tau, .. } if ucdf_tau <= 0.0 => {
            return Err(SdmError::Validation(format!(
                "ucdf_tau must be positive, got {ucdf_tau}"
            )));
        }
        _ => {}
    }

    let gamma_fit = matches!(spec, DivergenceSpec::GammaPower(_));
    let intercept = opts.x_intercept && !gamma_fit;
    if gamma_fit && grid.p() == 0 {
        return Err(SdmError::Validation(
            "gamma fit needs at least one habitat feature".into(),
        ));
    }
    let d = PoissonDesign::build(grid, intercept, opts.standardize);
    let x0 = vec![0.0; d.k()];
    let oopts = opts.optim_options();

    let out: OptimOutcome = match &spec {
        DivergenceSpec::Kl => minimize(&KlObjective { d: &d }, &x0, &oopts),
        DivergenceSpec::BetaPower(b) => minimize(&BetaObjective { d: &d, beta: *b }, &x0, &oopts),
        DivergenceSpec::GammaPower(g) => {
            minimize(&GammaObjective { d: &d, gamma: *g }, &x0, &oopts)
        }
        DivergenceSpec::UCdf { cdf, ucdf_tau } => {
            // The cdf weight vanishes with the intensity, so the score has
            // a degenerate zero as the predictors head to minus infinity.
            // Start the root solve from the MLE to land on the intended
            // root.
            let mle = minimize(&KlObjective { d: &d }, &x0, &oopts);
            solve_root(
                &UcdfFunction {
                    d: &d,
                    cdf: *cdf,
                    tau: *ucdf_tau,
                },
                &mle.x,
                &oopts,
            )
        }
    };

    assemble_result(grid, &d, spec, opts, out)
}

fn assemble_result(
    grid: &CovariateGrid,
    d: &PoissonDesign,
    spec: DivergenceSpec,
    opts: &FitOptions,
    mut out: OptimOutcome,
) -> Result<FitResult> {
    let k_free = d.k();
    let mut params = d.back_transform(&out.x);
    let mut names = d.names.clone();

    // Covariance and information blocks in fitting coordinates.
    let (cov_std, info_j, info_k) =
        match sandwich_in_design(d, &spec, &out.x, Some(opts.ridge_jitter)) {
            Ok((cov, j, k, jittered)) => {
                out.ridged |= jittered;
                (cov, j, k)
            }
            Err(_) if !out.converged => (
                DMatrix::zeros(k_free, k_free),
                DMatrix::zeros(k_free, k_free),
                DMatrix::zeros(k_free, k_free),
            ),
            Err(e) => return Err(e),
        };
    let a = d.back_transform_matrix();
    let mut covariance = psd_project(&(&a * &cov_std * a.transpose()));

    // Objective bookkeeping.
    let mut objective = out.value;
    let mut loglik = None;
    match spec {
        DivergenceSpec::Kl => {
            loglik = Some(-out.value);
        }
        DivergenceSpec::UCdf { .. } => {
            // No closed-form loss; report the KL loss for monitoring.
            objective = KlObjective { d }
                .value(&out.x)
                .unwrap_or(f64::NAN);
        }
        _ => {}
    }

    // Pin the gamma intercept so Lambda(theta) = n, on the grid scale.
    if matches!(spec, DivergenceSpec::GammaPower(_)) && opts.x_intercept {
        let mut lam_sum = 0.0;
        for c in &grid.cells {
            lam_sum += c.w * dot(&params, &c.x).exp();
        }
        let theta0 = (grid.n_presence() as f64 / lam_sum).ln();
        params.insert(0, theta0);
        names.insert(0, "(intercept)".into());
        let p = grid.p();
        let mut full = DMatrix::zeros(p + 1, p + 1);
        full.view_mut((1, 1), (p, p)).copy_from(&covariance);
        covariance = full;
    }

    let n_params = k_free;
    let tic = {
        let ji = info_j.clone().lu().try_inverse();
        ji.map(|ji| 2.0 * (&ji * &info_k).trace() + 2.0 * objective)
    };
    let aic = loglik.map(|l| 2.0 * n_params as f64 - 2.0 * l);

    Ok(FitResult {
        spec,
        params,
        param_names: names,
        objective,
        loglik,
        score_norm: out.score_norm,
        iterations: out.iterations,
        converged: out.converged,
        ridged: out.ridged,
        covariance,
        n_params,
        aic,
        tic,
        info_j,
        info_k,
    })
}

/// The gamma-power normalized weights `u_gamma` (presence-normalized) and
/// `v_gamma` (quadrature-normalized) at a parameter value.
pub fn gamma_uv(
    params: &crate::model::LogLinearParams,
    grid: &CovariateGrid,
    gamma: f64,
) -> (Vec<f64>, Vec<f64>) {
    let etas: Vec<f64> = grid.cells.iter().map(|c| params.log_intensity(c)).collect();
    let mut p = 0.0;
    let mut q = 0.0;
    for (c, &e) in grid.cells.iter().zip(&etas) {
        p += c.presence_count as f64 * (gamma * e).exp();
        q += c.w * ((gamma + 1.0) * e).exp();
    }
    let u = etas.iter().map(|&e| (gamma * e).exp() / p).collect();
    let v = etas.iter().map(|&e| ((gamma + 1.0) * e).exp() / q).collect();
    (u, v)
}
