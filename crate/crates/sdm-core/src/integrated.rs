//! Integrated species-distribution likelihoods.
//!
//! A shared log-linear intensity `lambda0(s, beta)` drives three
//! observation layers: a presence-background (PB) thinned process with
//! logistic detection `p(s, alpha)`, a site-occupancy (SO) survey over
//! regions and repeat visits, and a distance-sampling (DS) process with a
//! half-normal detection decaying in the per-cell transect distance. The
//! integrated likelihood is the sum of the component likelihoods, and the
//! robust variant downweights PB score contributions by a cdf of the
//! fitted intensity.

use crate::error::{Result, SdmError};
use crate::fit::CdfFamily;
use crate::grid::CovariateGrid;
use crate::model::dot;
use crate::optim::{
    fd_jacobian_of, minimize, solve_root, EstimatingFunction, Objective, OptimOptions,
};
use nalgebra::{DMatrix, DVector};

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(u))` without overflow.
fn log1pexp(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

/// Presence-background model parameters: shared habitat coefficients
/// (intercept in slot 0) and accessibility coefficients for the logistic
/// detection probability.
#[derive(Debug, Clone)]
pub struct PbModel {
    pub beta_shared: Vec<f64>,
    pub alpha_detect: Vec<f64>,
    /// Whether `alpha_detect` carries its own intercept in slot 0. Off by
    /// default: a free detection intercept is confounded with the
    /// intensity intercept in PB-only fits.
    pub alpha_intercept: bool,
}

impl PbModel {
    pub fn detection_prob(&self, v: &[f64]) -> f64 {
        let eta = if self.alpha_intercept {
            self.alpha_detect[0] + dot(&self.alpha_detect[1..], v)
        } else {
            dot(&self.alpha_detect, v)
        };
        sigmoid(eta)
    }

    pub fn log_intensity(&self, x: &[f64]) -> f64 {
        self.beta_shared[0] + dot(&self.beta_shared[1..], x)
    }
}

/// Site-occupancy survey design: `K` disjoint regions of grid cells, `T`
/// visits, and per-visit detection covariates.
#[derive(Debug, Clone)]
pub struct SurveyDesign {
    /// Cell indices per region.
    pub regions: Vec<Vec<usize>>,
    pub t_visits: usize,
    /// Detection covariates `z_ij`, indexed `[region][visit]`.
    pub zdet: Vec<Vec<Vec<f64>>>,
}

impl SurveyDesign {
    pub fn k_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn det_dim(&self) -> usize {
        self.zdet
            .first()
            .and_then(|r| r.first())
            .map_or(0, |z| z.len())
    }

    /// A design with no regions stands for "no SO data": the SO
    /// likelihood is identically zero and integrated fits reduce to
    /// PB-only fits.
    pub fn empty() -> SurveyDesign {
        SurveyDesign {
            regions: Vec::new(),
            t_visits: 0,
            zdet: Vec::new(),
        }
    }

    pub fn validate(&self, grid: &CovariateGrid) -> Result<()> {
        if self.regions.is_empty() {
            return if self.zdet.is_empty() {
                Ok(())
            } else {
                Err(SdmError::Validation(
                    "empty survey design cannot carry detection covariates".into(),
                ))
            };
        }
        if self.t_visits == 0 {
            return Err(SdmError::Validation("survey needs at least one visit".into()));
        }
        let mut seen = vec![false; grid.m()];
        for (i, region) in self.regions.iter().enumerate() {
            if region.is_empty() {
                return Err(SdmError::Validation(format!("region {i} is empty")));
            }
            for &c in region {
                if c >= grid.m() {
                    return Err(SdmError::Validation(format!(
                        "region {i} references cell {c} outside the grid"
                    )));
                }
                if seen[c] {
                    return Err(SdmError::Validation(format!(
                        "regions overlap at cell {c}"
                    )));
                }
                seen[c] = true;
            }
        }
        if self.zdet.len() != self.regions.len()
            || self.zdet.iter().any(|r| r.len() != self.t_visits)
        {
            return Err(SdmError::Dimension {
                expected: self.regions.len() * self.t_visits,
                got: self.zdet.iter().map(|r| r.len()).sum(),
                context: "detection covariate matrix".into(),
            });
        }
        let d = self.det_dim();
        if self.zdet.iter().flatten().any(|z| z.len() != d) {
            return Err(SdmError::Validation(
                "detection covariates have inconsistent dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Detection/non-detection matrix from a survey.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyData {
    /// `y[i][j] = 1` if the species was detected in region `i` on visit `j`.
    pub y: Vec<Vec<u8>>,
}

impl SurveyData {
    /// `S_i = 1` for all-zero rows.
    pub fn s_flags(&self) -> Vec<bool> {
        self.y.iter().map(|row| row.iter().all(|&v| v == 0)).collect()
    }

    pub fn validate(&self, design: &SurveyDesign) -> Result<()> {
        if self.y.len() != design.k_regions()
            || self.y.iter().any(|r| r.len() != design.t_visits)
        {
            return Err(SdmError::Dimension {
                expected: design.k_regions() * design.t_visits,
                got: self.y.iter().map(|r| r.len()).sum(),
                context: "survey detection matrix".into(),
            });
        }
        if self.y.iter().flatten().any(|&v| v > 1) {
            return Err(SdmError::Validation("survey entries must be 0/1".into()));
        }
        Ok(())
    }
}

/// Distance-sampling data over a grid `B`: per-cell perpendicular
/// distances and half-normal scale covariates, plus the cells of the
/// detected points.
#[derive(Debug, Clone)]
pub struct DsData {
    /// Cell index of each detected point.
    pub point_cells: Vec<usize>,
    /// Distance from cell midpoint to the transect line, per cell.
    pub distances: Vec<f64>,
    /// Scale covariates per cell (the scale model always has an
    /// intercept, so empty vectors give a constant scale).
    pub scale_features: Vec<Vec<f64>>,
}

impl DsData {
    pub fn validate(&self, grid: &CovariateGrid) -> Result<()> {
        if self.distances.len() != grid.m() || self.scale_features.len() != grid.m() {
            return Err(SdmError::Dimension {
                expected: grid.m(),
                got: self.distances.len(),
                context: "distance-sampling per-cell columns".into(),
            });
        }
        if self.distances.iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return Err(SdmError::Validation(
                "distances must be finite and nonnegative".into(),
            ));
        }
        if self.point_cells.iter().any(|&c| c >= grid.m()) {
            return Err(SdmError::Validation("detected point outside grid".into()));
        }
        Ok(())
    }

    /// Half-normal detection probability of a cell:
    /// `exp(-d^2 / (2 sigma^2))` with `sigma = exp(omega' (1, u))`.
    pub fn detection_prob(&self, cell: usize, omega: &[f64]) -> f64 {
        let log_sigma = omega[0] + dot(&omega[1..], &self.scale_features[cell]);
        let d = self.distances[cell];
        (-0.5 * (d / log_sigma.exp()).powi(2)).exp()
    }
}

// ---------------------------------------------------------------------
// Likelihoods.

/// PB log-likelihood with gradient over `(beta, alpha)`.
///
/// `sum_cells count log(p lambda0) - sum_cells w p lambda0`.
pub fn loglik_pb(pb: &PbModel, grid: &CovariateGrid) -> Result<(f64, DVector<f64>)> {
    let p_beta = pb.beta_shared.len();
    let p_alpha = pb.alpha_detect.len();
    if p_beta != grid.p() + 1 {
        return Err(SdmError::Dimension {
            expected: grid.p() + 1,
            got: p_beta,
            context: "beta_shared".into(),
        });
    }
    let expected_alpha = grid.r() + usize::from(pb.alpha_intercept);
    if p_alpha != expected_alpha {
        return Err(SdmError::Dimension {
            expected: expected_alpha,
            got: p_alpha,
            context: "alpha_detect".into(),
        });
    }
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p_beta + p_alpha);
    for c in &grid.cells {
        let log_lam0 = pb.log_intensity(&c.x);
        if log_lam0 > crate::model::ETA_MAX {
            return Err(SdmError::Overflow {
                cell: c.id,
                eta: log_lam0,
            });
        }
        let p = pb.detection_prob(&c.v);
        let lam = p * log_lam0.exp();
        let count = c.presence_count as f64;
        if count > 0.0 {
            ll += count * (p.ln() + log_lam0);
        }
        ll -= c.w * lam;
        let resid = count - c.w * lam;
        grad[0] += resid;
        for (j, &x) in c.x.iter().enumerate() {
            grad[1 + j] += resid * x;
        }
        let fa = resid * (1.0 - p);
        let mut k = p_beta;
        if pb.alpha_intercept {
            grad[k] += fa;
            k += 1;
        }
        for (j, &v) in c.v.iter().enumerate() {
            grad[k + j] += fa * v;
        }
    }
    if !ll.is_finite() {
        return Err(SdmError::Validation(
            "PB log-likelihood is not finite (detection probability underflow at a presence)"
                .into(),
        ));
    }
    Ok((ll, grad))
}

/// Probability that a region holds at least one individual:
/// `1 - exp(-integral of lambda0 over the region)` by cell quadrature.
pub fn occupancy_prob(beta_shared: &[f64], grid: &CovariateGrid, region: &[usize]) -> Result<f64> {
    if region.is_empty() {
        return Err(SdmError::Validation("occupancy region is empty".into()));
    }
    let mut r = 0.0;
    for &ci in region {
        let c = grid
            .cells
            .get(ci)
            .ok_or_else(|| SdmError::Validation(format!("cell {ci} outside the grid")))?;
        let eta = beta_shared[0] + dot(&beta_shared[1..], &c.x);
        if eta > crate::model::ETA_MAX {
            return Err(SdmError::Overflow { cell: c.id, eta });
        }
        r += c.w * eta.exp();
    }
    Ok(-(-r).exp_m1())
}

/// SO log-likelihood with gradient over `(beta, tau)`.
///
/// Detected rows contribute `log Psi_i + sum_j log p(y_ij)`; all-zero rows
/// contribute the mixture `log(Psi_i prod_j (1 - q_ij) + 1 - Psi_i)`,
/// evaluated in log space.
pub fn loglik_so(
    beta_shared: &[f64],
    tau_detect: &[f64],
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
) -> Result<(f64, DVector<f64>)> {
    design.validate(grid)?;
    data.validate(design)?;
    if tau_detect.len() != design.det_dim() {
        return Err(SdmError::Dimension {
            expected: design.det_dim(),
            got: tau_detect.len(),
            context: "tau_detect".into(),
        });
    }
    let p_beta = beta_shared.len();
    let p_tau = tau_detect.len();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p_beta + p_tau);

    for (i, region) in design.regions.iter().enumerate() {
        // region integral and its beta-gradient
        let mut r = 0.0;
        let mut r_grad = vec![0.0; p_beta];
        for &ci in region {
            let c = &grid.cells[ci];
            let eta = beta_shared[0] + dot(&beta_shared[1..], &c.x);
            if eta > crate::model::ETA_MAX {
                return Err(SdmError::Overflow { cell: c.id, eta });
            }
            let wl = c.w * eta.exp();
            r += wl;
            r_grad[0] += wl;
            for (j, &x) in c.x.iter().enumerate() {
                r_grad[1 + j] += wl * x;
            }
        }
        let psi = -(-r).exp_m1();
        let dpsi = (-r).exp(); // d psi / d r
        let row = &data.y[i];
        let detected = row.iter().any(|&v| v == 1);

        if detected {
            if psi <= 0.0 {
                return Err(SdmError::Validation(format!(
                    "region {i} has a detection but zero occupancy probability"
                )));
            }
            ll += psi.ln();
            let f = dpsi / psi;
            for (g, &rg) in grad.iter_mut().take(p_beta).zip(&r_grad) {
                *g += f * rg;
            }
            for (j, &y) in row.iter().enumerate() {
                let z = &design.zdet[i][j];
                let u = dot(tau_detect, z);
                let q = sigmoid(u);
                ll += f64::from(y) * u - log1pexp(u);
                for (k, &zk) in z.iter().enumerate() {
                    grad[p_beta + k] += (f64::from(y) - q) * zk;
                }
            }
        } else {
            // log T = logsumexp(log psi + log Q, -r), with log(1-psi) = -r
            let mut log_q = 0.0;
            let mut q_grad_tau = vec![0.0; p_tau];
            for j in 0..design.t_visits {
                let z = &design.zdet[i][j];
                let u = dot(tau_detect, z);
                let q = sigmoid(u);
                log_q -= log1pexp(u);
                for (k, &zk) in z.iter().enumerate() {
                    q_grad_tau[k] -= q * zk;
                }
            }
            let log_psi_q = if psi > 0.0 {
                psi.ln() + log_q
            } else {
                f64::NEG_INFINITY
            };
            let a = log_psi_q.max(-r);
            let log_t = a + ((log_psi_q - a).exp() + (-r - a).exp()).ln();
            ll += log_t;
            let t = log_t.exp();
            let q_prod = log_q.exp();
            // dT/dr = (q_prod - 1) dpsi ; dT/dtau = psi q_prod q_grad_tau
            let fb = (q_prod - 1.0) * dpsi / t;
            for (g, &rg) in grad.iter_mut().take(p_beta).zip(&r_grad) {
                *g += fb * rg;
            }
            let ft = psi * q_prod / t;
            for (k, &qg) in q_grad_tau.iter().enumerate() {
                grad[p_beta + k] += ft * qg;
            }
        }
    }
    if !ll.is_finite() {
        return Err(SdmError::Validation(
            "SO log-likelihood is not finite".into(),
        ));
    }
    Ok((ll, grad))
}

/// DS log-likelihood with gradient over `(beta, omega)`.
pub fn loglik_ds(
    beta_shared: &[f64],
    omega: &[f64],
    ds: &DsData,
    grid_b: &CovariateGrid,
) -> Result<(f64, DVector<f64>)> {
    ds.validate(grid_b)?;
    let p_beta = beta_shared.len();
    let p_omega = omega.len();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p_beta + p_omega);

    let mut counts = vec![0u64; grid_b.m()];
    for &cell in &ds.point_cells {
        counts[cell] += 1;
    }
    for (ci, c) in grid_b.cells.iter().enumerate() {
        let eta = beta_shared[0] + dot(&beta_shared[1..], &c.x);
        if eta > crate::model::ETA_MAX {
            return Err(SdmError::Overflow { cell: c.id, eta });
        }
        let log_sigma = omega[0] + dot(&omega[1..], &ds.scale_features[ci]);
        let d2s2 = (ds.distances[ci] / log_sigma.exp()).powi(2);
        let log_pi = -0.5 * d2s2;
        let lam = (eta + log_pi).exp();
        let count = counts[ci] as f64;
        if count > 0.0 {
            ll += count * (log_pi + eta);
        }
        ll -= c.w * lam;
        let resid = count - c.w * lam;
        grad[0] += resid;
        for (j, &x) in c.x.iter().enumerate() {
            grad[1 + j] += resid * x;
        }
        // d log pi / d omega = d^2 / sigma^2 * (1, u)
        let fo = resid * d2s2;
        grad[p_beta] += fo;
        for (j, &u) in ds.scale_features[ci].iter().enumerate() {
            grad[p_beta + 1 + j] += fo * u;
        }
    }
    if !ll.is_finite() {
        return Err(SdmError::Validation(
            "DS log-likelihood is not finite".into(),
        ));
    }
    Ok((ll, grad))
}

// ---------------------------------------------------------------------
// Joint fitting.

/// How the Fisher information blocks of an [`IntegratedFit`] are formed.
#[derive(Debug, Clone, Copy)]
pub enum FisherSpec {
    /// Negative Hessian of each component at the estimate, single dataset.
    Observed,
    /// Monte-Carlo average of negative Hessians over datasets simulated at
    /// the estimate.
    MonteCarlo { reps: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct IntegratedOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Give the PB detection model its own intercept (confounded with the
    /// intensity intercept in PB-only fits; a warning is recorded).
    pub alpha_intercept: bool,
    pub fisher: FisherSpec,
}

impl Default for IntegratedOptions {
    fn default() -> Self {
        IntegratedOptions {
            tol: 1e-8,
            max_iter: 200,
            alpha_intercept: false,
            fisher: FisherSpec::MonteCarlo {
                reps: 100,
                seed: 0x5eed,
            },
        }
    }
}

impl IntegratedOptions {
    fn optim(&self) -> OptimOptions {
        OptimOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ridge_jitter: 1e-8,
        }
    }
}

/// One component fit (PB-only or SO-only) run by the same engine.
#[derive(Debug, Clone)]
pub struct ComponentFit {
    pub params: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub score_norm: f64,
    pub covariance: DMatrix<f64>,
}

/// Joint and component estimates with Fisher blocks for the shared
/// coefficients.
#[derive(Debug, Clone)]
pub struct IntegratedFit {
    pub beta_shared: Vec<f64>,
    pub alpha_detect: Vec<f64>,
    pub tau_detect: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub score_norm: f64,
    pub iterations: usize,
    /// Sandwich covariance of the full `(beta, alpha, tau)` vector.
    pub covariance: DMatrix<f64>,
    pub pb_only: ComponentFit,
    pub so_only: ComponentFit,
    /// Fisher information blocks for `beta`.
    pub fisher_pb: DMatrix<f64>,
    pub fisher_so: DMatrix<f64>,
    pub fisher_integrated: DMatrix<f64>,
    pub warnings: Vec<String>,
}

/// Which likelihood terms an [`IntegratedProblem`] evaluation includes.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Part {
    PbOnly,
    SoOnly,
    Both,
}

/// Parameter layout `[beta | alpha | tau]` over the joint problem.
pub(crate) struct IntegratedProblem<'a> {
    grid: &'a CovariateGrid,
    design: &'a SurveyDesign,
    data: &'a SurveyData,
    alpha_intercept: bool,
    part: Part,
}

impl IntegratedProblem<'_> {
    fn p_beta(&self) -> usize {
        self.grid.p() + 1
    }

    fn p_alpha(&self) -> usize {
        match self.part {
            Part::SoOnly => 0,
            _ => self.grid.r() + usize::from(self.alpha_intercept),
        }
    }

    fn p_tau(&self) -> usize {
        match self.part {
            Part::PbOnly => 0,
            _ => self.design.det_dim(),
        }
    }

    fn total_dim(&self) -> usize {
        self.p_beta() + self.p_alpha() + self.p_tau()
    }

    fn pb_model(&self, th: &[f64]) -> PbModel {
        PbModel {
            beta_shared: th[..self.p_beta()].to_vec(),
            alpha_detect: th[self.p_beta()..self.p_beta() + self.p_alpha()].to_vec(),
            alpha_intercept: self.alpha_intercept,
        }
    }

    /// Log-likelihood and gradient in the joint layout.
    fn eval(&self, th: &[f64]) -> Result<(f64, DVector<f64>)> {
        let pb_dim = self.p_beta() + self.p_alpha();
        let mut ll = 0.0;
        let mut grad = DVector::zeros(self.total_dim());
        if self.part != Part::SoOnly {
            let (l, g) = loglik_pb(&self.pb_model(th), self.grid)?;
            ll += l;
            for i in 0..pb_dim {
                grad[i] += g[i];
            }
        }
        if self.part != Part::PbOnly {
            let beta = &th[..self.p_beta()];
            let tau = &th[self.p_beta() + self.p_alpha()..];
            let (l, g) = loglik_so(beta, tau, self.grid, self.design, self.data)?;
            ll += l;
            for i in 0..self.p_beta() {
                grad[i] += g[i];
            }
            for k in 0..self.p_tau() {
                grad[self.p_beta() + self.p_alpha() + k] += g[self.p_beta() + k];
            }
        }
        Ok((ll, grad))
    }
}

impl Objective for IntegratedProblem<'_> {
    fn dim(&self) -> usize {
        self.total_dim()
    }

    fn value(&self, th: &[f64]) -> Option<f64> {
        self.eval(th).ok().map(|(l, _)| -l)
    }

    fn gradient(&self, th: &[f64]) -> Option<DVector<f64>> {
        self.eval(th).ok().map(|(_, g)| -g)
    }
}

/// Per-cell PB score contributions and the SO score, used by the robust
/// estimating equation.
struct RobustIntegrated<'a> {
    problem: IntegratedProblem<'a>,
    cdf: CdfFamily,
    ucdf_tau: f64,
}

impl EstimatingFunction for RobustIntegrated<'_> {
    fn dim(&self) -> usize {
        self.problem.total_dim()
    }

    fn eval(&self, th: &[f64]) -> Option<DVector<f64>> {
        let p = &self.problem;
        let pb = p.pb_model(th);
        let p_beta = p.p_beta();
        let p_alpha = p.p_alpha();
        let mut e = DVector::zeros(p.total_dim());
        for c in &p.grid.cells {
            let log_lam0 = pb.log_intensity(&c.x);
            if log_lam0 > crate::model::ETA_MAX {
                return None;
            }
            let pd = pb.detection_prob(&c.v);
            let lam = pd * log_lam0.exp();
            let f = self.cdf.eval(self.ucdf_tau * lam);
            let resid = c.presence_count as f64 - c.w * lam;
            let fr = f * resid;
            e[0] += fr;
            for (j, &x) in c.x.iter().enumerate() {
                e[1 + j] += fr * x;
            }
            let fa = fr * (1.0 - pd);
            let mut k = p_beta;
            if p.alpha_intercept {
                e[k] += fa;
                k += 1;
            }
            for (j, &v) in c.v.iter().enumerate() {
                e[k + j] += fa * v;
            }
        }
        let beta = &th[..p_beta];
        let tau = &th[p_beta + p_alpha..];
        let (_, g) = loglik_so(beta, tau, p.grid, p.design, p.data).ok()?;
        for i in 0..p_beta {
            e[i] += g[i];
        }
        for k in 0..p.p_tau() {
            e[p_beta + p_alpha + k] += g[p_beta + k];
        }
        Some(e)
    }
}

/// Numerical negative Hessian of a component log-likelihood restricted to
/// the `beta` block, at fixed nuisance values.
fn beta_block_neg_hessian<F>(p_beta: usize, beta: &[f64], loglik_grad: F) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<DVector<f64>>,
{
    let jac = fd_jacobian_of(p_beta, beta, |b| loglik_grad(b))?;
    Some(-0.5 * (&jac + jac.transpose()))
}

fn pb_counts_score_variance(
    pb: &PbModel,
    grid: &CovariateGrid,
    dim: usize,
) -> DMatrix<f64> {
    // point-sum estimate of the PB score variance (Campbell)
    let p_beta = pb.beta_shared.len();
    let mut k = DMatrix::zeros(dim, dim);
    for c in &grid.cells {
        if c.presence_count == 0 {
            continue;
        }
        let pd = pb.detection_prob(&c.v);
        let mut h = vec![0.0; dim];
        h[0] = 1.0;
        for (j, &x) in c.x.iter().enumerate() {
            h[1 + j] = x;
        }
        let mut kk = p_beta;
        if pb.alpha_intercept {
            h[kk] = 1.0 - pd;
            kk += 1;
        }
        for (j, &v) in c.v.iter().enumerate() {
            h[kk + j] = (1.0 - pd) * v;
        }
        let count = c.presence_count as f64;
        for a in 0..dim {
            for b in 0..dim {
                k[(a, b)] += count * h[a] * h[b];
            }
        }
    }
    k
}

fn so_region_score_variance(
    beta: &[f64],
    tau: &[f64],
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
    dim: usize,
    beta_at: usize,
    tau_at: usize,
) -> Result<DMatrix<f64>> {
    // regions are independent, so realized per-region outer products
    let p_beta = beta.len();
    let mut k = DMatrix::zeros(dim, dim);
    for i in 0..design.k_regions() {
        let sub_design = SurveyDesign {
            regions: vec![design.regions[i].clone()],
            t_visits: design.t_visits,
            zdet: vec![design.zdet[i].clone()],
        };
        let sub_data = SurveyData {
            y: vec![data.y[i].clone()],
        };
        let (_, g) = loglik_so(beta, tau, grid, &sub_design, &sub_data)?;
        let mut psi = vec![0.0; dim];
        for j in 0..p_beta {
            psi[beta_at + j] = g[j];
        }
        for j in 0..tau.len() {
            psi[tau_at + j] = g[p_beta + j];
        }
        for a in 0..dim {
            for b in 0..dim {
                k[(a, b)] += psi[a] * psi[b];
            }
        }
    }
    Ok(k)
}

fn sandwich_from_parts(
    score: impl Fn(&[f64]) -> Option<DVector<f64>>,
    th: &[f64],
    kmat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dim = th.len();
    let jac = fd_jacobian_of(dim, th, |y| score(y)).ok_or_else(|| SdmError::Singular {
        context: "integrated score Jacobian".into(),
    })?;
    let j = -jac;
    let j_inv = j.lu().try_inverse().ok_or_else(|| SdmError::Singular {
        context: "integrated sandwich J".into(),
    })?;
    Ok(crate::fit::psd_project(&(&j_inv * kmat * j_inv.transpose())))
}

/// PB-only maximum likelihood over `(beta, alpha)`.
pub fn fit_pb(grid: &CovariateGrid, opts: &IntegratedOptions) -> Result<ComponentFit> {
    grid.validate()?;
    let design = SurveyDesign::empty();
    let data = SurveyData { y: vec![] };
    let prob = IntegratedProblem {
        grid,
        design: &design,
        data: &data,
        alpha_intercept: opts.alpha_intercept,
        part: Part::PbOnly,
    };
    let out = minimize(&prob, &vec![0.0; prob.total_dim()], &opts.optim());
    let p_beta = grid.p() + 1;
    let k_pb = pb_counts_score_variance(
        &PbModel {
            beta_shared: out.x[..p_beta].to_vec(),
            alpha_detect: out.x[p_beta..].to_vec(),
            alpha_intercept: opts.alpha_intercept,
        },
        grid,
        prob.total_dim(),
    );
    let score = |y: &[f64]| prob.eval(y).ok().map(|(_, g)| g);
    let covariance = sandwich_from_parts(score, &out.x, &k_pb)
        .unwrap_or_else(|_| DMatrix::zeros(prob.total_dim(), prob.total_dim()));
    Ok(ComponentFit {
        params: out.x,
        loglik: -out.value,
        converged: out.converged,
        score_norm: out.score_norm,
        covariance,
    })
}

/// SO-only maximum likelihood over `(beta, tau)`.
pub fn fit_so(
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
    opts: &IntegratedOptions,
) -> Result<ComponentFit> {
    grid.validate()?;
    design.validate(grid)?;
    data.validate(design)?;
    let prob = IntegratedProblem {
        grid,
        design,
        data,
        alpha_intercept: opts.alpha_intercept,
        part: Part::SoOnly,
    };
    let out = minimize(&prob, &vec![0.0; prob.total_dim()], &opts.optim());
    let p_beta = grid.p() + 1;
    let k_so = so_region_score_variance(
        &out.x[..p_beta],
        &out.x[p_beta..],
        grid,
        design,
        data,
        prob.total_dim(),
        0,
        p_beta,
    )?;
    let score = |y: &[f64]| prob.eval(y).ok().map(|(_, g)| g);
    let covariance = sandwich_from_parts(score, &out.x, &k_so)
        .unwrap_or_else(|_| DMatrix::zeros(prob.total_dim(), prob.total_dim()));
    Ok(ComponentFit {
        params: out.x,
        loglik: -out.value,
        converged: out.converged,
        score_norm: out.score_norm,
        covariance,
    })
}

/// Distance-sampling maximum likelihood over `(beta, omega)`.
pub fn fit_ds(grid_b: &CovariateGrid, ds: &DsData, opts: &IntegratedOptions) -> Result<ComponentFit> {
    grid_b.validate()?;
    ds.validate(grid_b)?;
    let p_beta = grid_b.p() + 1;
    let p_omega = 1 + ds.scale_features.first().map_or(0, |u| u.len());
    struct DsObjective<'a> {
        grid: &'a CovariateGrid,
        ds: &'a DsData,
        p_beta: usize,
        dim: usize,
    }
    impl Objective for DsObjective<'_> {
        fn dim(&self) -> usize {
            self.dim
        }
        fn value(&self, th: &[f64]) -> Option<f64> {
            loglik_ds(&th[..self.p_beta], &th[self.p_beta..], self.ds, self.grid)
                .ok()
                .map(|(l, _)| -l)
        }
        fn gradient(&self, th: &[f64]) -> Option<DVector<f64>> {
            loglik_ds(&th[..self.p_beta], &th[self.p_beta..], self.ds, self.grid)
                .ok()
                .map(|(_, g)| -g)
        }
    }
    let obj = DsObjective {
        grid: grid_b,
        ds,
        p_beta,
        dim: p_beta + p_omega,
    };
    let out = minimize(&obj, &vec![0.0; obj.dim], &opts.optim());

    // point-sum score variance for the sandwich
    let dim = p_beta + p_omega;
    let mut kmat = DMatrix::zeros(dim, dim);
    for &cell in &ds.point_cells {
        let c = &grid_b.cells[cell];
        let log_sigma = out.x[p_beta] + dot(&out.x[p_beta + 1..], &ds.scale_features[cell]);
        let d2s2 = (ds.distances[cell] / log_sigma.exp()).powi(2);
        let mut h = vec![0.0; dim];
        h[0] = 1.0;
        for (j, &x) in c.x.iter().enumerate() {
            h[1 + j] = x;
        }
        h[p_beta] = d2s2;
        for (j, &u) in ds.scale_features[cell].iter().enumerate() {
            h[p_beta + 1 + j] = d2s2 * u;
        }
        for a in 0..dim {
            for b in 0..dim {
                kmat[(a, b)] += h[a] * h[b];
            }
        }
    }
    let score = |y: &[f64]| {
        loglik_ds(&y[..p_beta], &y[p_beta..], ds, grid_b)
            .ok()
            .map(|(_, g)| g)
    };
    let covariance = sandwich_from_parts(score, &out.x, &kmat)
        .unwrap_or_else(|_| DMatrix::zeros(dim, dim));
    Ok(ComponentFit {
        params: out.x,
        loglik: -out.value,
        converged: out.converged,
        score_norm: out.score_norm,
        covariance,
    })
}

/// Maximize the integrated likelihood `l_PB(beta, alpha) + l_SO(beta,
/// tau)` jointly, alongside the two component-only fits.
pub fn fit_integrated(
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
    opts: &IntegratedOptions,
) -> Result<IntegratedFit> {
    grid.validate()?;
    design.validate(grid)?;
    data.validate(design)?;

    let mut warnings = Vec::new();
    if opts.alpha_intercept {
        warnings.push(
            "detection intercept is confounded with the intensity intercept in PB-only fits"
                .into(),
        );
    }

    let fit_part = |part: Part| -> Result<(Vec<f64>, f64, bool, f64, usize)> {
        let prob = IntegratedProblem {
            grid,
            design,
            data,
            alpha_intercept: opts.alpha_intercept,
            part,
        };
        let x0 = vec![0.0; prob.total_dim()];
        let out = minimize(&prob, &x0, &opts.optim());
        Ok((out.x, -out.value, out.converged, out.score_norm, out.iterations))
    };

    let (th_pb, ll_pb, conv_pb, sn_pb, _) = fit_part(Part::PbOnly)?;
    let (th_so, ll_so, conv_so, sn_so, _) = fit_part(Part::SoOnly)?;
    let (th, ll, converged, score_norm, iterations) = fit_part(Part::Both)?;

    assemble_integrated(
        grid, design, data, opts, th, ll, converged, score_norm, iterations, th_pb, ll_pb,
        conv_pb, sn_pb, th_so, ll_so, conv_so, sn_so, warnings,
    )
}

/// Robust integrated fit: PB score contributions weighted by
/// `F(ucdf_tau * p lambda0)`, SO score unweighted. The Step cdf
/// reproduces [`fit_integrated`].
pub fn fit_integrated_robust(
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
    cdf: CdfFamily,
    ucdf_tau: f64,
    opts: &IntegratedOptions,
) -> Result<IntegratedFit> {
    if ucdf_tau <= 0.0 {
        return Err(SdmError::Validation(format!(
            "ucdf_tau must be positive, got {ucdf_tau}"
        )));
    }
    let plain = fit_integrated(grid, design, data, opts)?;
    let mut th: Vec<f64> = plain
        .beta_shared
        .iter()
        .chain(&plain.alpha_detect)
        .chain(&plain.tau_detect)
        .copied()
        .collect();
    let problem = IntegratedProblem {
        grid,
        design,
        data,
        alpha_intercept: opts.alpha_intercept,
        part: Part::Both,
    };
    let robust = RobustIntegrated {
        problem,
        cdf,
        ucdf_tau,
    };
    let out = solve_root(&robust, &th, &opts.optim());
    th = out.x;
    let ll = IntegratedProblem {
        grid,
        design,
        data,
        alpha_intercept: opts.alpha_intercept,
        part: Part::Both,
    }
    .eval(&th)
    .map(|(l, _)| l)
    .unwrap_or(f64::NAN);

    assemble_integrated(
        grid,
        design,
        data,
        opts,
        th,
        ll,
        out.converged,
        out.score_norm,
        out.iterations,
        plain.pb_only.params.clone(),
        plain.pb_only.loglik,
        plain.pb_only.converged,
        plain.pb_only.score_norm,
        plain.so_only.params.clone(),
        plain.so_only.loglik,
        plain.so_only.converged,
        plain.so_only.score_norm,
        plain.warnings,
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble_integrated(
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
    opts: &IntegratedOptions,
    th: Vec<f64>,
    ll: f64,
    converged: bool,
    score_norm: f64,
    iterations: usize,
    th_pb: Vec<f64>,
    ll_pb: f64,
    conv_pb: bool,
    sn_pb: f64,
    th_so: Vec<f64>,
    ll_so: f64,
    conv_so: bool,
    sn_so: f64,
    warnings: Vec<String>,
) -> Result<IntegratedFit> {
    let p_beta = grid.p() + 1;
    let p_alpha = grid.r() + usize::from(opts.alpha_intercept);
    let p_tau = design.det_dim();
    let beta = th[..p_beta].to_vec();
    let alpha = th[p_beta..p_beta + p_alpha].to_vec();
    let tau = th[p_beta + p_alpha..].to_vec();

    // Sandwich covariances.
    let pb_of = |b: &[f64], a: &[f64]| PbModel {
        beta_shared: b.to_vec(),
        alpha_detect: a.to_vec(),
        alpha_intercept: opts.alpha_intercept,
    };

    let joint_dim = p_beta + p_alpha + p_tau;
    let joint_score = |y: &[f64]| {
        IntegratedProblem {
            grid,
            design,
            data,
            alpha_intercept: opts.alpha_intercept,
            part: Part::Both,
        }
        .eval(y)
        .ok()
        .map(|(_, g)| g)
    };
    let mut k_joint = pb_counts_score_variance(&pb_of(&beta, &alpha), grid, joint_dim);
    k_joint += so_region_score_variance(
        &beta, &tau, grid, design, data, joint_dim, 0, p_beta + p_alpha,
    )?;
    let covariance = match sandwich_from_parts(joint_score, &th, &k_joint) {
        Ok(c) => c,
        Err(_) if !converged => DMatrix::zeros(joint_dim, joint_dim),
        Err(e) => return Err(e),
    };

    let pb_dim = p_beta + p_alpha;
    let pb_score = |y: &[f64]| {
        loglik_pb(&pb_of(&y[..p_beta], &y[p_beta..]), grid)
            .ok()
            .map(|(_, g)| g)
    };
    let k_pb = pb_counts_score_variance(&pb_of(&th_pb[..p_beta], &th_pb[p_beta..]), grid, pb_dim);
    let cov_pb = sandwich_from_parts(pb_score, &th_pb, &k_pb)
        .unwrap_or_else(|_| DMatrix::zeros(pb_dim, pb_dim));

    let so_dim = p_beta + p_tau;
    let so_score = |y: &[f64]| {
        loglik_so(&y[..p_beta], &y[p_beta..], grid, design, data)
            .ok()
            .map(|(_, g)| g)
    };
    let k_so = so_region_score_variance(
        &th_so[..p_beta],
        &th_so[p_beta..],
        grid,
        design,
        data,
        so_dim,
        0,
        p_beta,
    )?;
    let cov_so = sandwich_from_parts(so_score, &th_so, &k_so)
        .unwrap_or_else(|_| DMatrix::zeros(so_dim, so_dim));

    // Fisher blocks for beta at the integrated estimate.
    let (fisher_pb, fisher_so, fisher_integrated) = match opts.fisher {
        FisherSpec::Observed => observed_fisher_blocks(
            grid,
            design,
            data,
            &beta,
            &alpha,
            &tau,
            opts.alpha_intercept,
        )?,
        FisherSpec::MonteCarlo { reps, seed } => crate::sim::mc_fisher_blocks(
            grid,
            design,
            &beta,
            &alpha,
            &tau,
            opts.alpha_intercept,
            reps,
            seed,
        )?,
    };

    Ok(IntegratedFit {
        beta_shared: beta,
        alpha_detect: alpha,
        tau_detect: tau,
        loglik: ll,
        converged,
        score_norm,
        iterations,
        covariance,
        pb_only: ComponentFit {
            params: th_pb,
            loglik: ll_pb,
            converged: conv_pb,
            score_norm: sn_pb,
            covariance: cov_pb,
        },
        so_only: ComponentFit {
            params: th_so,
            loglik: ll_so,
            converged: conv_so,
            score_norm: sn_so,
            covariance: cov_so,
        },
        fisher_pb,
        fisher_so,
        fisher_integrated,
        warnings,
    })
}

/// Single-dataset (observed) Fisher blocks for `beta`: negative numerical
/// Hessians of each component log-likelihood at the estimate.
pub fn observed_fisher_blocks(
    grid: &CovariateGrid,
    design: &SurveyDesign,
    data: &SurveyData,
    beta: &[f64],
    alpha: &[f64],
    tau: &[f64],
    alpha_intercept: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let p_beta = beta.len();
    let pb_grad = |b: &[f64]| {
        loglik_pb(
            &PbModel {
                beta_shared: b.to_vec(),
                alpha_detect: alpha.to_vec(),
                alpha_intercept,
            },
            grid,
        )
        .ok()
        .map(|(_, g)| DVector::from_iterator(p_beta, (0..p_beta).map(|i| g[i])))
    };
    let so_grad = |b: &[f64]| {
        loglik_so(b, tau, grid, design, data)
            .ok()
            .map(|(_, g)| DVector::from_iterator(p_beta, (0..p_beta).map(|i| g[i])))
    };
    let both_grad = |b: &[f64]| {
        let p = pb_grad(b)?;
        let s = so_grad(b)?;
        Some(p + s)
    };
    let i_pb = beta_block_neg_hessian(p_beta, beta, pb_grad).ok_or_else(|| SdmError::Singular {
        context: "PB Fisher block".into(),
    })?;
    let i_so = beta_block_neg_hessian(p_beta, beta, so_grad).ok_or_else(|| SdmError::Singular {
        context: "SO Fisher block".into(),
    })?;
    let i_both =
        beta_block_neg_hessian(p_beta, beta, both_grad).ok_or_else(|| SdmError::Singular {
            context: "integrated Fisher block".into(),
        })?;
    Ok((i_pb, i_so, i_both))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Cell, CovariateGrid, FeatureNames};

    /// Grid with habitat feature x1 and accessibility feature v1.
    pub(crate) fn pb_grid(m: usize, counts: &[u64]) -> CovariateGrid {
        let cells: Vec<Cell> = (0..m)
            .map(|i| {
                let t = i as f64 / (m as f64 - 1.0);
                Cell {
                    id: i as u64,
                    lon: None,
                    lat: None,
                    w: 1.0,
                    x: vec![2.0 * t - 1.0],
                    z: vec![],
                    v: vec![(i % 5) as f64 / 2.0 - 1.0],
                    presence_count: counts.get(i).copied().unwrap_or(0),
                }
            })
            .collect();
        CovariateGrid::new(cells, m as f64, FeatureNames::default()).unwrap()
    }

    fn simple_design(grid: &CovariateGrid, k: usize, t: usize) -> SurveyDesign {
        let per = grid.m() / k;
        let regions: Vec<Vec<usize>> = (0..k).map(|i| (i * per..(i + 1) * per).collect()).collect();
        let zdet = vec![vec![vec![1.0]; t]; k];
        SurveyDesign {
            regions,
            t_visits: t,
            zdet,
        }
    }

    #[test]
    fn pb_with_full_detection_reduces_to_ppp() {
        let counts: Vec<u64> = (0..40).map(|i| u64::from(i % 7 == 0)).collect();
        let grid = pb_grid(40, &counts);
        let pb = PbModel {
            beta_shared: vec![-0.4, 0.8],
            alpha_detect: vec![50.0, 0.0], // p = sigmoid(50) ~ 1
            alpha_intercept: true,
        };
        let (ll, _) = loglik_pb(&pb, &grid).unwrap();
        let model = crate::model::IntensityModel::LogLinear(crate::model::LogLinearParams::new(
            -0.4,
            vec![0.8],
        ));
        let ppp = -crate::fit::negloglik(&model, &grid).unwrap();
        assert!((ll - ppp).abs() < 1e-6, "{ll} vs {ppp}");
    }

    #[test]
    fn pb_constant_half_detection_halves_lambda() {
        let counts = vec![0u64; 30];
        let grid = pb_grid(30, &counts);
        let full = PbModel {
            beta_shared: vec![0.3, 0.5],
            alpha_detect: vec![50.0, 0.0],
            alpha_intercept: true,
        };
        let half = PbModel {
            beta_shared: vec![0.3, 0.5],
            alpha_detect: vec![0.0], // alpha'v = 0 -> p = 0.5
            alpha_intercept: false,
        };
        // with no presences the log-likelihood is -Lambda
        let (l_full, _) = loglik_pb(&full, &grid).unwrap();
        let (l_half, _) = loglik_pb(&half, &grid).unwrap();
        assert!((l_half - l_full / 2.0).abs() < 1e-6);
    }

    #[test]
    fn pb_gradient_matches_fd() {
        let counts: Vec<u64> = (0..50).map(|i| u64::from(i % 9 == 0)).collect();
        let grid = pb_grid(50, &counts);
        let th = [0.2, -0.6, 0.4];
        let eval = |t: &[f64]| {
            loglik_pb(
                &PbModel {
                    beta_shared: t[..2].to_vec(),
                    alpha_detect: t[2..].to_vec(),
                    alpha_intercept: false,
                },
                &grid,
            )
            .unwrap()
        };
        let (_, g) = eval(&th);
        for k in 0..3 {
            let h = 1e-6;
            let mut tp = th;
            tp[k] += h;
            let mut tm = th;
            tm[k] -= h;
            let fd = (eval(&tp).0 - eval(&tm).0) / (2.0 * h);
            assert!(
                (g[k] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "component {k}: {} vs {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn occupancy_closed_forms() {
        let grid = pb_grid(10, &[0; 10]);
        // choose beta0 so the 10-cell integral is ln 2: sum w e^{b0+b1 x}
        // with b1=0 -> 10 e^{b0} = ln 2
        let b0 = (2.0_f64.ln() / 10.0).ln();
        let region: Vec<usize> = (0..10).collect();
        let psi = occupancy_prob(&[b0, 0.0], &grid, &region).unwrap();
        assert!((psi - 0.5).abs() < 1e-12);

        let tiny = occupancy_prob(&[-50.0, 0.0], &grid, &region).unwrap();
        assert!(tiny < 1e-15);

        assert!(occupancy_prob(&[0.0, 0.0], &grid, &[]).is_err());
    }

    #[test]
    fn occupancy_multiplies_over_disjoint_halves() {
        let grid = pb_grid(20, &[0; 20]);
        let beta = [-1.2, 0.7];
        let all: Vec<usize> = (0..20).collect();
        let left: Vec<usize> = (0..10).collect();
        let right: Vec<usize> = (10..20).collect();
        let p_all = occupancy_prob(&beta, &grid, &all).unwrap();
        let p_l = occupancy_prob(&beta, &grid, &left).unwrap();
        let p_r = occupancy_prob(&beta, &grid, &right).unwrap();
        assert!(((1.0 - p_all) - (1.0 - p_l) * (1.0 - p_r)).abs() < 1e-12);
    }

    #[test]
    fn so_single_cell_single_visit_enumeration() {
        // K=1, T=1, y=0: likelihood = Psi (1-q) + 1 - Psi
        let grid = pb_grid(4, &[0; 4]);
        let design = SurveyDesign {
            regions: vec![vec![0, 1]],
            t_visits: 1,
            zdet: vec![vec![vec![1.0]]],
        };
        let data = SurveyData { y: vec![vec![0]] };
        let beta = [-0.3, 0.4];
        let tau = [0.7];
        let (ll, _) = loglik_so(&beta, &tau, &grid, &design, &data).unwrap();
        let psi = occupancy_prob(&beta, &grid, &[0, 1]).unwrap();
        let q = 1.0 / (1.0 + (-0.7_f64).exp());
        let direct = (psi * (1.0 - q) + 1.0 - psi).ln();
        assert!((ll - direct).abs() < 1e-12);
    }

    #[test]
    fn so_detection_probability_half_at_zero_predictor() {
        let grid = pb_grid(4, &[0; 4]);
        let design = SurveyDesign {
            regions: vec![vec![0, 1, 2, 3]],
            t_visits: 1,
            zdet: vec![vec![vec![1.0]]],
        };
        let data = SurveyData { y: vec![vec![1]] };
        let beta = [0.5, 0.0];
        let (ll, _) = loglik_so(&beta, &[0.0], &grid, &design, &data).unwrap();
        let psi = occupancy_prob(&beta, &grid, &[0, 1, 2, 3]).unwrap();
        assert!((ll - (psi.ln() + 0.5_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn so_unoccupied_certainty_contributes_zero() {
        let grid = pb_grid(4, &[0; 4]);
        let design = SurveyDesign {
            regions: vec![vec![0, 1]],
            t_visits: 3,
            zdet: vec![vec![vec![1.0]; 3]],
        };
        let data = SurveyData { y: vec![vec![0, 0, 0]] };
        // beta0 = -50: Psi ~ 0, row all-zero -> log 1 = 0
        let (ll, _) = loglik_so(&[-50.0, 0.0], &[0.3], &grid, &design, &data).unwrap();
        assert!(ll.abs() < 1e-12);
    }

    #[test]
    fn so_gradient_matches_fd() {
        let counts = vec![0u64; 30];
        let grid = pb_grid(30, &counts);
        let design = simple_design(&grid, 5, 3);
        let data = SurveyData {
            y: vec![
                vec![1, 0, 1],
                vec![0, 0, 0],
                vec![0, 1, 0],
                vec![0, 0, 0],
                vec![1, 1, 1],
            ],
        };
        let th = [0.1, -0.5, 0.3];
        let eval = |t: &[f64]| loglik_so(&t[..2], &t[2..], &grid, &design, &data).unwrap();
        let (_, g) = eval(&th);
        for k in 0..3 {
            let h = 1e-6;
            let mut tp = th;
            tp[k] += h;
            let mut tm = th;
            tm[k] -= h;
            let fd = (eval(&tp).0 - eval(&tm).0) / (2.0 * h);
            assert!(
                (g[k] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "component {k}: {} vs {fd}",
                g[k]
            );
        }
    }

    #[test]
    fn additivity_of_integrated_loglik() {
        let counts: Vec<u64> = (0..30).map(|i| u64::from(i % 6 == 0)).collect();
        let grid = pb_grid(30, &counts);
        let design = simple_design(&grid, 3, 2);
        let data = SurveyData {
            y: vec![vec![1, 0], vec![0, 0], vec![0, 1]],
        };
        let th = [0.2, -0.4, 0.3, -0.1];
        let problem = IntegratedProblem {
            grid: &grid,
            design: &design,
            data: &data,
            alpha_intercept: false,
            part: Part::Both,
        };
        let (ll, _) = problem.eval(&th).unwrap();
        let (l_pb, _) = loglik_pb(
            &PbModel {
                beta_shared: th[..2].to_vec(),
                alpha_detect: th[2..3].to_vec(),
                alpha_intercept: false,
            },
            &grid,
        )
        .unwrap();
        let (l_so, _) = loglik_so(&th[..2], &th[3..], &grid, &design, &data).unwrap();
        assert!((ll - (l_pb + l_so)).abs() < 1e-12);
    }

    #[test]
    fn empty_so_makes_integrated_equal_pb() {
        let counts: Vec<u64> = (0..60).map(|i| u64::from(i % 7 == 0)).collect();
        let grid = pb_grid(60, &counts);
        let design = SurveyDesign::empty();
        let data = SurveyData { y: vec![] };
        let opts = IntegratedOptions {
            fisher: FisherSpec::Observed,
            ..IntegratedOptions::default()
        };
        let fit = fit_integrated(&grid, &design, &data, &opts).unwrap();
        assert!(fit.converged);
        let joint: Vec<f64> = fit
            .beta_shared
            .iter()
            .chain(&fit.alpha_detect)
            .copied()
            .collect();
        for (a, b) in joint.iter().zip(&fit.pb_only.params) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn ds_zero_distance_reduces_to_ppp() {
        let counts: Vec<u64> = (0..25).map(|i| u64::from(i % 5 == 0)).collect();
        let grid = pb_grid(25, &counts);
        let ds = DsData {
            point_cells: (0..25).filter(|i| i % 5 == 0).collect(),
            distances: vec![0.0; 25],
            scale_features: vec![vec![]; 25],
        };
        let beta = [0.1, 0.6];
        let (ll, _) = loglik_ds(&beta, &[0.4], &ds, &grid).unwrap();
        let model = crate::model::IntensityModel::LogLinear(crate::model::LogLinearParams::new(
            0.1,
            vec![0.6],
        ));
        let ppp = -crate::fit::negloglik(&model, &grid).unwrap();
        assert!((ll - ppp).abs() < 1e-10);
    }

    #[test]
    fn ds_detection_at_distance_sigma() {
        let ds = DsData {
            point_cells: vec![],
            distances: vec![1.0; 4],
            scale_features: vec![vec![]; 4],
        };
        // omega0 = 0 -> sigma = 1 -> pi = exp(-1/2)
        let pi = ds.detection_prob(0, &[0.0]);
        assert!((pi - (-0.5_f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn ds_gradient_matches_fd() {
        let counts: Vec<u64> = (0..30).map(|i| u64::from(i % 8 == 0)).collect();
        let grid = pb_grid(30, &counts);
        let ds = DsData {
            point_cells: (0..30).filter(|i| i % 8 == 0).collect(),
            distances: (0..30).map(|i| 0.2 + 0.05 * i as f64).collect(),
            scale_features: (0..30).map(|i| vec![(i % 3) as f64 * 0.5]).collect(),
        };
        let th = [0.2, -0.3, 0.1, 0.25];
        let eval = |t: &[f64]| loglik_ds(&t[..2], &t[2..], &ds, &grid).unwrap();
        let (_, g) = eval(&th);
        for k in 0..4 {
            let h = 1e-6;
            let mut tp = th;
            tp[k] += h;
            let mut tm = th;
            tm[k] -= h;
            let fd = (eval(&tp).0 - eval(&tm).0) / (2.0 * h);
            assert!(
                (g[k] - fd).abs() / fd.abs().max(1.0) < 1e-5,
                "component {k}: {} vs {fd}",
                g[k]
            );
        }
    }
}
