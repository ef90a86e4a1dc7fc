//! Damped Newton engine used by every fitter.
//!
//! Two entry points: [`minimize`] for objectives with a loss value
//! (Armijo backtracking on the loss) and [`solve_root`] for estimating
//! equations given only as a vector field (backtracking on the squared
//! residual). Infeasible iterates are signalled by returning `None` from
//! an evaluation; the line search then shrinks the step.

use nalgebra::{DMatrix, DVector};

pub const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const MAX_JITTER_ESCALATIONS: usize = 12;

#[derive(Debug, Clone, Copy)]
pub struct OptimOptions {
    /// Sup-norm tolerance on the gradient / estimating function.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial diagonal jitter added when the Hessian is not positive
    /// definite (escalated tenfold until factorization succeeds).
    pub ridge_jitter: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        OptimOptions {
            tol: 1e-8,
            max_iter: 200,
            ridge_jitter: 1e-8,
        }
    }
}

/// A smooth objective to minimize. `None` marks an infeasible point.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> Option<f64>;
    fn gradient(&self, x: &[f64]) -> Option<DVector<f64>>;
    /// Hessian; the default builds it by central differences of the gradient.
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        fd_jacobian_of(self.dim(), x, |y| self.gradient(y)).map(|h| symmetrize(&h))
    }
}

/// An estimating function whose root is sought.
pub trait EstimatingFunction {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Option<DVector<f64>>;
    fn jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        fd_jacobian_of(self.dim(), x, |y| self.eval(y))
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    /// Final objective value (`NaN` for pure root solves).
    pub value: f64,
    /// Sup-norm of the gradient or estimating function at `x`.
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Whether any Newton system needed a ridge jitter.
    pub ridged: bool,
}

fn symmetrize(h: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (h + h.transpose())
}

/// Central-difference Jacobian of a vector-valued map.
pub fn fd_jacobian_of<F>(dim: usize, x: &[f64], f: F) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<DVector<f64>>,
{
    let mut jac = DMatrix::zeros(dim, x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        for i in 0..dim {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Some(jac)
}

/// Central-difference gradient of a scalar map.
pub fn fd_gradient<F>(x: &[f64], f: F) -> Option<DVector<f64>>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let mut g = DVector::zeros(x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let h = 1e-6 * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = f(&xp)?;
        xp[j] = x[j] - h;
        let fm = f(&xp)?;
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    Some(g)
}

/// Solve `H d = -g`, escalating a diagonal jitter until the (symmetrized)
/// system factorizes. Returns the step and whether a jitter was needed.
fn newton_step(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    base_jitter: f64,
) -> Option<(DVector<f64>, bool)> {
    let hs = symmetrize(h);
    if let Some(chol) = hs.clone().cholesky() {
        return Some((chol.solve(&(-g)), false));
    }
    let scale = hs.diagonal().amax().max(1.0);
    let mut jitter = base_jitter * scale;
    for _ in 0..MAX_JITTER_ESCALATIONS {
        let mut hj = hs.clone();
        for i in 0..hj.nrows() {
            hj[(i, i)] += jitter;
        }
        if let Some(chol) = hj.cholesky() {
            return Some((chol.solve(&(-g)), true));
        }
        jitter *= 10.0;
    }
    None
}

/// Damped Newton minimization with Armijo backtracking.
pub fn minimize<O: Objective>(obj: &O, x0: &[f64], opts: &OptimOptions) -> OptimOutcome {
    let mut x = x0.to_vec();
    let mut ridged = false;
    let mut value = match obj.value(&x) {
        Some(v) => v,
        None => {
            return OptimOutcome {
                x,
                value: f64::NAN,
                score_norm: f64::INFINITY,
                iterations: 0,
                converged: false,
                ridged,
            }
        }
    };
    let mut iterations = 0;
    loop {
        let grad = match obj.gradient(&x) {
            Some(g) => g,
            None => break,
        };
        let score_norm = grad.amax();
        if score_norm <= opts.tol {
            return OptimOutcome {
                x,
                value,
                score_norm,
                iterations,
                converged: true,
                ridged,
            };
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let hess = match obj.hessian(&x) {
            Some(h) => h,
            None => break,
        };
        let (step, jittered) = match newton_step(&hess, &grad, opts.ridge_jitter) {
            Some(s) => s,
            None => break,
        };
        ridged |= jittered;
        let slope: f64 = grad.dot(&step);
        // A jittered factorization still yields a descent direction; a
        // nonnegative slope means the quadratic model has broken down.
        if slope >= 0.0 {
            break;
        }
        // Sufficient decrease with a rounding allowance so the quadratic
        // convergence tail is not rejected at the float floor.
        let slack = 1e-13 * value.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = x
                .iter()
                .zip(step.iter())
                .map(|(&xi, &si)| xi + t * si)
                .collect();
            if let Some(v) = obj.value(&cand) {
                if v <= value + ARMIJO_C * t * slope + slack {
                    x = cand;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let (score_norm, converged) = match obj.gradient(&x) {
        Some(g) => {
            let n = g.amax();
            (n, n <= opts.tol)
        }
        None => (f64::INFINITY, false),
    };
    OptimOutcome {
        x,
        value,
        score_norm,
        iterations,
        converged,
        ridged,
    }
}

/// Damped Newton root solve on `E(x) = 0`, backtracking on `|E|^2`.
pub fn solve_root<E: EstimatingFunction>(ef: &E, x0: &[f64], opts: &OptimOptions) -> OptimOutcome {
    let mut x = x0.to_vec();
    let mut ridged = false;
    let mut e = match ef.eval(&x) {
        Some(e) => e,
        None => {
            return OptimOutcome {
                x,
                value: f64::NAN,
                score_norm: f64::INFINITY,
                iterations: 0,
                converged: false,
                ridged,
            }
        }
    };
    let mut iterations = 0;
    loop {
        let score_norm = e.amax();
        if score_norm <= opts.tol {
            return OptimOutcome {
                x,
                value: f64::NAN,
                score_norm,
                iterations,
                converged: true,
                ridged,
            };
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let jac = match ef.jacobian(&x) {
            Some(j) => j,
            None => break,
        };
        let step = match solve_linear(&jac, &e, opts.ridge_jitter, &mut ridged) {
            Some(s) => s,
            None => break,
        };
        let merit = 0.5 * e.norm_squared();
        let slack = 1e-13 * merit.max(1.0);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = x
                .iter()
                .zip(step.iter())
                .map(|(&xi, &si)| xi + t * si)
                .collect();
            if let Some(ec) = ef.eval(&cand) {
                let mc = 0.5 * ec.norm_squared();
                if mc <= merit * (1.0 - 2.0 * ARMIJO_C * t) + slack {
                    x = cand;
                    e = ec;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let score_norm = e.amax();
    OptimOutcome {
        converged: score_norm <= opts.tol,
        x,
        value: f64::NAN,
        score_norm,
        iterations,
        ridged,
    }
}

/// Newton direction `-J^{-1} e` via LU, with escalating diagonal jitter on
/// singular Jacobians.
fn solve_linear(
    jac: &DMatrix<f64>,
    e: &DVector<f64>,
    base_jitter: f64,
    ridged: &mut bool,
) -> Option<DVector<f64>> {
    if let Some(s) = jac.clone().lu().solve(&(-e)) {
        if s.iter().all(|v| v.is_finite()) {
            return Some(s);
        }
    }
    let scale = jac.diagonal().amax().max(1.0);
    let mut jitter = base_jitter * scale;
    for _ in 0..MAX_JITTER_ESCALATIONS {
        let mut jj = jac.clone();
        for i in 0..jj.nrows().min(jj.ncols()) {
            jj[(i, i)] += jitter;
        }
        if let Some(s) = jj.lu().solve(&(-e)) {
            if s.iter().all(|v| v.is_finite()) {
                *ridged = true;
                return Some(s);
            }
        }
        jitter *= 10.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;

    impl Objective for Quadratic {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> Option<f64> {
            Some((x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2))
        }
        fn gradient(&self, x: &[f64]) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![
                2.0 * (x[0] - 3.0),
                4.0 * (x[1] + 1.0),
            ]))
        }
    }

    #[test]
    fn minimizes_quadratic_in_one_newton_step() {
        let out = minimize(&Quadratic, &[0.0, 0.0], &OptimOptions::default());
        assert!(out.converged);
        assert!((out.x[0] - 3.0).abs() < 1e-9);
        assert!((out.x[1] + 1.0).abs() < 1e-9);
        assert!(out.iterations <= 2);
    }

    struct Rosenbrockish;

    impl Objective for Rosenbrockish {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> Option<f64> {
            Some((1.0 - x[0]).powi(2) + 10.0 * (x[1] - x[0] * x[0]).powi(2))
        }
        fn gradient(&self, x: &[f64]) -> Option<DVector<f64>> {
            fd_gradient(x, |y| self.value(y))
        }
    }

    #[test]
    fn handles_nonconvex_valley() {
        let out = minimize(&Rosenbrockish, &[-1.2, 1.0], &OptimOptions {
            tol: 1e-6,
            ..OptimOptions::default()
        });
        assert!(out.converged, "score norm {}", out.score_norm);
        assert!((out.x[0] - 1.0).abs() < 1e-4);
    }

    struct CubicRoot;

    impl EstimatingFunction for CubicRoot {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, x: &[f64]) -> Option<DVector<f64>> {
            Some(DVector::from_vec(vec![x[0].powi(3) - 8.0]))
        }
    }

    #[test]
    fn root_solver_finds_cube_root() {
        let out = solve_root(&CubicRoot, &[1.0], &OptimOptions::default());
        assert!(out.converged);
        assert!((out.x[0] - 2.0).abs() < 1e-8);
    }

    struct Infeasible;

    impl Objective for Infeasible {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, _: &[f64]) -> Option<f64> {
            None
        }
        fn gradient(&self, _: &[f64]) -> Option<DVector<f64>> {
            None
        }
    }

    #[test]
    fn infeasible_start_reports_nonconvergence() {
        let out = minimize(&Infeasible, &[0.0], &OptimOptions::default());
        assert!(!out.converged);
    }
}
