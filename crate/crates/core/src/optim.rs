//! Box-constrained Levenberg–Marquardt.
//!
//! Minimizes `Σ r_i(θ)²` subject to `lower ≤ θ ≤ upper`. Bounds are hard:
//! every trial point is projected into the box and parameters pinned at a
//! bound with the gradient pointing outward are frozen for that step
//! (active set), so the damped Gauss–Newton step is taken in the free
//! subspace only.

use nalgebra::{DMatrix, DVector};

/// A vector-valued residual function.
pub trait Residuals {
    fn n_residuals(&self) -> usize;

    fn residuals(&self, params: &[f64], out: &mut [f64]);

    /// Writes the analytic Jacobian `∂r_i/∂θ_j` into `jac` and returns
    /// `true`, or returns `false` to fall back on finite differences.
    fn jacobian(&self, _params: &[f64], _jac: &mut DMatrix<f64>) -> bool {
        false
    }
}

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iters: usize,
    /// Relative decrease of the objective below which the fit is converged.
    pub ftol: f64,
    pub xtol: f64,
    pub gtol: f64,
    pub fd_step: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iters: 200,
            ftol: 1e-8,
            xtol: 1e-12,
            gtol: 1e-12,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Termination {
    CostTolerance,
    StepTolerance,
    GradientTolerance,
    ZeroResidual,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub params: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub jacobian: DMatrix<f64>,
}

impl LmResult {
    pub fn converged(&self) -> bool {
        !matches!(self.termination, Termination::MaxIterations)
    }

    /// Indices of parameters within `tol` (relative to the box width, or
    /// absolute for half-open boxes) of a bound.
    pub fn pinned(&self, bounds: &Bounds, tol: f64) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(i, &v)| {
                let (lo, hi) = (bounds.lower[*i], bounds.upper[*i]);
                let width = if (hi - lo).is_finite() { hi - lo } else { 1.0 };
                (v - lo).abs() <= tol * width || (hi - v).abs() <= tol * width
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Parameter covariance `s² (JᵀJ)⁺` with `s² = cost/dof`; `None` when
    /// `dof == 0`.
    pub fn covariance(&self, dof: usize) -> Option<DMatrix<f64>> {
        if dof == 0 {
            return None;
        }
        let jtj = self.jacobian.transpose() * &self.jacobian;
        let pinv = jtj.pseudo_inverse(1e-12).ok()?;
        Some(pinv * (self.cost / dof as f64))
    }
}

fn finite_difference<R: Residuals + ?Sized>(
    problem: &R,
    x: &[f64],
    r0: &[f64],
    bounds: &Bounds,
    step: f64,
    jac: &mut DMatrix<f64>,
    scratch: &mut [f64],
) {
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let mut h = step * x[j].abs().max(1.0);
        if x[j] + h > bounds.upper[j] {
            h = -h;
        }
        xp[j] = x[j] + h;
        problem.residuals(&xp, scratch);
        for i in 0..r0.len() {
            jac[(i, j)] = (scratch[i] - r0[i]) / h;
        }
        xp[j] = x[j];
    }
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

pub fn minimize<R: Residuals + ?Sized>(
    problem: &R,
    x0: &[f64],
    bounds: Option<&Bounds>,
    opts: &LmOptions,
) -> LmResult {
    let n = x0.len();
    let m = problem.n_residuals();
    let owned;
    let bounds = match bounds {
        Some(b) => b,
        None => {
            owned = Bounds::unbounded(n);
            &owned
        }
    };
    let mut x = x0.to_vec();
    bounds.clamp(&mut x);

    let mut r = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    problem.residuals(&x, &mut r);
    let mut evaluations = 1;
    let mut cost = sum_sq(&r);
    let mut jac = DMatrix::<f64>::zeros(m, n);
    let mut refresh_jacobian = |x: &[f64], r: &[f64], jac: &mut DMatrix<f64>, evals: &mut usize| {
        if !problem.jacobian(x, jac) {
            finite_difference(problem, x, r, bounds, opts.fd_step, jac, &mut scratch);
            *evals += n;
        }
    };
    refresh_jacobian(&x, &r, &mut jac, &mut evaluations);

    let mut lambda = 1e-3;
    let mut nu = 2.0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut r_new = vec![0.0; m];

    if !cost.is_finite() {
        return LmResult {
            params: x,
            cost,
            iterations,
            evaluations,
            termination: Termination::Stalled,
            jacobian: jac,
        };
    }

    'outer: while iterations < opts.max_iters {
        iterations += 1;
        if cost <= 1e-30 {
            termination = Termination::ZeroResidual;
            break;
        }
        let rv = DVector::from_column_slice(&r);
        let g = jac.transpose() * &rv;
        let a = jac.transpose() * &jac;

        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                let at_lo = x[i] <= bounds.lower[i] && g[i] > 0.0;
                let at_hi = x[i] >= bounds.upper[i] && g[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let gmax = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
        if free.is_empty() || gmax <= opts.gtol * (1.0 + cost) {
            termination = Termination::GradientTolerance;
            break;
        }

        let nf = free.len();
        let mut af = DMatrix::<f64>::zeros(nf, nf);
        let mut gf = DVector::<f64>::zeros(nf);
        for (p, &i) in free.iter().enumerate() {
            gf[p] = g[i];
            for (q, &j) in free.iter().enumerate() {
                af[(p, q)] = a[(i, j)];
            }
        }
        let diag_floor = (0..nf).map(|p| af[(p, p)]).fold(0.0, f64::max) * 1e-12 + 1e-300;

        loop {
            let mut damped = af.clone();
            for p in 0..nf {
                damped[(p, p)] += lambda * af[(p, p)].max(diag_floor);
            }
            let step = match damped.clone().cholesky() {
                Some(ch) => ch.solve(&(-&gf)),
                None => match damped.lu().solve(&(-&gf)) {
                    Some(s) => s,
                    None => {
                        lambda *= nu;
                        nu *= 2.0;
                        if lambda > 1e20 {
                            termination = Termination::Stalled;
                            break 'outer;
                        }
                        continue;
                    }
                },
            };
            let mut x_new = x.clone();
            for (p, &i) in free.iter().enumerate() {
                x_new[i] += step[p];
            }
            bounds.clamp(&mut x_new);
            let delta: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let dnorm = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            let xnorm = x.iter().map(|d| d * d).sum::<f64>().sqrt();
            if dnorm <= opts.xtol * (xnorm + opts.xtol) {
                termination = Termination::StepTolerance;
                break 'outer;
            }

            problem.residuals(&x_new, &mut r_new);
            evaluations += 1;
            let cost_new = sum_sq(&r_new);

            if cost_new.is_finite() && cost_new < cost {
                let dv = DVector::from_column_slice(&delta);
                let predicted = -(2.0 * g.dot(&dv) + dv.dot(&(&a * &dv)));
                let rho = if predicted > 0.0 {
                    (cost - cost_new) / predicted
                } else {
                    0.0
                };
                lambda *= f64::max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0).powi(3));
                lambda = lambda.max(1e-15);
                nu = 2.0;
                let decrease = cost - cost_new;
                x = x_new;
                std::mem::swap(&mut r, &mut r_new);
                cost = cost_new;
                refresh_jacobian(&x, &r, &mut jac, &mut evaluations);
                if decrease <= opts.ftol * cost {
                    termination = Termination::CostTolerance;
                    break 'outer;
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e20 {
                termination = Termination::Stalled;
                break 'outer;
            }
        }
    }

    LmResult {
        params: x,
        cost,
        iterations,
        evaluations,
        termination,
        jacobian: jac,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;
    impl Residuals for Rosenbrock {
        fn n_residuals(&self) -> usize {
            2
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            out[0] = 10.0 * (p[1] - p[0] * p[0]);
            out[1] = 1.0 - p[0];
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let res = minimize(&Rosenbrock, &[-1.2, 1.0], None, &LmOptions::default());
        assert!(res.converged());
        assert!((res.params[0] - 1.0).abs() < 1e-6);
        assert!((res.params[1] - 1.0).abs() < 1e-6);
    }

    struct Line {
        x: Vec<f64>,
        y: Vec<f64>,
    }
    impl Residuals for Line {
        fn n_residuals(&self) -> usize {
            self.x.len()
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for i in 0..self.x.len() {
                out[i] = p[0] + p[1] * self.x[i] - self.y[i];
            }
        }
    }

    #[test]
    fn bound_is_hard_constraint() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v).collect();
        let bounds = Bounds {
            lower: vec![f64::NEG_INFINITY, 0.0],
            upper: vec![f64::INFINITY, 1.5],
        };
        let res = minimize(&Line { x, y }, &[0.0, 0.5], Some(&bounds), &LmOptions::default());
        assert!(res.params[1] <= 1.5);
        assert!((res.params[1] - 1.5).abs() < 1e-12);
        assert_eq!(res.pinned(&bounds, 1e-9), vec![1]);
    }
}
