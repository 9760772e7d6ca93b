//! Gauss quadrature rules (Golub–Welsch) and an adaptive Gauss–Legendre
//! integrator.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a Gauss rule.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(n: usize, off_diag: impl Fn(usize) -> f64, mu0: f64) -> Rule {
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let b = off_diag(i);
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss–Legendre rule on [-1, 1].
pub fn gauss_legendre(n: usize) -> Rule {
    golub_welsch(
        n,
        |i| {
            let i = i as f64;
            i / (4.0 * i * i - 1.0).sqrt()
        },
        2.0,
    )
}

/// Gauss–Hermite rule for weight `exp(-x²)`.
pub fn gauss_hermite(n: usize) -> Rule {
    golub_welsch(n, |i| (i as f64 / 2.0).sqrt(), std::f64::consts::PI.sqrt())
}

pub fn gl16() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

pub fn gh40() -> &'static Rule {
    static RULE: OnceLock<Rule> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(40))
}

fn gl16_on(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let rule = gl16();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// Adaptive 16-point Gauss–Legendre on [a, b]. Intervals are bisected until
/// the one-panel and two-panel estimates agree to `rel_tol` (relative to
/// the running magnitude) or `max_depth` is reached.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64) -> f64 {
    integrate_with_floor(f, a, b, rel_tol, 0.0)
}

/// [`integrate`] with an absolute tolerance floor, for integrands whose
/// scale is known from outside the interval.
pub fn integrate_with_floor(f: &dyn Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let mid = 0.5 * (a + b);
        let left = gl16_on(f, a, mid);
        let right = gl16_on(f, mid, b);
        let sum = left + right;
        if depth == 0 || (sum - whole).abs() <= tol {
            return sum;
        }
        recurse(f, a, mid, left, 0.5 * tol, depth - 1)
            + recurse(f, mid, b, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let whole = gl16_on(f, a, b);
    // Probe on a coarse grid so a narrow feature cannot hide between nodes
    let probe = (0..=64)
        .map(|i| f(a + (b - a) * i as f64 / 64.0).abs())
        .fold(whole.abs(), f64::max)
        * (b - a).abs();
    let tol = (rel_tol * probe).max(abs_tol).max(f64::MIN_POSITIVE);
    let sum = recurse(f, a, b, whole, tol, 24);
    // A narrow spike can make the first two estimates agree by accident
    if (sum - whole).abs() <= tol && probe > 10.0 * whole.abs().max(tol) {
        let n = 64;
        let h = (b - a) / n as f64;
        return (0..n)
            .map(|i| {
                let lo = a + i as f64 * h;
                let hi = lo + h;
                let w = gl16_on(f, lo, hi);
                recurse(f, lo, hi, w, tol / n as f64, 20)
            })
            .sum();
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let r = gauss_legendre(16);
        let s: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(30)).sum();
        assert!((s - 2.0 / 31.0).abs() < 1e-13);
    }

    #[test]
    fn hermite_second_moment() {
        let r = gh40();
        let s: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
        assert!((s - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn adaptive_handles_narrow_peak() {
        let sigma = 1e-3;
        let f = |x: f64| (-(x - 0.3).powi(2) / (2.0 * sigma * sigma)).exp();
        let v = integrate(&f, 0.0, 1.0, 1e-10);
        let exact = sigma * (2.0 * std::f64::consts::PI).sqrt();
        assert!(((v - exact) / exact).abs() < 1e-8, "{v} vs {exact}");
    }
}
