use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::counting::PhotonHistogramModel;
use super::AtomEstimate;
use crate::error::{invalid, Result};
use crate::lsf::ResponseLsf;
use crate::noise::{profile_variance, NoiseParams};
use crate::optim::{self, Bounds, LmOptions, LmResult, Residuals};
use crate::stats::chi2_sf;

/// One background-subtracted region with what is needed to model it.
#[derive(Debug, Clone, Copy)]
pub struct FitInput<'a> {
    pub values: &'a [f64],
    /// Pixel coordinate of `values[0]`.
    pub start_px: f64,
    pub n_perp: usize,
    /// Response including the pixel aperture.
    pub lsf: &'a ResponseLsf,
    pub noise: &'a NoiseParams,
}

impl FitInput<'_> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn x(&self, i: usize) -> f64 {
        self.start_px + i as f64
    }

    fn extent(&self) -> (f64, f64) {
        (self.start_px - 0.5, self.start_px + self.values.len() as f64 - 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeBounds {
    pub lo: f64,
    pub hi: f64,
}

impl AmplitudeBounds {
    /// One-atom peak ± 5 widths.
    pub fn from_model(model: &PhotonHistogramModel) -> Self {
        Self::around(model.peak_spacing, model.w1())
    }

    pub fn around(peak: f64, width: f64) -> Self {
        AmplitudeBounds {
            lo: (peak - 5.0 * width).max(0.0),
            hi: peak + 5.0 * width,
        }
    }

    /// Bounds for a nominal single-emitter total, with the width of its
    /// integrated photoelectron distribution over `n_par × n_perp` pixels.
    pub fn nominal(amplitude: f64, noise: &NoiseParams, n_par: usize, n_perp: usize) -> Self {
        let width = (noise.excess_factor().powi(2) * amplitude
            + (n_par * n_perp) as f64 * noise.sigma_b * noise.sigma_b)
            .sqrt();
        Self::around(amplitude, width)
    }

    pub fn unbounded() -> Self {
        AmplitudeBounds {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.lo, self.hi)
    }
}

/// Residuals `(S − I)/σ(I)` and their derivative factor
/// `−(1 + r σ'(I))/σ(I)` for model values `model`.
fn weighted(input: &FitInput, i: usize, model: f64) -> (f64, f64, f64) {
    let var = profile_variance(model, input.n_perp, input.noise);
    let sigma = var.sqrt().max(1e-300);
    let r = (input.values[i] - model) / sigma;
    let p = input.noise;
    let dsigma = if model > 0.0 {
        (p.c1 * p.c1 + 2.0 * p.c2 * p.c2 * model) / (2.0 * sigma)
    } else {
        0.0
    };
    (r, -(1.0 + r * dsigma) / sigma, var)
}

/// `Σ r²` and `Σ ln σ²` at the given positions and amplitudes.
pub(super) fn objective(input: &FitInput, xi: &[f64], amps: &[f64]) -> (f64, f64) {
    let mut chi2 = 0.0;
    let mut logdet = 0.0;
    for i in 0..input.len() {
        let x = input.x(i);
        let model: f64 = xi.iter().zip(amps).map(|(p, a)| a * input.lsf.eval(x - p)).sum();
        let (r, _, var) = weighted(input, i, model);
        chi2 += r * r;
        logdet += var.max(1e-300).ln();
    }
    (chi2, logdet)
}

struct Continuous<'a> {
    input: FitInput<'a>,
    m: usize,
}

impl Residuals for Continuous<'_> {
    fn n_residuals(&self) -> usize {
        self.input.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let (xi, amps) = p.split_at(self.m);
        for (i, o) in out.iter_mut().enumerate() {
            let x = self.input.x(i);
            let model: f64 = xi.iter().zip(amps).map(|(c, a)| a * self.input.lsf.eval(x - c)).sum();
            *o = weighted(&self.input, i, model).0;
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let m = self.m;
        let (xi, amps) = p.split_at(m);
        for i in 0..self.input.len() {
            let x = self.input.x(i);
            let model: f64 = xi.iter().zip(amps).map(|(c, a)| a * self.input.lsf.eval(x - c)).sum();
            let (_, factor, _) = weighted(&self.input, i, model);
            for l in 0..m {
                let d = x - xi[l];
                jac[(i, l)] = factor * (-amps[l] * self.input.lsf.derivative(d));
                jac[(i, m + l)] = factor * self.input.lsf.eval(d);
            }
        }
        true
    }
}

pub(super) fn lm_options() -> LmOptions {
    LmOptions {
        max_iters: 200,
        ftol: 1e-8,
        ..LmOptions::default()
    }
}

/// Noise-weighted least-squares fit of `m = seeds.len()` emitters with
/// hard amplitude bounds and positions confined to the region. The noise
/// model is evaluated on the model, not the data.
pub fn nlls_fit(input: &FitInput, seeds: &[f64], bounds: &AmplitudeBounds) -> Result<AtomEstimate> {
    let m = seeds.len();
    let n = input.len();
    if m == 0 {
        return Err(invalid("at least one seed required"));
    }
    if n <= 2 * m {
        return Err(invalid(format!("{n} samples cannot constrain {m} emitters")));
    }
    if bounds.lo > bounds.hi {
        return Err(invalid("amplitude bounds are inverted"));
    }
    let order_violation_seeds = seeds.windows(2).any(|w| w[1] <= w[0]);
    let (lo, hi) = input.extent();
    let total: f64 = input.values.iter().sum();
    let a0 = bounds.clamp((total / m as f64).max(0.0));
    let mut x0: Vec<f64> = seeds.iter().map(|s| s.clamp(lo, hi)).collect();
    x0.extend(std::iter::repeat_n(a0, m));
    let mut lower = vec![lo; m];
    let mut upper = vec![hi; m];
    lower.extend(std::iter::repeat_n(bounds.lo, m));
    upper.extend(std::iter::repeat_n(bounds.hi, m));
    let b = Bounds { lower, upper };
    let problem = Continuous { input: *input, m };
    let res = optim::minimize(&problem, &x0, Some(&b), &lm_options());
    Ok(finish(input, &res, &b, m, seeds, order_violation_seeds))
}

fn finish(input: &FitInput, res: &LmResult, b: &Bounds, m: usize, seeds: &[f64], seed_violation: bool) -> AtomEstimate {
    let (xi, amps) = res.params.split_at(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| xi[a].total_cmp(&xi[b]));
    let mut seed_order: Vec<usize> = (0..m).collect();
    seed_order.sort_by(|&a, &b| seeds[a].total_cmp(&seeds[b]));
    let pinned_raw: Vec<usize> = res.pinned(b, 1e-9).into_iter().filter(|&i| i >= m).map(|i| i - m).collect();
    let pinned = order
        .iter()
        .enumerate()
        .filter(|(_, l)| pinned_raw.contains(l))
        .map(|(k, _)| k)
        .collect();
    let xs: Vec<f64> = order.iter().map(|&l| xi[l]).collect();
    let as_: Vec<f64> = order.iter().map(|&l| amps[l]).collect();
    let (chi2, logdet) = objective(input, &xs, &as_);
    let dof = input.len() - 2 * m;
    AtomEstimate {
        xi: xs,
        p: Vec::new(),
        amplitudes: as_,
        chi2,
        dof,
        p_value: chi2_sf(chi2, dof),
        nll: chi2 + logdet,
        accepted: res.converged(),
        delta_l: None,
        converged: res.converged(),
        pinned,
        order_violation: seed_violation || order != seed_order,
    }
}

/// Emitters on lattice sites `sites[k]` of each part, positions
/// `δ + a·p`, with `δ` shared across parts (or fixed) and free amplitudes.
pub(super) struct Discrete<'a> {
    pub parts: Vec<(FitInput<'a>, Vec<i64>)>,
    pub a_px: f64,
    pub fixed_delta: Option<f64>,
}

impl Discrete<'_> {
    fn offset(&self) -> usize {
        usize::from(self.fixed_delta.is_none())
    }

    fn delta(&self, p: &[f64]) -> f64 {
        self.fixed_delta.unwrap_or_else(|| p[0])
    }

    pub fn n_params(&self) -> usize {
        self.offset() + self.parts.iter().map(|(_, s)| s.len()).sum::<usize>()
    }

    /// Per part: positions and amplitudes.
    pub fn unpack(&self, p: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let delta = self.delta(p);
        let mut k = self.offset();
        self.parts
            .iter()
            .map(|(_, sites)| {
                let xi = sites.iter().map(|&s| delta + self.a_px * s as f64).collect();
                let amps = p[k..k + sites.len()].to_vec();
                k += sites.len();
                (xi, amps)
            })
            .collect()
    }
}

impl Residuals for Discrete<'_> {
    fn n_residuals(&self) -> usize {
        self.parts.iter().map(|(inp, _)| inp.len()).sum()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let mut row = 0;
        for ((inp, _), (xi, amps)) in self.parts.iter().zip(self.unpack(p)) {
            for i in 0..inp.len() {
                let x = inp.x(i);
                let model: f64 = xi.iter().zip(&amps).map(|(c, a)| a * inp.lsf.eval(x - c)).sum();
                out[row] = weighted(inp, i, model).0;
                row += 1;
            }
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) -> bool {
        jac.fill(0.0);
        let off = self.offset();
        let mut row = 0;
        let mut col = off;
        for ((inp, _), (xi, amps)) in self.parts.iter().zip(self.unpack(p)) {
            for i in 0..inp.len() {
                let x = inp.x(i);
                let model: f64 = xi.iter().zip(&amps).map(|(c, a)| a * inp.lsf.eval(x - c)).sum();
                let (_, factor, _) = weighted(inp, i, model);
                let mut ddelta = 0.0;
                for l in 0..xi.len() {
                    let d = x - xi[l];
                    ddelta -= amps[l] * inp.lsf.derivative(d);
                    jac[(row, col + l)] = factor * inp.lsf.eval(d);
                }
                if off == 1 {
                    jac[(row, 0)] = factor * ddelta;
                }
                row += 1;
            }
            col += xi.len();
        }
        true
    }
}

/// Fits a discrete configuration; returns the optimizer result and the
/// bounds used.
pub(super) fn fit_discrete(problem: &Discrete, delta0: f64, amps0: &[f64], bounds: &AmplitudeBounds) -> (LmResult, Bounds) {
    let mut x0 = Vec::with_capacity(problem.n_params());
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    if problem.fixed_delta.is_none() {
        x0.push(delta0);
        lower.push(delta0 - problem.a_px);
        upper.push(delta0 + problem.a_px);
    }
    for &a in amps0 {
        x0.push(bounds.clamp(a));
        lower.push(bounds.lo);
        upper.push(bounds.hi);
    }
    let b = Bounds { lower, upper };
    let res = optim::minimize(problem, &x0, Some(&b), &lm_options());
    (res, b)
}
