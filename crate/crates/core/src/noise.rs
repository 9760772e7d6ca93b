//! EMCCD noise law, background-histogram calibration and empirical
//! signal-to-noise curves.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{invalid, Error, Result};
use crate::optim::{self, Bounds, LmOptions, Residuals};
use crate::quadrature;
use crate::stats;

/// Parameters of every stochastic channel of the detector.
///
/// Rates are Poisson means per pixel and exposure. `sigma_ro` is the
/// read-out rms in electrons before division by the gain. `sigma_b`, `c1`
/// and `c2` are the coefficients of the compact law
/// `σ(S) = √(σ_b² + c1² S + c2² S²)`; [`NoiseParams::from_channels`] keeps
/// them consistent with the channel rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseParams {
    pub sigma_b: f64,
    pub c1: f64,
    pub c2: f64,
    pub g: f64,
    pub sigma_ro: f64,
    pub cic_rate: f64,
    pub dark_rate: f64,
    pub stray_rate: f64,
    /// Relative rms of per-frame laser intensity fluctuations.
    pub intensity_rel: f64,
    /// Relative rms of the static pixel response non-uniformity.
    pub prnu_rel: f64,
    /// Whether the EM register is in the signal chain.
    pub em_enabled: bool,
    /// Gain used to convert counts back to photoelectrons; defaults to `g`.
    pub calibration_gain: Option<f64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams::from_channels(1000.0, 30.0, 0.01, 0.01, 0.1596, 0.0, 0.0, true)
    }
}

impl NoiseParams {
    /// Builds a parameter set whose compact coefficients follow from the
    /// channel rates.
    #[allow(clippy::too_many_arguments)]
    pub fn from_channels(
        g: f64,
        sigma_ro: f64,
        cic_rate: f64,
        dark_rate: f64,
        stray_rate: f64,
        intensity_rel: f64,
        prnu_rel: f64,
        em_enabled: bool,
    ) -> Self {
        let mut p = NoiseParams {
            sigma_b: 0.0,
            c1: 0.0,
            c2: 0.0,
            g,
            sigma_ro,
            cic_rate,
            dark_rate,
            stray_rate,
            intensity_rel,
            prnu_rel,
            em_enabled,
            calibration_gain: None,
        };
        p.sync_compact();
        p
    }

    /// Noise switched off except Poisson shot noise of the fluorescence.
    pub fn shot_noise_only() -> Self {
        NoiseParams::from_channels(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, false)
    }

    /// Recomputes `sigma_b`, `c1`, `c2` from the channel parameters.
    pub fn sync_compact(&mut self) {
        let f2 = self.excess_factor().powi(2);
        let bg = self.stray_rate + self.dark_rate + self.cic_rate;
        let ro = self.sigma_ro / self.calibration_divisor();
        self.sigma_b = (f2 * bg + ro * ro).sqrt();
        self.c1 = f2.sqrt();
        self.c2 = (f2 * (self.intensity_rel.powi(2) + self.prnu_rel.powi(2))).sqrt();
    }

    pub fn excess_factor(&self) -> f64 {
        if self.em_enabled {
            std::f64::consts::SQRT_2
        } else {
            1.0
        }
    }

    pub fn calibration_divisor(&self) -> f64 {
        self.calibration_gain.unwrap_or(self.g)
    }

    /// Mean background per pixel in photoelectrons.
    pub fn background_mean(&self) -> f64 {
        (self.stray_rate + self.dark_rate + self.cic_rate) * self.g / self.calibration_divisor()
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.sigma_b,
            self.c1,
            self.c2,
            self.sigma_ro,
            self.cic_rate,
            self.dark_rate,
            self.stray_rate,
            self.intensity_rel,
            self.prnu_rel,
        ];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("noise parameters must be finite and non-negative"));
        }
        if !(self.g >= 1.0) || !self.g.is_finite() {
            return Err(invalid("EM gain must be at least 1"));
        }
        if let Some(c) = self.calibration_gain {
            if !(c > 0.0) || !c.is_finite() {
                return Err(invalid("calibration gain must be positive"));
            }
        }
        let ro = self.sigma_ro / self.calibration_divisor();
        if self.sigma_b * self.sigma_b < ro * ro * (1.0 - 1e-12) {
            return Err(invalid("sigma_b is below the read-out floor sigma_ro/g"));
        }
        Ok(())
    }
}

/// `√(σ_b² + c1² S + c2² S²)`.
pub fn sigma_model(s: f64, p: &NoiseParams) -> f64 {
    let s = s.max(0.0);
    (p.sigma_b * p.sigma_b + p.c1 * p.c1 * s + p.c2 * p.c2 * s * s).sqrt()
}

/// Variance of an integrated profile pixel summing `n_perp` rows with
/// total fluorescence `s`: background adds once per row.
pub fn profile_variance(s: f64, n_perp: usize, p: &NoiseParams) -> f64 {
    let s = s.max(0.0);
    n_perp as f64 * p.sigma_b * p.sigma_b + p.c1 * p.c1 * s + p.c2 * p.c2 * s * s
}

/// Channel-resolved variance of one pixel with fluorescence `s_fluo`:
/// `F²(S + stray + σ_int² + σ_PRNU² + dark + cic) + (σ_ro/g)²`, with the
/// proportional terms acting on fluorescence plus stray light.
pub fn total_variance(s_fluo: f64, p: &NoiseParams) -> f64 {
    let f2 = p.excess_factor().powi(2);
    let light = s_fluo.max(0.0) + p.stray_rate;
    let sigma_int = p.intensity_rel * light;
    let sigma_prnu = p.prnu_rel * light;
    let ro = p.sigma_ro / p.calibration_divisor();
    f2 * (s_fluo.max(0.0)
        + p.stray_rate
        + sigma_int * sigma_int
        + sigma_prnu * sigma_prnu
        + p.dark_rate
        + p.cic_rate)
        + ro * ro
}

/// Histogram bin width in photoelectrons.
pub const BACKGROUND_BIN_WIDTH: f64 = 0.1;
/// Highest number of spurious electrons per pixel kept in the model.
const MAX_SPURIOUS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundFitReport {
    pub converged: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    pub deviance: f64,
    pub n_bins: usize,
    /// Standard errors of (spurious rate, g, σ_ro).
    pub uncertainties: [f64; 3],
    /// Parameter vectors (rate, gain/nominal, read-out/nominal) at the
    /// start and end of the fit.
    pub trace: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundFit {
    /// Model rms of a background pixel in photoelectrons.
    pub sigma_b: f64,
    pub g: f64,
    /// Poisson mean of spurious electrons per pixel (CIC plus any dark
    /// current and stray light present in the frames).
    pub spurious_rate: f64,
    pub sigma_ro: f64,
    pub report: BackgroundFitReport,
}

/// CDF of a Gamma(`x`, `theta`) variable plus N(0, `s`²).
fn compound_cdf(x: usize, theta: f64, s: f64, y: f64) -> f64 {
    if x == 1 {
        // exponentially modified Gaussian
        let a = stats::normal_cdf(y / s);
        let log_b = -y / theta + s * s / (2.0 * theta * theta) + stats::normal_log_cdf(y / s - s / theta);
        return (a - log_b.exp()).clamp(0.0, 1.0);
    }
    let rule = quadrature::gh40();
    let a = x as f64;
    let scale = std::f64::consts::SQRT_2 * s;
    rule.nodes
        .iter()
        .zip(&rule.weights)
        .map(|(t, w)| {
            let u = (y - scale * t) / theta;
            if u <= 0.0 {
                0.0
            } else {
                w * gamma_lr(a, u)
            }
        })
        .sum::<f64>()
        / std::f64::consts::PI.sqrt()
}

/// Probability of each bin `[edges[i], edges[i+1])` under rate `lambda`,
/// scale `theta` and read-out width `s`.
fn bin_probabilities(edges: &[f64], lambda: f64, theta: f64, s: f64) -> Vec<f64> {
    let mut pois = [0.0; MAX_SPURIOUS + 1];
    pois[0] = (-lambda).exp();
    for x in 1..=MAX_SPURIOUS {
        pois[x] = pois[x - 1] * lambda / x as f64;
    }
    let cdf_at = |y: f64| -> f64 {
        let mut c = pois[0] * stats::normal_cdf(y / s);
        for (x, &p) in pois.iter().enumerate().skip(1) {
            if p > 1e-300 {
                c += p * compound_cdf(x, theta, s, y);
            }
        }
        c
    };
    let cdfs: Vec<f64> = edges.iter().map(|&e| cdf_at(e)).collect();
    cdfs.windows(2).map(|w| (w[1] - w[0]).max(1e-300)).collect()
}

struct HistogramProblem {
    edges: Vec<f64>,
    counts: Vec<f64>,
    total: f64,
}

impl HistogramProblem {
    fn expected(&self, p: &[f64]) -> Vec<f64> {
        bin_probabilities(&self.edges, p[0], p[1], p[2])
            .into_iter()
            .map(|q| q * self.total)
            .collect()
    }
}

impl Residuals for HistogramProblem {
    fn n_residuals(&self) -> usize {
        self.counts.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let mu = self.expected(p);
        for i in 0..out.len() {
            let n = self.counts[i];
            let dev = if n > 0.0 {
                2.0 * (mu[i] - n + n * (n / mu[i]).ln())
            } else {
                2.0 * mu[i]
            };
            out[i] = (n - mu[i]).signum() * dev.max(0.0).sqrt();
        }
    }
}

/// Poisson log-likelihood of the binned counts (constant terms included).
fn poisson_log_likelihood(counts: &[f64], mu: &[f64]) -> f64 {
    counts
        .iter()
        .zip(mu)
        .map(|(&n, &m)| n * m.ln() - m - statrs::function::gamma::ln_gamma(n + 1.0))
        .sum()
}

/// Maximum-likelihood fit of the background pixel distribution.
///
/// `samples` are pixel values in photoelectrons obtained by dividing raw
/// counts by `nominal_gain`. The model is a Poisson number of spurious
/// electrons (truncated at four) amplified by the Gamma-law EM register and
/// smeared by normal read-out noise; the fit maximizes the Poisson
/// likelihood of 0.1 e⁻ bins. The gain is recovered relative to the
/// nominal one, so a mis-set conversion shows up as `g ≠ nominal_gain`.
pub fn fit_background_histogram(samples: &[f64], nominal_gain: f64) -> Result<BackgroundFit> {
    if samples.len() < 100_000 {
        return Err(invalid(format!(
            "background fit needs at least 1e5 samples, got {}",
            samples.len()
        )));
    }
    if !(nominal_gain > 0.0) {
        return Err(invalid("nominal gain must be positive"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("background samples must be finite"));
    }
    let w = BACKGROUND_BIN_WIDTH;
    let lo_v = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_v = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = (lo_v / w - 0.5).floor() as i64;
    let last = (hi_v / w - 0.5).floor() as i64 + 1;
    let edges: Vec<f64> = (first..=last).map(|k| (k as f64 + 0.5) * w).collect();
    let n_bins = edges.len() - 1;
    let mut counts = vec![0.0; n_bins];
    for &v in samples {
        let k = ((v / w - 0.5).floor() as i64 - first) as usize;
        counts[k.min(n_bins - 1)] += 1.0;
    }

    // Initial guesses: core width from the MAD, decay length from the mean
    // excess of the tail, rate from the tail fraction.
    let med = stats::median(samples);
    let dev: Vec<f64> = samples.iter().map(|v| (v - med).abs()).collect();
    let s0 = (1.4826 * stats::median(&dev)).max(1e-3);
    let cut = med + 5.0 * s0;
    let tail: Vec<f64> = samples.iter().filter(|&&v| v > cut).map(|v| v - cut).collect();
    let theta0 = if tail.len() >= 10 { stats::mean(&tail).max(1e-2) } else { 1.0 };
    let frac = tail.len() as f64 / samples.len() as f64;
    let lambda0 = (-(1.0 - (frac * (5.0 * s0 / theta0).exp()).min(0.99)).ln()).max(1e-4);

    let problem = HistogramProblem {
        edges,
        counts,
        total: samples.len() as f64,
    };
    let bounds = Bounds {
        lower: vec![0.0, 1e-3, 1e-4],
        upper: vec![5.0, 1e3, 1e3],
    };
    let x0 = [lambda0, theta0, s0];
    let opts = LmOptions {
        max_iters: 300,
        ..LmOptions::default()
    };
    let res = optim::minimize(&problem, &x0, Some(&bounds), &opts);
    let [lambda, theta, s] = [res.params[0], res.params[1], res.params[2]];
    let mu = problem.expected(&res.params);
    let log_likelihood = poisson_log_likelihood(&problem.counts, &mu);
    let cov = (res.jacobian.transpose() * &res.jacobian).pseudo_inverse(1e-14).ok();
    let se = |i: usize, scale: f64| {
        cov.as_ref()
            .map(|c| c[(i, i)].max(0.0).sqrt() * scale)
            .unwrap_or(f64::NAN)
    };
    let report = BackgroundFitReport {
        converged: res.converged(),
        iterations: res.iterations,
        log_likelihood,
        deviance: res.cost,
        n_bins: problem.counts.len(),
        uncertainties: [se(0, 1.0), se(1, nominal_gain), se(2, nominal_gain)],
        trace: vec![x0, [lambda, theta, s]],
    };
    if !res.converged() {
        return Err(Error::NonConvergence {
            what: "background histogram fit",
            iterations: res.iterations,
            last_change: res.cost,
        });
    }
    Ok(BackgroundFit {
        sigma_b: (s * s + 2.0 * lambda * theta * theta).sqrt(),
        g: theta * nominal_gain,
        spurious_rate: lambda,
        sigma_ro: s * nominal_gain,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrBin {
    /// Mean signal of the pixels in the bin (baseline removed).
    pub signal: f64,
    /// Pooled rms noise.
    pub rms: f64,
    /// Standard error of `rms`.
    pub stderr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrCurve {
    pub bins: Vec<SnrBin>,
}

/// Per-pixel mean and standard deviation over each stack of co-registered
/// frames, pooled into signal bins of width `bin_width` centred on its
/// multiples. `baseline` is subtracted from the pixel means.
pub fn estimate_snr_curve(stacks: &[Vec<Vec<f64>>], baseline: f64, bin_width: f64) -> Result<SnrCurve> {
    if !(bin_width > 0.0) {
        return Err(invalid("bin width must be positive"));
    }
    let mut pixels: Vec<(f64, f64)> = Vec::new();
    for (k, stack) in stacks.iter().enumerate() {
        if stack.len() < 2 {
            return Err(invalid(format!("stack {k} has fewer than two frames")));
        }
        let n_px = stack[0].len();
        if stack.iter().any(|f| f.len() != n_px) {
            return Err(invalid(format!("stack {k} mixes frame sizes")));
        }
        let nf = stack.len() as f64;
        for i in 0..n_px {
            let m = stack.iter().map(|f| f[i]).sum::<f64>() / nf;
            let v = stack.iter().map(|f| (f[i] - m).powi(2)).sum::<f64>() / (nf - 1.0);
            pixels.push((m - baseline, v));
        }
    }
    let mut groups: std::collections::BTreeMap<i64, Vec<(f64, f64)>> = Default::default();
    for (m, v) in pixels {
        groups.entry((m / bin_width).round() as i64).or_default().push((m, v));
    }
    let bins = groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let signal = g.iter().map(|p| p.0).sum::<f64>() / n;
            let var = g.iter().map(|p| p.1).sum::<f64>() / n;
            let rms = var.sqrt();
            let spread = if g.len() > 1 {
                (g.iter().map(|p| (p.1 - var).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                var
            };
            let stderr = if rms > 0.0 { spread / n.sqrt() / (2.0 * rms) } else { 0.0 };
            SnrBin {
                signal,
                rms,
                stderr,
                count: g.len(),
            }
        })
        .collect();
    Ok(SnrCurve { bins })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_background_rms() {
        let p = NoiseParams::default();
        assert!((p.sigma_b - 0.6).abs() < 1e-3, "{}", p.sigma_b);
        assert_eq!(p.c2, 0.0);
        assert!((p.c1 - std::f64::consts::SQRT_2).abs() < 1e-15);
        p.validate().unwrap();
    }

    #[test]
    fn sigma_model_values() {
        let mut p = NoiseParams::default();
        assert_eq!(sigma_model(0.0, &p), p.sigma_b);
        p.sigma_b = 0.6;
        assert!((sigma_model(1300.0, &p) - (0.36f64 + 2600.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn total_variance_matches_compact_law() {
        let p = NoiseParams::default();
        for s in [0.0, 3.0, 1300.0] {
            let a = total_variance(s, &p);
            let b = sigma_model(s, &p).powi(2);
            assert!((a - b).abs() < 1e-12 * b.max(1.0));
        }
        let zero = NoiseParams::from_channels(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, true);
        assert_eq!(total_variance(0.0, &zero), 0.0);
    }

    #[test]
    fn emg_cdf_matches_quadrature() {
        let (theta, s) = (1.3, 0.2);
        let density = |y: f64| {
            quadrature::integrate(
                &|u: f64| {
                    (-u / theta).exp() / theta * (-(y - u).powi(2) / (2.0 * s * s)).exp()
                        / (s * (2.0 * std::f64::consts::PI).sqrt())
                },
                0.0,
                y + 12.0 * s + 40.0,
                1e-12,
            )
        };
        let y = 0.7;
        let cdf = quadrature::integrate(&density, -3.0, y, 1e-10);
        assert!((compound_cdf(1, theta, s, y) - cdf).abs() < 1e-7);
        // the Gauss–Hermite branch agrees on the same term
        let gh: f64 = {
            let rule = quadrature::gh40();
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .map(|(t, w)| {
                    let u = (y - std::f64::consts::SQRT_2 * s * t) / theta;
                    if u <= 0.0 { 0.0 } else { w * gamma_lr(1.0, u) }
                })
                .sum::<f64>()
                / std::f64::consts::PI.sqrt()
        };
        assert!((gh - cdf).abs() < 1e-4);
    }

    #[test]
    fn snr_rejects_short_stacks() {
        assert!(estimate_snr_curve(&[vec![vec![1.0, 2.0]]], 0.0, 1.0).is_err());
        let c = estimate_snr_curve(&[vec![vec![1.0, 2.0]; 3]], 0.0, 1.0).unwrap();
        assert!(c.bins.iter().all(|b| b.rms == 0.0));
    }
}
