use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::stats::normal_cdf;

/// Mixture of equidistant Gaussian peaks (one per atom number `m ≥ 1`, mean
/// `m·spacing`, width `w_1 √m`) and a uniform background standing for
/// partially lost atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonHistogramModel {
    pub peak_spacing: f64,
    /// `peak_widths[m - 1]` is the rms of the `m`-atom peak.
    pub peak_widths: Vec<f64>,
    /// `abundances[m - 1]` is the weight of the `m`-atom peak.
    pub abundances: Vec<f64>,
    pub background_weight: f64,
    /// Uniform density support.
    pub background_range: (f64, f64),
    /// NaN (serialized as null) when the model was not fitted.
    #[serde(default = "unfitted", deserialize_with = "nan_if_null")]
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn unfitted() -> f64 {
    f64::NAN
}

fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(<Option<f64> as serde::Deserialize>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl PhotonHistogramModel {
    /// Model with given peaks and no background, over `m = 1..=abundances.len()`.
    pub fn new(peak_spacing: f64, w1: f64, abundances: Vec<f64>, background_weight: f64, background_range: (f64, f64)) -> Result<Self> {
        if !(peak_spacing > 0.0) || !(w1 > 0.0) {
            return Err(invalid("peak spacing and width must be positive"));
        }
        if abundances.is_empty() {
            return Err(invalid("at least one peak required"));
        }
        let widths = (1..=abundances.len()).map(|m| w1 * (m as f64).sqrt()).collect();
        Ok(PhotonHistogramModel {
            peak_spacing,
            peak_widths: widths,
            abundances,
            background_weight,
            background_range,
            log_likelihood: f64::NAN,
            iterations: 0,
            converged: true,
        })
    }

    pub fn max_atoms(&self) -> usize {
        self.abundances.len()
    }

    pub fn w1(&self) -> f64 {
        self.peak_widths[0]
    }

    fn background_density(&self, x: f64) -> f64 {
        let (lo, hi) = self.background_range;
        if x >= lo && x <= hi && hi > lo {
            1.0 / (hi - lo)
        } else {
            0.0
        }
    }

    /// Weighted component densities, index 0 the background.
    fn components(&self, x: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.abundances.len() + 1);
        out.push(self.background_weight * self.background_density(x));
        for (i, (&a, &w)) in self.abundances.iter().zip(&self.peak_widths).enumerate() {
            let mu = (i + 1) as f64 * self.peak_spacing;
            let z = (x - mu) / w;
            out.push(a * (-0.5 * z * z).exp() / (w * (2.0 * std::f64::consts::PI).sqrt()));
        }
        out
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components(x).iter().sum()
    }

    /// Posterior probabilities of `H_0..H_M` at `x`.
    pub fn posterior(&self, x: f64) -> Vec<f64> {
        let c = self.components(x);
        let total: f64 = c.iter().sum();
        if total <= 0.0 || !total.is_finite() {
            let mut out = vec![0.0; c.len()];
            out[0] = 1.0;
            return out;
        }
        c.into_iter().map(|v| v / total).collect()
    }

    /// Weighted probability mass of component `j` (0 = background) in `[lo, hi]`.
    fn mass(&self, j: usize, lo: f64, hi: f64) -> f64 {
        if j == 0 {
            let (a, b) = self.background_range;
            let overlap = (hi.min(b) - lo.max(a)).max(0.0);
            if b > a {
                self.background_weight * overlap / (b - a)
            } else {
                0.0
            }
        } else {
            let mu = j as f64 * self.peak_spacing;
            let w = self.peak_widths[j - 1];
            self.abundances[j - 1] * (normal_cdf((hi - mu) / w) - normal_cdf((lo - mu) / w))
        }
    }

    /// Acceptance interval for `H_m` at posterior level `t`: the connected
    /// set around the peak where `P(H_m | x) ≥ t`.
    fn level_interval(&self, m: usize, t: f64) -> Option<(f64, f64)> {
        let mu = m as f64 * self.peak_spacing;
        let w = self.peak_widths[m - 1];
        let post = |x: f64| self.posterior(x)[m];
        if post(mu) < t {
            return None;
        }
        let edge = |dir: f64| {
            let step = w / 50.0;
            let mut inside = mu;
            let mut k = 1;
            loop {
                let x = mu + dir * step * k as f64;
                if post(x) < t || k > 50 * 20 {
                    let (mut a, mut b) = (inside, x);
                    for _ in 0..60 {
                        let c = 0.5 * (a + b);
                        if post(c) >= t {
                            a = c;
                        } else {
                            b = c;
                        }
                    }
                    return a;
                }
                inside = x;
                k += 1;
            }
        };
        Some((edge(-1.0), edge(1.0)))
    }

    /// `P(H_m | R)` for interval `R`.
    fn precision(&self, m: usize, lo: f64, hi: f64) -> f64 {
        let own = self.mass(m, lo, hi);
        let all: f64 = (0..=self.abundances.len()).map(|j| self.mass(j, lo, hi)).sum();
        if all > 0.0 {
            own / all
        } else {
            0.0
        }
    }

    /// Widest acceptance intervals with `P(H_m | R_m) ≥ min_confidence`,
    /// one per resolvable hypothesis. Pointwise posterior never drops below
    /// one half inside a region, so regions are disjoint.
    pub fn acceptance_regions(&self, min_confidence: f64) -> Vec<AcceptanceRegion> {
        let mut out = Vec::new();
        for m in 1..=self.abundances.len() {
            let mu = m as f64 * self.peak_spacing;
            let top = self.posterior(mu)[m];
            if top < min_confidence || top < 0.5 {
                continue;
            }
            let ok = |t: f64| {
                self.level_interval(m, t)
                    .map(|(a, b)| self.precision(m, a, b) >= min_confidence)
                    .unwrap_or(false)
            };
            let (mut lo, mut hi) = (0.5, top);
            if !ok(lo) {
                if !ok(hi) {
                    continue;
                }
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if ok(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                lo = hi;
            }
            if let Some((a, b)) = self.level_interval(m, lo) {
                let own_total = self.abundances[m - 1];
                out.push(AcceptanceRegion {
                    m,
                    lo: a,
                    hi: b,
                    level: lo,
                    p_region_given_h: if own_total > 0.0 {
                        self.mass(m, a, b) / own_total
                    } else {
                        0.0
                    },
                    p_h_given_region: self.precision(m, a, b),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRegion {
    pub m: usize,
    pub lo: f64,
    pub hi: f64,
    /// Pointwise posterior level bounding the region.
    pub level: f64,
    pub p_region_given_h: f64,
    pub p_h_given_region: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub m: usize,
    /// Posterior probability of `m` at the observed total.
    pub confidence: f64,
    pub accepted: bool,
}

/// Atom number for an integrated total. Totals outside every acceptance
/// region are rejected and reported with the most probable hypothesis.
pub fn count_atoms(total: f64, model: &PhotonHistogramModel, min_confidence: f64) -> CountResult {
    let post = model.posterior(total);
    for r in model.acceptance_regions(min_confidence) {
        if total >= r.lo && total <= r.hi {
            return CountResult {
                m: r.m,
                confidence: post[r.m],
                accepted: true,
            };
        }
    }
    let (m, &c) = post
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    CountResult {
        m,
        confidence: c,
        accepted: false,
    }
}

const MAX_PEAKS: usize = 12;
/// Criterion difference below which two fits count as equally good.
const LL_TIE: f64 = 2.0;

/// Log-likelihood penalized by half a log sample size per free parameter
/// (spacing, width, background and one weight per peak).
fn penalized(model: &PhotonHistogramModel, n: usize) -> f64 {
    model.log_likelihood - 0.5 * (model.max_atoms() + 3) as f64 * (n as f64).ln()
}

fn em(totals: &[f64], spacing: f64, w1: f64, n_peaks: usize, range: (f64, f64), max_iters: usize, tol: f64) -> PhotonHistogramModel {
    let mut model = PhotonHistogramModel {
        peak_spacing: spacing,
        peak_widths: (1..=n_peaks).map(|m| w1 * (m as f64).sqrt()).collect(),
        abundances: vec![0.9 / n_peaks as f64; n_peaks],
        background_weight: 0.1,
        background_range: range,
        log_likelihood: f64::NEG_INFINITY,
        iterations: 0,
        converged: false,
    };
    let k = n_peaks + 1;
    let mut resp_sum = vec![0.0; k];
    for it in 0..max_iters {
        resp_sum.iter_mut().for_each(|v| *v = 0.0);
        let (mut sx, mut sm) = (0.0, 0.0);
        let mut ll = 0.0;
        let mut resp = Vec::with_capacity(totals.len());
        for &x in totals {
            let c = model.components(x);
            let total: f64 = c.iter().sum();
            let total = total.max(1e-300);
            ll += total.ln();
            let r: Vec<f64> = c.iter().map(|v| v / total).collect();
            for (j, rj) in r.iter().enumerate() {
                resp_sum[j] += rj;
                if j > 0 {
                    sx += rj * x;
                    sm += rj * j as f64;
                }
            }
            resp.push(r);
        }
        let d = if sm > 0.0 { sx / sm } else { model.peak_spacing };
        let mut sw = 0.0;
        let mut norm = 0.0;
        for (x, r) in totals.iter().zip(&resp) {
            for (j, rj) in r.iter().enumerate().skip(1) {
                sw += rj * (x - j as f64 * d).powi(2) / j as f64;
                norm += rj;
            }
        }
        let n = totals.len() as f64;
        model.background_weight = resp_sum[0] / n;
        for j in 1..k {
            model.abundances[j - 1] = resp_sum[j] / n;
        }
        model.peak_spacing = d.max(1e-9);
        let w = if norm > 0.0 { (sw / norm).sqrt() } else { w1 };
        let w = w.max(1e-6 * model.peak_spacing);
        model.peak_widths = (1..=n_peaks).map(|m| w * (m as f64).sqrt()).collect();
        let prev = model.log_likelihood;
        model.log_likelihood = ll;
        model.iterations = it + 1;
        if prev.is_finite() && (ll - prev).abs() <= tol * ll.abs().max(1.0) {
            model.converged = true;
            break;
        }
    }
    model
}

/// Maximum-likelihood mixture fit by expectation maximization. Several
/// starting spacings are tried and compared by likelihood penalized per
/// peak; among equally good fits the widest spacing wins, since halving
/// the spacing and emptying odd peaks describes the same data.
pub fn fit_photon_histogram(totals: &[f64]) -> Result<PhotonHistogramModel> {
    if totals.len() < 500 {
        return Err(invalid(format!("need at least 500 totals, got {}", totals.len())));
    }
    if totals.iter().any(|v| !v.is_finite()) {
        return Err(invalid("totals must be finite"));
    }
    let mut sorted = totals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hi = *sorted.last().unwrap();
    let lo = sorted[0].min(0.0);
    if !(hi > 0.0) {
        return Err(invalid("totals contain no signal"));
    }
    let q = |f: f64| sorted[((sorted.len() - 1) as f64 * f) as usize];
    let mut candidates = Vec::new();
    for f in [0.25, 0.5, 0.75] {
        let base = q(f);
        if base <= 0.0 {
            continue;
        }
        for k in 1..=4 {
            candidates.push(base / k as f64);
        }
    }
    let mut fits: Vec<PhotonHistogramModel> = candidates
        .iter()
        .map(|&d| {
            let n_peaks = ((hi / d).round() as usize).clamp(1, MAX_PEAKS);
            em(totals, d, 0.25 * d, n_peaks, (lo, hi), 40, 0.0)
        })
        .collect();
    let n = totals.len();
    let best = fits.iter().map(|f| penalized(f, n)).fold(f64::NEG_INFINITY, f64::max);
    fits.retain(|f| penalized(f, n) >= best - LL_TIE);
    let start = fits
        .into_iter()
        .max_by(|a, b| a.peak_spacing.total_cmp(&b.peak_spacing))
        .ok_or_else(|| invalid("no starting point"))?;
    let n_peaks = ((hi / start.peak_spacing).round() as usize).clamp(1, MAX_PEAKS);
    let mut model = em(totals, start.peak_spacing, start.w1(), n_peaks, (lo, hi), 5000, 1e-10);
    // an equally good fit at a multiple of the spacing may still be hidden
    // behind partly emptied peaks
    for j in [4usize, 3, 2] {
        let d = j as f64 * model.peak_spacing;
        if d > hi {
            continue;
        }
        let n_peaks = ((hi / d).round() as usize).clamp(1, MAX_PEAKS);
        let wider = em(totals, d, model.w1() * (j as f64).sqrt(), n_peaks, (lo, hi), 5000, 1e-10);
        if wider.converged && penalized(&wider, n) >= penalized(&model, n) - LL_TIE {
            model = wider;
            break;
        }
    }
    if !model.converged {
        return Err(Error::NonConvergence {
            what: "photon histogram fit",
            iterations: model.iterations,
            last_change: f64::NAN,
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PhotonHistogramModel {
        PhotonHistogramModel::new(1300.0, 60.0, vec![0.5, 0.3, 0.1, 0.05, 0.03, 0.02], 0.05, (0.0, 8000.0)).unwrap()
    }

    #[test]
    fn posterior_sums_to_one() {
        let m = model();
        for x in [0.0, 650.0, 1300.0, 5000.0] {
            let p: f64 = m.posterior(x).iter().sum();
            assert!((p - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn peak_centre_is_accepted() {
        let m = model();
        let c = count_atoms(1300.0, &m, 0.99);
        assert_eq!(c.m, 1);
        assert!(c.accepted);
        let z = count_atoms(0.0, &m, 0.99);
        assert!(!z.accepted);
    }

    #[test]
    fn regions_are_disjoint_and_meet_confidence() {
        let m = model();
        let regions = m.acceptance_regions(0.95);
        for r in &regions {
            assert!(r.p_h_given_region >= 0.95 - 1e-9);
        }
        for w in regions.windows(2) {
            assert!(w[0].hi <= w[1].lo);
        }
    }
}
