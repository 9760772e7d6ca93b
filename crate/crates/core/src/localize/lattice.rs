use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::fit::{fit_discrete, objective, AmplitudeBounds, Discrete, FitInput};
use super::AtomEstimate;
use crate::error::{invalid, Error, Result};
use crate::imaging::LatticeModel;
use crate::stats::chi2_sf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    /// Lowest accepted χ² upper-tail probability.
    pub reject_below: f64,
    /// Hold the lattice offset at the calibrated `delta_l` instead of
    /// fitting it per region.
    pub known_offset: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            reject_below: 1e-3,
            known_offset: false,
        }
    }
}

/// All distance vectors within ±1 of `rounded`, each at least one site.
fn combinations(rounded: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for &d in rounded {
        let mut next = Vec::with_capacity(out.len() * 3);
        for prefix in &out {
            for c in [d - 1, d, d + 1] {
                if c >= 1 {
                    let mut v = prefix.clone();
                    v.push(c);
                    next.push(v);
                }
            }
        }
        out = next;
    }
    out
}

fn sites_from(p0: i64, distances: &[i64]) -> Vec<i64> {
    let mut sites = vec![p0];
    for d in distances {
        sites.push(sites.last().unwrap() + d);
    }
    sites
}

struct Candidate {
    sites: Vec<i64>,
    delta: f64,
    amplitudes: Vec<f64>,
    chi2: f64,
    nll: f64,
    converged: bool,
    pinned: Vec<usize>,
    deviation: f64,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    let tol = 1e-9 * a.nll.abs().max(b.nll.abs()).max(1.0);
    if (a.nll - b.nll).abs() <= tol {
        a.deviation < b.deviation
    } else {
        a.nll < b.nll
    }
}

fn evaluate(
    input: &FitInput,
    sites: Vec<i64>,
    a_px: f64,
    fixed_delta: Option<f64>,
    xi_cont: &[f64],
    amps0: &[f64],
    bounds: &AmplitudeBounds,
) -> Candidate {
    let delta0 = fixed_delta.unwrap_or_else(|| {
        xi_cont.iter().zip(&sites).map(|(x, &s)| x - a_px * s as f64).sum::<f64>() / sites.len() as f64
    });
    let problem = Discrete {
        parts: vec![(*input, sites.clone())],
        a_px,
        fixed_delta,
    };
    let (res, b) = fit_discrete(&problem, delta0, amps0, bounds);
    let (xi, amps) = problem.unpack(&res.params).remove(0);
    let (chi2, logdet) = objective(input, &xi, &amps);
    let off = usize::from(fixed_delta.is_none());
    Candidate {
        deviation: xi.iter().zip(xi_cont).map(|(a, b)| (a - b).abs()).sum(),
        delta: fixed_delta.unwrap_or(res.params[0]),
        pinned: res.pinned(&b, 1e-9).into_iter().filter(|&i| i >= off).map(|i| i - off).collect(),
        sites,
        amplitudes: amps,
        chi2,
        nll: chi2 + logdet,
        converged: res.converged(),
    }
}

fn to_estimate(input: &FitInput, c: Candidate, lattice: &LatticeModel, opts: &RefineOptions) -> AtomEstimate {
    let a = lattice.a_px;
    let k = ((c.delta - lattice.delta_l) / a).round() as i64;
    let delta = c.delta - k as f64 * a;
    let p: Vec<i64> = c.sites.iter().map(|s| s + k).collect();
    let m = p.len();
    let dof = input.len().saturating_sub(m + 1);
    let p_value = chi2_sf(c.chi2, dof);
    AtomEstimate {
        xi: p.iter().map(|&s| delta + a * s as f64).collect(),
        p,
        amplitudes: c.amplitudes,
        chi2: c.chi2,
        dof,
        p_value,
        nll: c.nll,
        accepted: c.converged && p_value >= opts.reject_below,
        delta_l: Some(delta),
        converged: c.converged,
        pinned: c.pinned,
        order_violation: false,
    }
}

fn rounded_distances(xi: &[f64], a_px: f64) -> Vec<i64> {
    xi.windows(2).map(|w| (((w[1] - w[0]) / a_px).round() as i64).max(1)).collect()
}

fn best_for(
    input: &FitInput,
    est: &AtomEstimate,
    a_px: f64,
    anchors: &[i64],
    fixed_delta: Option<f64>,
    bounds: &AmplitudeBounds,
) -> Result<Candidate> {
    let rounded = rounded_distances(&est.xi, a_px);
    let mut best: Option<Candidate> = None;
    for &p0 in anchors {
        for d in combinations(&rounded) {
            let c = evaluate(input, sites_from(p0, &d), a_px, fixed_delta, &est.xi, &est.amplitudes, bounds);
            if !c.nll.is_finite() {
                continue;
            }
            if best.as_ref().is_none_or(|b| better(&c, b)) {
                best = Some(c);
            }
        }
    }
    best.ok_or_else(|| Error::NonConvergence {
        what: "lattice refinement",
        iterations: 0,
        last_change: f64::NAN,
    })
}

fn check(est: &AtomEstimate, lattice: &LatticeModel, input: &FitInput) -> Result<()> {
    if est.xi.is_empty() {
        return Err(invalid("estimate has no emitters"));
    }
    if est.xi.len() != est.amplitudes.len() {
        return Err(invalid("positions and amplitudes differ in length"));
    }
    if !(lattice.a_px > 0.0) {
        return Err(invalid("lattice constant must be positive"));
    }
    if input.len() <= est.xi.len() + 1 {
        return Err(invalid("region too short for refinement"));
    }
    Ok(())
}

/// Places the emitters of a continuous estimate on lattice sites.
///
/// Every distance vector within ±1 site of the rounded continuous one
/// (no shared sites) is refitted over amplitudes and the lattice offset;
/// the maximum-likelihood vector wins, ties going to the one closest to
/// the continuous positions. The result is accepted when its χ² tail
/// probability is at least `reject_below`.
///
/// With `known_offset` the offset stays at `lattice.delta_l` and the first
/// emitter may move by one site, so three times as many vectors are tried.
pub fn lattice_refine(
    input: &FitInput,
    est: &AtomEstimate,
    lattice: &LatticeModel,
    bounds: &AmplitudeBounds,
    opts: &RefineOptions,
) -> Result<AtomEstimate> {
    check(est, lattice, input)?;
    let p0 = lattice.nearest_site(est.xi[0]);
    let best = if opts.known_offset {
        best_for(input, est, lattice.a_px, &[p0 - 1, p0, p0 + 1], Some(lattice.delta_l), bounds)?
    } else {
        best_for(input, est, lattice.a_px, &[p0], None, bounds)?
    };
    Ok(to_estimate(input, best, lattice, opts))
}

/// Refinement of all regions of one frame with a single lattice offset.
/// Each region is first refined on its own; the offset is then fitted
/// jointly, site assignments re-chosen at that offset, and the joint fit
/// repeated.
pub fn lattice_refine_shared(
    parts: &[(FitInput, AtomEstimate)],
    lattice: &LatticeModel,
    bounds: &AmplitudeBounds,
    opts: &RefineOptions,
) -> Result<Vec<AtomEstimate>> {
    if parts.is_empty() {
        return Ok(Vec::new());
    }
    for (input, est) in parts {
        check(est, lattice, input)?;
    }
    let a = lattice.a_px;
    let mut sites: Vec<Vec<i64>> = Vec::new();
    let mut amps: Vec<f64> = Vec::new();
    let mut deltas = Vec::new();
    for (input, est) in parts {
        let p0 = lattice.nearest_site(est.xi[0]);
        let c = best_for(input, est, a, &[p0], None, bounds)?;
        let e = to_estimate(input, c, lattice, opts);
        deltas.push(e.delta_l.unwrap());
        sites.push(e.p);
        amps.extend(e.amplitudes);
    }
    // circular mean of the per-region offsets
    let (s, c) = deltas.iter().fold((0.0, 0.0), |(s, c), d| {
        let ph = 2.0 * PI * (d - lattice.delta_l) / a;
        (s + ph.sin(), c + ph.cos())
    });
    let delta0 = lattice.delta_l + s.atan2(c) * a / (2.0 * PI);

    let joint = |sites: &[Vec<i64>], amps: &[f64], delta0: f64| {
        let problem = Discrete {
            parts: parts.iter().zip(sites).map(|((inp, _), s)| (*inp, s.clone())).collect(),
            a_px: a,
            fixed_delta: None,
        };
        let (res, _) = fit_discrete(&problem, delta0, amps, bounds);
        (res.params[0], res.converged())
    };
    let (delta, _) = joint(&sites, &amps, delta0);

    let mut chosen = Vec::new();
    for (input, est) in parts {
        let p0 = ((est.xi[0] - delta) / a).round() as i64;
        chosen.push(best_for(input, est, a, &[p0 - 1, p0, p0 + 1], Some(delta), bounds)?);
    }
    let sites: Vec<Vec<i64>> = chosen.iter().map(|c| c.sites.clone()).collect();
    let amps: Vec<f64> = chosen.iter().flat_map(|c| c.amplitudes.clone()).collect();
    let (delta, converged) = joint(&sites, &amps, delta);

    let mut out = Vec::new();
    for ((input, est), s) in parts.iter().zip(sites) {
        let mut c = evaluate(input, s, a, Some(delta), &est.xi, &est.amplitudes, bounds);
        c.converged &= converged;
        out.push(to_estimate(input, c, lattice, opts));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeCalibration {
    pub lattice: LatticeModel,
    /// rms deviation of the distances from integer multiples (pixels).
    pub residual_spread: f64,
    /// Phase coherence `|⟨e^{i2πd/a}⟩|` at the fitted constant.
    pub coherence: f64,
    pub n_samples: usize,
}

const SCAN_LO: f64 = 1.0;
const SCAN_HI: f64 = 2.0;
const SCAN_STEP: f64 = 1e-4;
const MIN_COHERENCE: f64 = 0.5;

fn coherence(distances: &[f64], a: f64) -> f64 {
    let (s, c) = distances.iter().fold((0.0, 0.0), |(s, c), d| {
        let ph = 2.0 * PI * d / a;
        (s + ph.sin(), c + ph.cos())
    });
    (s * s + c * c).sqrt() / distances.len() as f64
}

/// Lattice constant in pixels as the common divisor of emitter distances:
/// a coherence scan over `[1, 2]` px followed by least-squares refinement
/// with the integer multiples held fixed.
pub fn calibrate_lattice(distances: &[f64], a_nm: f64) -> Result<LatticeCalibration> {
    if distances.len() < 100 {
        return Err(invalid(format!(
            "need at least 100 distances, got {}",
            distances.len()
        )));
    }
    if distances.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(invalid("distances must be positive and finite"));
    }
    let n_steps = ((SCAN_HI - SCAN_LO) / SCAN_STEP).round() as usize;
    let (mut best_a, mut best_r) = (SCAN_LO, -1.0);
    for i in 0..=n_steps {
        let a = SCAN_LO + i as f64 * SCAN_STEP;
        let r = coherence(distances, a);
        if r > best_r {
            best_a = a;
            best_r = r;
        }
    }
    if best_r < MIN_COHERENCE {
        return Err(Error::NoLatticeConstant {
            lo: SCAN_LO,
            hi: SCAN_HI,
            coherence: best_r,
        });
    }
    let mut a = best_a;
    for _ in 0..20 {
        let (num, den) = distances.iter().fold((0.0, 0.0), |(n, d), &x| {
            let k = (x / a).round();
            (n + x * k, d + k * k)
        });
        if den == 0.0 {
            break;
        }
        let next = num / den;
        if (next - a).abs() < 1e-15 {
            a = next;
            break;
        }
        a = next;
    }
    let spread = (distances
        .iter()
        .map(|&x| (x - (x / a).round() * a).powi(2))
        .sum::<f64>()
        / distances.len() as f64)
        .sqrt();
    Ok(LatticeCalibration {
        lattice: LatticeModel::new(a, 0.0, a_nm)?,
        residual_spread: spread,
        coherence: coherence(distances, a),
        n_samples: distances.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_count() {
        assert_eq!(combinations(&[1, 1, 1]).len(), 8);
        assert_eq!(combinations(&[3, 4, 5]).len(), 27);
        assert!(combinations(&[1, 2, 3]).iter().all(|c| c.iter().all(|&d| d >= 1)));
    }

    #[test]
    fn exact_multiples_have_zero_spread() {
        let d: Vec<f64> = (0..200).map(|i| 1.47 * (1 + i % 9) as f64).collect();
        let cal = calibrate_lattice(&d, 433.0).unwrap();
        assert!((cal.lattice.a_px - 1.47).abs() < 1e-12);
        assert!(cal.residual_spread < 1e-12);
    }

    #[test]
    fn too_few_distances_rejected() {
        assert!(calibrate_lattice(&[1.47; 50], 433.0).is_err());
    }
}
