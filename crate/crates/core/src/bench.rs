//! Benchmarks: success rates for resolving four-atom chains at spacings
//! from one to nine sites, and single-emitter precision versus photon
//! number.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::{integrate_transverse, simulate_exposure, AtomConfig, FrameSpec, LatticeModel, Optics};
use crate::localize::{
    baseline_corrected, fit_region, lattice_refine, precision_bound, segment_rois, AmplitudeBounds, SegmentOptions, AnalyzeOptions,
    FitInput,
};
use crate::lsf::ResponseLsf;
use crate::noise::NoiseParams;
use crate::rng;
use crate::stats;
use crate::wavefront::{lsf_from_wavefront, LsfGrid, ZernikeWavefront};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Discrete,
    ContinuousTrueLsf,
    ContinuousGaussianLsf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Discrete, Method::ContinuousTrueLsf, Method::ContinuousGaussianLsf];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Discrete => "discrete",
            Method::ContinuousTrueLsf => "continuous_true_lsf",
            Method::ContinuousGaussianLsf => "continuous_gaussian_lsf",
        }
    }
}

/// Shared inputs of a benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub optics: Optics,
    pub noise: NoiseParams,
    pub lattice: LatticeModel,
    pub frame: FrameSpec,
    pub wavefront: ZernikeWavefront,
    pub analysis: AnalyzeOptions,
    /// Photoelectrons per atom per exposure.
    pub amplitude: f64,
    pub atoms: usize,
    pub spacings: Vec<i64>,
    pub frames: usize,
    /// Photon numbers of the precision sweep.
    pub photon_counts: Vec<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            optics: Optics::default(),
            noise: NoiseParams::default(),
            lattice: LatticeModel::default(),
            frame: FrameSpec {
                n_cols: 256,
                ..FrameSpec::default()
            },
            wavefront: ZernikeWavefront::reference(),
            analysis: AnalyzeOptions {
                segment: SegmentOptions {
                    guard_px: 48.0,
                    ..SegmentOptions::default()
                },
                ..AnalyzeOptions::default()
            },
            amplitude: 1300.0,
            atoms: 4,
            spacings: (1..=9).collect(),
            frames: 1000,
            photon_counts: vec![100.0, 200.0, 400.0, 800.0, 1300.0, 2600.0, 5200.0, 10400.0],
        }
    }
}

/// Optical and pixel-integrated responses used by the benchmarks.
#[derive(Debug, Clone)]
pub struct Responses {
    pub optical: ResponseLsf,
    pub ccd: ResponseLsf,
    /// Least-squares Gaussian stand-in for `ccd`, itself pixel-integrated.
    pub gaussian_ccd: ResponseLsf,
    pub gaussian_sigma_px: f64,
}

impl Responses {
    pub fn from_wavefront(w: &ZernikeWavefront, optics: &Optics) -> Result<Self> {
        let grid = LsfGrid::centered(8, (10.0 * optics.abbe_radius_px()).ceil() as usize, optics.delta_s_um);
        let optical = lsf_from_wavefront(w, &grid)?;
        Self::from_optical(optical, optics)
    }

    pub fn from_optical(optical: ResponseLsf, optics: &Optics) -> Result<Self> {
        let ccd = optical.convolve_box(optics.aperture_px());
        let (_, hi) = ccd.support();
        let half = hi.floor();
        let gauss = |sigma: f64| -> Result<ResponseLsf> {
            Ok(ResponseLsf::gaussian(sigma, ccd.s(), half, optics.delta_s_um)?.convolve_box(optics.aperture_px()))
        };
        let cost = |sigma: f64| -> f64 {
            match gauss(sigma) {
                Ok(g) => ccd
                    .coords()
                    .iter()
                    .zip(ccd.samples())
                    .map(|(&x, &y)| (g.eval(x + ccd.centroid() - g.centroid()) - y).powi(2))
                    .sum(),
                Err(_) => f64::INFINITY,
            }
        };
        let (mut a, mut b) = (0.3, 15.0);
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let c = b - phi * (b - a);
            let d = a + phi * (b - a);
            if cost(c) < cost(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let sigma = 0.5 * (a + b);
        let g = gauss(sigma)?;
        let gaussian_ccd = g.recentered(ccd.centroid() - g.centroid());
        Ok(Responses {
            optical,
            ccd,
            gaussian_ccd,
            gaussian_sigma_px: sigma,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig7Row {
    pub separation_sites: i64,
    pub method: Method,
    pub success_rate: f64,
    pub stderr: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig7Report {
    pub rows: Vec<Fig7Row>,
    pub warnings: Vec<String>,
}

impl Fig7Report {
    pub fn rate(&self, spacing: i64, method: Method) -> Option<&Fig7Row> {
        self.rows.iter().find(|r| r.separation_sites == spacing && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("separation_sites,method,success_rate,stderr,n_frames\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                r.separation_sites,
                r.method.name(),
                r.success_rate,
                r.stderr,
                r.n_frames
            ));
        }
        out
    }
}

/// Stream index of frame `frame` at spacing `spacing`.
fn stream(tag: u64, spacing: i64, frame: usize) -> u64 {
    (tag << 56) ^ ((spacing as u64) << 32) ^ frame as u64
}

/// Per-method success for one simulated chain.
pub fn fig7_frame(cfg: &BenchConfig, resp: &Responses, spacing: i64, frame: usize, seed: u64) -> Result<[bool; 3]> {
    let mut r = rng::frame_rng(seed, stream(1, spacing, frame));
    let a = cfg.lattice.a_px;
    let delta_l = rng::uniform(&mut r, 0.0, a);
    let lattice = LatticeModel::new(a, delta_l, cfg.lattice.a_nm)?;
    let span = spacing * (cfg.atoms as i64 - 1);
    let centre = 0.5 * (cfg.frame.n_cols as f64 - 1.0);
    let first = ((centre - delta_l) / a).round() as i64 - span / 2;
    let sites: Vec<i64> = (0..cfg.atoms as i64).map(|k| first + k * spacing).collect();
    let config = AtomConfig::on_lattice(&sites, cfg.amplitude, &lattice)?;
    let img = simulate_exposure(&config, &resp.optical, &cfg.noise, &cfg.optics, &cfg.frame, &mut r)?;
    let profile = integrate_transverse(&img, 0..cfg.frame.n_rows)?;
    let (corrected, _) = baseline_corrected(&profile, &cfg.noise, &cfg.analysis.segment)?;
    let seg = segment_rois(&corrected, &cfg.noise, &cfg.analysis.segment);
    let lo = config.positions[0];
    let hi = *config.positions.last().unwrap();
    let hits: Vec<_> = seg
        .rois
        .iter()
        .filter(|roi| (roi.start_px as f64) <= hi && ((roi.start_px + roi.len()) as f64) > lo)
        .collect();
    if hits.is_empty() {
        return Ok([false; 3]);
    }
    let start = hits.iter().map(|r| r.range.start).min().unwrap();
    let end = hits.iter().map(|r| r.range.end).max().unwrap();
    let values = &corrected.values[start..end];
    let bounds = AmplitudeBounds::nominal(cfg.amplitude, &cfg.noise, end - start, corrected.n_perp);
    let target = vec![spacing; cfg.atoms - 1];
    let m = cfg.atoms;
    let input_for = |lsf| FitInput {
        values,
        start_px: (corrected.origin_px + start) as f64,
        n_perp: corrected.n_perp,
        lsf,
        noise: &cfg.noise,
    };
    let mut out = [false; 3];
    let input = input_for(&resp.ccd);
    if let Ok((est, _, _)) = fit_region(&input, m, cfg.analysis.band_limit, cfg.analysis.wiener_iters, &bounds) {
        out[1] = est.site_distances(a) == target;
        // a known offset stands for one calibrated on the rest of the frame
        let reference = if cfg.analysis.refine.known_offset {
            lattice
        } else {
            LatticeModel::new(a, 0.0, cfg.lattice.a_nm)?
        };
        if let Ok(d) = lattice_refine(&input, &est, &reference, &bounds, &cfg.analysis.refine) {
            out[0] = d.site_distances(a) == target;
        }
    }
    let input = input_for(&resp.gaussian_ccd);
    if let Ok((est, _, _)) = fit_region(&input, m, cfg.analysis.band_limit, cfg.analysis.wiener_iters, &bounds) {
        out[2] = est.site_distances(a) == target;
    }
    Ok(out)
}

fn binomial_stderr(p: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        (p * (1.0 - p) / n as f64).sqrt()
    }
}

/// Success rates of the three analysis methods per spacing.
pub fn run_benchmark_fig7(cfg: &BenchConfig, seed: u64) -> Result<Fig7Report> {
    if cfg.atoms < 2 {
        return Err(invalid("benchmark needs at least two atoms"));
    }
    if cfg.frames == 0 {
        return Err(invalid("frame count must be positive"));
    }
    let resp = Responses::from_wavefront(&cfg.wavefront, &cfg.optics)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for &spacing in &cfg.spacings {
        if spacing < 1 {
            return Err(invalid("spacings must be at least one site"));
        }
        let results: Vec<[bool; 3]> = (0..cfg.frames)
            .into_par_iter()
            .map(|f| fig7_frame(cfg, &resp, spacing, f, seed))
            .collect::<Result<_>>()?;
        for (k, method) in Method::ALL.iter().enumerate() {
            let n_ok = results.iter().filter(|r| r[k]).count();
            let rate = n_ok as f64 / cfg.frames as f64;
            rows.push(Fig7Row {
                separation_sites: spacing,
                method: *method,
                success_rate: rate,
                stderr: binomial_stderr(rate, cfg.frames),
                n_frames: cfg.frames,
            });
        }
    }
    if binomial_stderr(0.9, cfg.frames) > 0.01 {
        warnings.push(format!(
            "{} frames per point give a binomial standard error above 0.01 near 90% success",
            cfg.frames
        ));
    }
    Ok(Fig7Report { rows, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub n_photons: f64,
    pub rms_error_nm: f64,
    pub stderr_nm: f64,
    pub bound_nm: f64,
    pub bias_nm: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub rows: Vec<PrecisionRow>,
    /// Log-log slope of the empirical error for `N ≥ 1000`.
    pub slope: f64,
}

impl PrecisionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_photons,rms_error_nm,stderr_nm,bound_nm,bias_nm,n_frames\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{}\n",
                r.n_photons, r.rms_error_nm, r.stderr_nm, r.bound_nm, r.bias_nm, r.n_frames
            ));
        }
        out
    }
}

/// Position errors (pixels) of single emitters with `n_photons`, imaged
/// through a Gaussian response of rms `rms_psf` and fitted with it.
pub fn single_atom_errors(cfg: &BenchConfig, n_photons: f64, frames: usize, seed: u64, point: u64) -> Result<Vec<f64>> {
    let optics = &cfg.optics;
    let sigma = optics.rms_psf_px();
    let optical = ResponseLsf::gaussian(sigma, 8, (10.0 * sigma).ceil(), optics.delta_s_um)?;
    let ccd = optical.convolve_box(optics.aperture_px());
    let centre = 0.5 * (cfg.frame.n_cols as f64 - 1.0);
    (0..frames)
        .into_par_iter()
        .map(|f| {
            let mut r = rng::frame_rng(seed, stream(2, point as i64, f));
            let truth = centre + rng::uniform(&mut r, -0.5, 0.5);
            let config = AtomConfig::new(vec![truth], vec![n_photons])?;
            let img = simulate_exposure(&config, &optical, &cfg.noise, optics, &cfg.frame, &mut r)?;
            let profile = integrate_transverse(&img, 0..cfg.frame.n_rows)?;
            let (corrected, _) = baseline_corrected(&profile, &cfg.noise, &cfg.analysis.segment)?;
            let seg = segment_rois(&corrected, &cfg.noise, &cfg.analysis.segment);
            let roi = seg
                .rois
                .iter()
                .filter(|roi| roi.contains_px(truth))
                .max_by(|a, b| a.integrated_e.total_cmp(&b.integrated_e));
            // fall back on a window of ±3 rms when the emitter is below threshold
            let range = match roi {
                Some(roi) => roi.range.clone(),
                None => {
                    let w = (3.0 * sigma).ceil() as usize;
                    let c = truth.round() as usize;
                    c.saturating_sub(w)..(c + w + 1).min(corrected.len())
                }
            };
            let input = FitInput {
                values: &corrected.values[range.clone()],
                start_px: (corrected.origin_px + range.start) as f64,
                n_perp: corrected.n_perp,
                lsf: &ccd,
                noise: &cfg.noise,
            };
            let (est, _, _) = fit_region(
                &input,
                1,
                cfg.analysis.band_limit,
                cfg.analysis.wiener_iters,
                &AmplitudeBounds::unbounded(),
            )?;
            Ok(est.xi[0] - truth)
        })
        .collect()
}

/// Empirical rms localization error against the analytic bound.
pub fn run_precision_sweep(cfg: &BenchConfig, seed: u64) -> Result<PrecisionReport> {
    let optics = &cfg.optics;
    let mut rows = Vec::new();
    for (point, &n) in cfg.photon_counts.iter().enumerate() {
        if !(n > 0.0) {
            return Err(invalid("photon numbers must be positive"));
        }
        let errs = single_atom_errors(cfg, n, cfg.frames, seed, point as u64)?;
        let rms = optics.px_to_nm(stats::rms(&errs));
        rows.push(PrecisionRow {
            n_photons: n,
            rms_error_nm: rms,
            stderr_nm: rms / (2.0 * errs.len() as f64).sqrt(),
            bound_nm: 1e3
                * precision_bound(
                    optics.rms_psf_um,
                    optics.delta_p_um,
                    n,
                    cfg.noise.sigma_b,
                    cfg.frame.n_rows,
                    cfg.noise.em_enabled,
                ),
            bias_nm: optics.px_to_nm(stats::mean(&errs)),
            n_frames: errs.len(),
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.n_photons >= 1000.0)
        .map(|r| (r.n_photons.ln(), r.rms_error_nm.ln()))
        .collect();
    let slope = if pts.len() >= 2 {
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    } else {
        f64::NAN
    };
    Ok(PrecisionReport { rows, slope })
}
