use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::counting::{count_atoms, PhotonHistogramModel};
use super::fit::{nlls_fit, AmplitudeBounds, FitInput};
use super::lattice::{lattice_refine, lattice_refine_shared, RefineOptions};
use super::seed::{music_estimate, usable_band, wiener_deconvolve};
use super::segment::{segment_rois, SegmentOptions};
use super::{AtomEstimate, Roi};
use crate::error::{invalid, Error, Result};
use crate::imaging::{subtract_background, LatticeModel, Optics, Profile1D};
use crate::lsf::LsfAtlas;
use crate::noise::NoiseParams;
use crate::stats::median;

/// Everything the analysis needs besides the frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub id: String,
    pub optics: Optics,
    pub noise: NoiseParams,
    /// Responses including the pixel aperture.
    pub atlas: LsfAtlas,
    pub lattice: LatticeModel,
    pub histogram: Option<PhotonHistogramModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeOptions {
    pub segment: SegmentOptions,
    pub min_confidence: f64,
    pub wiener_iters: usize,
    /// Upper limit of the band used for seeding (cycles per pixel).
    pub band_limit: f64,
    pub refine: RefineOptions,
    pub discrete: bool,
    pub shared_delta: bool,
    /// Atom number assumed for every region instead of counting.
    pub atoms_per_roi: Option<usize>,
    /// Expected photoelectrons per atom when no histogram model is given.
    pub nominal_amplitude: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        let optics = Optics::default();
        AnalyzeOptions {
            segment: SegmentOptions::default(),
            min_confidence: 0.95,
            wiener_iters: 10,
            band_limit: 1.2 / optics.abbe_radius_px(),
            refine: RefineOptions::default(),
            discrete: true,
            shared_delta: false,
            atoms_per_roi: None,
            nominal_amplitude: 1300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiResult {
    pub roi: Roi,
    pub continuous: Option<AtomEstimate>,
    pub discrete: Option<AtomEstimate>,
    pub seeds: Vec<f64>,
    pub seeds_split: bool,
    pub lsf_patch: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub calibration_id: String,
    pub baseline: f64,
    pub signal_free: Vec<Range<usize>>,
    pub rois: Vec<RoiResult>,
}

impl FrameResult {
    pub fn atom_count(&self) -> usize {
        self.rois.iter().filter(|r| r.roi.accepted).map(|r| r.roi.atom_count).sum()
    }
}

/// Subtracts the baseline estimated from signal-free pixels, found by a
/// first segmentation against the median. Returns the corrected profile
/// and the baseline.
pub fn baseline_corrected(profile: &Profile1D, noise: &NoiseParams, opts: &SegmentOptions) -> Result<(Profile1D, f64)> {
    if profile.background_subtracted {
        return Ok((profile.clone(), 0.0));
    }
    let med = median(&profile.values);
    let rough = Profile1D {
        values: profile.values.iter().map(|v| v - med).collect(),
        background_subtracted: true,
        ..profile.clone()
    };
    let seg = segment_rois(&rough, noise, opts);
    let corrected = subtract_background(profile, &seg.signal_free, &seg.roi_ranges())?;
    let baseline = profile.values[0] - corrected.values[0];
    Ok((corrected, baseline))
}

/// Wiener/MUSIC seeds and continuous fit of `m` emitters in one region.
/// Returns the estimate, the seeds and whether MUSIC had to split a peak.
pub fn fit_region(
    input: &FitInput,
    m: usize,
    band_limit: f64,
    wiener_iters: usize,
    bounds: &AmplitudeBounds,
) -> Result<(AtomEstimate, Vec<f64>, bool)> {
    let spec = wiener_deconvolve(input.values, input.lsf, input.noise, input.n_perp, wiener_iters)?;
    let band = usable_band(input.lsf, band_limit);
    let music = music_estimate(&spec, band, m, input.len())?;
    let seeds: Vec<f64> = music.positions.iter().map(|p| p + input.start_px).collect();
    let mut best = nlls_fit(input, &seeds, bounds);
    if m > 1 {
        // equally spaced restarts around the brightest part of the region
        let centre = core_centroid(input.values) + input.start_px;
        for d in SPREAD_STARTS_PX {
            let starts: Vec<f64> = (0..m)
                .map(|i| centre + d * (i as f64 - 0.5 * (m as f64 - 1.0)))
                .collect();
            if let Ok(e) = nlls_fit(input, &starts, bounds) {
                if best.as_ref().map_or(true, |b| e.nll < b.nll) {
                    best = Ok(e);
                }
            }
        }
    }
    Ok((best?, seeds, music.split))
}

const SPREAD_STARTS_PX: [f64; 4] = [1.5, 3.0, 4.5, 6.0];

/// Centroid of the samples above half the maximum of a three-point
/// running mean, relative to the first sample.
fn core_centroid(values: &[f64]) -> f64 {
    let n = values.len();
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let peak = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut w, mut wx) = (0.0, 0.0);
    for (i, &v) in smooth.iter().enumerate() {
        if v >= 0.5 * peak {
            w += v;
            wx += v * i as f64;
        }
    }
    if w > 0.0 {
        wx / w
    } else {
        0.5 * (n as f64 - 1.0)
    }
}

/// Full analysis of one background-containing profile.
pub fn analyze_profile(profile: &Profile1D, cal: &Calibration, opts: &AnalyzeOptions) -> Result<FrameResult> {
    cal.noise.validate()?;
    if !(opts.min_confidence > 0.0 && opts.min_confidence < 1.0) {
        return Err(invalid("minimum confidence must lie in (0, 1)"));
    }
    if cal.histogram.is_none() && opts.atoms_per_roi.is_none() {
        return Err(Error::CalibrationMissing(
            "photon histogram model (or a fixed atom number per region)".into(),
        ));
    }
    let (corrected, baseline) = baseline_corrected(profile, &cal.noise, &opts.segment)?;
    let seg = segment_rois(&corrected, &cal.noise, &opts.segment);

    let mut results: Vec<RoiResult> = seg
        .rois
        .par_iter()
        .map(|roi| {
            let mut roi = roi.clone();
            match (opts.atoms_per_roi, &cal.histogram) {
                (Some(m), _) => {
                    roi.atom_count = m;
                    roi.count_confidence = 1.0;
                    roi.accepted = m > 0;
                }
                (None, Some(h)) => {
                    let c = count_atoms(roi.integrated_e, h, opts.min_confidence);
                    roi.atom_count = c.m;
                    roi.count_confidence = c.confidence;
                    roi.accepted = c.accepted && c.m > 0;
                }
                (None, None) => unreachable!(),
            }
            let mut out = RoiResult {
                roi: roi.clone(),
                continuous: None,
                discrete: None,
                seeds: Vec::new(),
                seeds_split: false,
                lsf_patch: None,
                error: None,
            };
            if !roi.accepted {
                return out;
            }
            let centre = roi.start_px + roi.len() / 2;
            let lsf = match cal.atlas.lookup(centre) {
                Ok(l) => l,
                Err(e) => {
                    out.error = Some(e.to_string());
                    return out;
                }
            };
            out.lsf_patch = lsf.patch_id().map(str::to_string);
            let input = FitInput {
                values: &corrected.values[roi.range.clone()],
                start_px: roi.start_px as f64,
                n_perp: corrected.n_perp,
                lsf,
                noise: &cal.noise,
            };
            let bounds = match &cal.histogram {
                Some(h) => AmplitudeBounds::from_model(h),
                None => AmplitudeBounds::nominal(opts.nominal_amplitude, &cal.noise, roi.len(), corrected.n_perp),
            };
            match fit_region(&input, roi.atom_count, opts.band_limit, opts.wiener_iters, &bounds) {
                Ok((est, seeds, split)) => {
                    out.seeds = seeds;
                    out.seeds_split = split;
                    if opts.discrete && !opts.shared_delta {
                        match lattice_refine(&input, &est, &cal.lattice, &bounds, &opts.refine) {
                            Ok(d) => out.discrete = Some(d),
                            Err(e) => out.error = Some(e.to_string()),
                        }
                    }
                    out.continuous = Some(est);
                }
                Err(e) => out.error = Some(e.to_string()),
            }
            out
        })
        .collect();

    if opts.discrete && opts.shared_delta {
        let idx: Vec<usize> = (0..results.len()).filter(|&i| results[i].continuous.is_some()).collect();
        let mut parts = Vec::new();
        let mut lsfs = Vec::new();
        for &i in &idx {
            let r = &results[i].roi;
            lsfs.push(cal.atlas.lookup(r.start_px + r.len() / 2)?);
        }
        for (k, &i) in idx.iter().enumerate() {
            let r = &results[i].roi;
            let bounds_input = FitInput {
                values: &corrected.values[r.range.clone()],
                start_px: r.start_px as f64,
                n_perp: corrected.n_perp,
                lsf: lsfs[k],
                noise: &cal.noise,
            };
            parts.push((bounds_input, results[i].continuous.clone().unwrap()));
        }
        let bounds = match &cal.histogram {
            Some(h) => AmplitudeBounds::from_model(h),
            None => AmplitudeBounds::nominal(
                opts.nominal_amplitude,
                &cal.noise,
                parts.iter().map(|(p, _)| p.len()).max().unwrap_or(1),
                corrected.n_perp,
            ),
        };
        match lattice_refine_shared(&parts, &cal.lattice, &bounds, &opts.refine) {
            Ok(ests) => {
                for (&i, e) in idx.iter().zip(ests) {
                    results[i].discrete = Some(e);
                }
            }
            Err(e) => {
                for &i in &idx {
                    results[i].error = Some(e.to_string());
                }
            }
        }
    }

    Ok(FrameResult {
        calibration_id: cal.id.clone(),
        baseline,
        signal_free: seg.signal_free,
        rois: results,
    })
}
