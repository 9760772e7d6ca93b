//! Image formation: domain types, the continuous and pixel-sampled forward
//! model, and the seeded EMCCD frame simulator.

use std::ops::Range;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lsf::ResponseLsf;
use crate::noise::NoiseParams;
use crate::quadrature;
use crate::rng;

/// Physical constants of the imaging setup. Lengths in µm unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Optics {
    pub wavelength_um: f64,
    pub na: f64,
    /// Sampling spacing in the object plane (µm per pixel).
    pub delta_s_um: f64,
    /// Pixel aperture in the object plane.
    pub delta_p_um: f64,
    pub lattice_nm: f64,
    /// rms width of the Gaussian approximation to the PSF.
    pub rms_psf_um: f64,
}

impl Default for Optics {
    fn default() -> Self {
        // 433 nm sites imaged at 1.47 px per site
        let delta_s = 0.433 / 1.47;
        Optics {
            wavelength_um: 0.852,
            na: 0.228,
            delta_s_um: delta_s,
            delta_p_um: delta_s,
            lattice_nm: 433.0,
            rms_psf_um: 1.5,
        }
    }
}

impl Optics {
    pub fn abbe_radius_um(&self) -> f64 {
        self.wavelength_um / (2.0 * self.na)
    }

    pub fn abbe_radius_px(&self) -> f64 {
        self.abbe_radius_um() / self.delta_s_um
    }

    /// Optical cutoff `2 NA/λ` in cycles per pixel.
    pub fn cutoff_px(&self) -> f64 {
        1.0 / self.abbe_radius_px()
    }

    pub fn rms_psf_px(&self) -> f64 {
        self.rms_psf_um / self.delta_s_um
    }

    /// Pixel aperture width in pixels (`Δp/Δs`).
    pub fn aperture_px(&self) -> f64 {
        self.delta_p_um / self.delta_s_um
    }

    pub fn lattice_px(&self) -> f64 {
        self.lattice_nm * 1e-3 / self.delta_s_um
    }

    pub fn px_to_nm(&self, px: f64) -> f64 {
        px * self.delta_s_um * 1e3
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.wavelength_um,
            self.na,
            self.delta_s_um,
            self.delta_p_um,
            self.lattice_nm,
            self.rms_psf_um,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(invalid("optical constants must be positive and finite"));
        }
        if self.na >= 1.0 {
            return Err(invalid("numerical aperture must be below 1"));
        }
        if self.delta_p_um > self.delta_s_um {
            return Err(invalid("pixel aperture exceeds sampling spacing"));
        }
        Ok(())
    }
}

/// Detector counts in photoelectron units, row-major (`rows × cols`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelImage {
    counts: Vec<f64>,
    rows: usize,
    cols: usize,
    pub delta_s_um: f64,
    pub delta_p_um: f64,
    pub exposure_s: f64,
}

impl PixelImage {
    pub fn new(
        counts: Vec<f64>,
        rows: usize,
        cols: usize,
        delta_s_um: f64,
        delta_p_um: f64,
        exposure_s: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("image dimensions must be positive"));
        }
        if counts.len() != rows * cols {
            return Err(invalid(format!(
                "expected {} counts for {rows}×{cols}, got {}",
                rows * cols,
                counts.len()
            )));
        }
        if delta_p_um > delta_s_um {
            return Err(invalid("pixel aperture exceeds sampling spacing"));
        }
        let finite = counts.iter().all(|v| v.is_finite())
            && delta_s_um.is_finite()
            && delta_p_um.is_finite()
            && exposure_s.is_finite();
        if !finite {
            return Err(invalid("image fields must be finite"));
        }
        Ok(PixelImage {
            counts,
            rows,
            cols,
            delta_s_um,
            delta_p_um,
            exposure_s,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.counts[row * self.cols + col]
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Transversely integrated signal along the lattice axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile1D {
    pub values: Vec<f64>,
    /// Column of `values[0]` in the parent image.
    pub origin_px: usize,
    pub background_subtracted: bool,
    pub n_perp: usize,
}

impl Profile1D {
    pub fn new(values: Vec<f64>, origin_px: usize, n_perp: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("profile must not be empty"));
        }
        if n_perp == 0 {
            return Err(invalid("profile must integrate at least one row"));
        }
        Ok(Profile1D {
            values,
            origin_px,
            background_subtracted: false,
            n_perp,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pixel coordinate of `values[i]`.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        (self.origin_px + i) as f64
    }

    /// Sub-profile over local indices `range`, keeping parent coordinates.
    pub fn slice(&self, range: Range<usize>) -> Result<Profile1D> {
        if range.start >= range.end || range.end > self.values.len() {
            return Err(invalid(format!(
                "slice {range:?} outside profile of length {}",
                self.values.len()
            )));
        }
        Ok(Profile1D {
            values: self.values[range.clone()].to_vec(),
            origin_px: self.origin_px + range.start,
            background_subtracted: self.background_subtracted,
            n_perp: self.n_perp,
        })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Emitter positions (pixels) and expected photoelectron totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomConfig {
    pub positions: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub all_distinct_sites: bool,
}

impl AtomConfig {
    pub fn new(positions: Vec<f64>, amplitudes: Vec<f64>) -> Result<Self> {
        if positions.len() != amplitudes.len() {
            return Err(invalid("positions and amplitudes differ in length"));
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("positions must be strictly increasing"));
        }
        if amplitudes.iter().any(|a| !(*a >= 0.0)) || positions.iter().any(|p| !p.is_finite()) {
            return Err(invalid("amplitudes must be non-negative and positions finite"));
        }
        Ok(AtomConfig {
            positions,
            amplitudes,
            all_distinct_sites: true,
        })
    }

    pub fn empty() -> Self {
        AtomConfig {
            positions: Vec::new(),
            amplitudes: Vec::new(),
            all_distinct_sites: true,
        }
    }

    /// Emitters on integer lattice `sites` with a common amplitude.
    pub fn on_lattice(sites: &[i64], amplitude: f64, lattice: &LatticeModel) -> Result<Self> {
        let mut sorted = sites.to_vec();
        sorted.sort_unstable();
        let distinct = sorted.windows(2).all(|w| w[0] != w[1]);
        if !distinct {
            return Err(invalid("two emitters cannot share a lattice site"));
        }
        let positions = sorted.iter().map(|&p| lattice.site_position(p)).collect();
        Self::new(positions, vec![amplitude; sorted.len()])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeModel {
    /// Lattice constant in pixels per site.
    pub a_px: f64,
    /// Position of site 0 in pixels.
    pub delta_l: f64,
    pub a_nm: f64,
}

impl Default for LatticeModel {
    fn default() -> Self {
        LatticeModel {
            a_px: 1.47,
            delta_l: 0.0,
            a_nm: 433.0,
        }
    }
}

impl LatticeModel {
    pub fn new(a_px: f64, delta_l: f64, a_nm: f64) -> Result<Self> {
        if !(a_px > 0.0) || !delta_l.is_finite() {
            return Err(invalid("lattice constant must be positive"));
        }
        Ok(LatticeModel { a_px, delta_l, a_nm })
    }

    pub fn site_position(&self, p: i64) -> f64 {
        self.delta_l + self.a_px * p as f64
    }

    pub fn nearest_site(&self, x: f64) -> i64 {
        ((x - self.delta_l) / self.a_px).round() as i64
    }
}

/// `x ↦ Σ_l A_l L(x − ξ_l)`.
pub fn continuous_image<'a>(config: &'a AtomConfig, lsf: &'a ResponseLsf) -> impl Fn(f64) -> f64 + 'a {
    move |x| {
        config
            .positions
            .iter()
            .zip(&config.amplitudes)
            .map(|(xi, a)| a * lsf.eval(x - xi))
            .sum()
    }
}

/// Integrates `intensity` over the aperture of each pixel and divides by
/// the aperture width. Pixel `i` is centred at `origin_px + i`; widths are
/// in pixels via `Δp/Δs`.
pub fn sample_to_ccd(
    intensity: &dyn Fn(f64) -> f64,
    delta_s_um: f64,
    delta_p_um: f64,
    n_px: usize,
    origin_px: usize,
) -> Result<Profile1D> {
    if !(delta_p_um > 0.0) || delta_p_um > delta_s_um {
        return Err(invalid("pixel aperture must be positive and not exceed the spacing"));
    }
    let w = delta_p_um / delta_s_um;
    // scale of the whole profile, so nearly empty pixels are not refined
    // relative to their own magnitude
    let scale = (0..n_px * 8)
        .map(|j| intensity(origin_px as f64 - 0.5 + (j as f64 + 0.5) / 8.0).abs())
        .fold(0.0, f64::max);
    let floor = 1e-12 * scale * w;
    let values = (0..n_px)
        .map(|i| {
            let c = (origin_px + i) as f64;
            quadrature::integrate_with_floor(intensity, c - 0.5 * w, c + 0.5 * w, 1e-9, floor) / w
        })
        .collect();
    Profile1D::new(values, origin_px, 1)
}

/// Frame geometry and optional per-frame effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameSpec {
    pub n_cols: usize,
    pub n_rows: usize,
    pub exposure_s: f64,
    /// rms (rows) of the transverse distribution of each emitter.
    pub transverse_rms_px: f64,
    /// Probability that one emitter is lost at a uniform time during the
    /// exposure.
    pub loss_probability: f64,
}

impl Default for FrameSpec {
    fn default() -> Self {
        FrameSpec {
            n_cols: 512,
            n_rows: 40,
            exposure_s: 1.0,
            transverse_rms_px: Optics::default().rms_psf_px(),
            loss_probability: 0.0,
        }
    }
}

impl FrameSpec {
    /// Fraction of each emitter's flux landing on each row.
    pub fn row_weights(&self) -> Vec<f64> {
        let centre = 0.5 * (self.n_rows as f64 - 1.0);
        let raw: Vec<f64> = (0..self.n_rows)
            .map(|j| {
                if self.transverse_rms_px > 0.0 {
                    (-0.5 * ((j as f64 - centre) / self.transverse_rms_px).powi(2)).exp()
                } else {
                    1.0
                }
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

/// One draw of the EM register output for `x` input electrons: zero for
/// `x = 0`, otherwise Gamma(shape `x`, scale `g`).
pub fn em_amplify<R: Rng + ?Sized>(x: u64, g: f64, rng: &mut R) -> f64 {
    if x == 0 {
        return 0.0;
    }
    match Gamma::new(x as f64, g) {
        Ok(d) => d.sample(rng),
        Err(_) => x as f64 * g,
    }
}

/// Static pixel-response map with relative rms `prnu`, identical for every
/// frame of a given geometry.
fn prnu_map(prnu: f64, n: usize) -> Vec<f64> {
    if prnu <= 0.0 {
        return vec![1.0; n];
    }
    let mut rng = rng::seeded(0x5052_4e55);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (1.0 + prnu * z).max(0.0)
        })
        .collect()
}

/// Noiseless integrated profile of `config` on the frame's pixel grid.
pub fn mean_profile(config: &AtomConfig, lsf: &ResponseLsf, optics: &Optics, frame: &FrameSpec) -> Result<Profile1D> {
    let image = continuous_image(config, lsf);
    let mut p = sample_to_ccd(&image, optics.delta_s_um, optics.delta_p_um, frame.n_cols, 0)?;
    p.n_perp = frame.n_rows;
    Ok(p)
}

/// Simulates one EMCCD exposure.
///
/// Each pixel sums separate Poisson draws for fluorescence, stray light,
/// clock-induced charge and dark current, passes the electrons through the
/// EM register, adds normal read-out noise of rms `σ_ro`, and divides by
/// the calibration gain. `lsf` is the optical response; pixel apertures
/// are integrated here.
pub fn simulate_exposure<R: Rng + ?Sized>(
    config: &AtomConfig,
    lsf: &ResponseLsf,
    noise: &NoiseParams,
    optics: &Optics,
    frame: &FrameSpec,
    rng: &mut R,
) -> Result<PixelImage> {
    noise.validate()?;
    optics.validate()?;
    if frame.n_cols == 0 || frame.n_rows == 0 {
        return Err(invalid("frame dimensions must be positive"));
    }
    let mut amplitudes = config.amplitudes.clone();
    if frame.loss_probability > 0.0 && !amplitudes.is_empty() && rng.random::<f64>() < frame.loss_probability {
        let l = rng.random_range(0..amplitudes.len());
        amplitudes[l] *= rng.random::<f64>();
    }
    let lost = AtomConfig {
        positions: config.positions.clone(),
        amplitudes,
        all_distinct_sites: config.all_distinct_sites,
    };
    let model = mean_profile(&lost, lsf, optics, frame)?.values;
    let weights = frame.row_weights();

    let intensity = if noise.intensity_rel > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        (1.0 + noise.intensity_rel * z).max(0.0)
    } else {
        1.0
    };
    let prnu = prnu_map(noise.prnu_rel, frame.n_cols * frame.n_rows);
    let divisor = noise.calibration_divisor();
    let t = frame.exposure_s;

    let mut counts = Vec::with_capacity(frame.n_cols * frame.n_rows);
    for (j, w) in weights.iter().enumerate() {
        for (i, m) in model.iter().enumerate() {
            let response = intensity * prnu[j * frame.n_cols + i];
            let electrons = rng::poisson(rng, m * w * response)
                + rng::poisson(rng, noise.stray_rate * response)
                + rng::poisson(rng, noise.cic_rate)
                + rng::poisson(rng, noise.dark_rate);
            let mut y = if noise.em_enabled {
                em_amplify(electrons, noise.g, rng)
            } else {
                electrons as f64 * noise.g
            };
            if noise.sigma_ro > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                y += noise.sigma_ro * z;
            }
            counts.push(y / divisor);
        }
    }
    PixelImage::new(
        counts,
        frame.n_rows,
        frame.n_cols,
        optics.delta_s_um,
        optics.delta_p_um,
        t,
    )
}

/// `simulate_exposure` on a fresh stream derived from `seed`.
pub fn simulate_exposure_seeded(
    config: &AtomConfig,
    lsf: &ResponseLsf,
    noise: &NoiseParams,
    optics: &Optics,
    frame: &FrameSpec,
    seed: u64,
) -> Result<PixelImage> {
    let mut r = rng::seeded(seed);
    simulate_exposure(config, lsf, noise, optics, frame, &mut r)
}

/// Sums `rows` of every column.
pub fn integrate_transverse(img: &PixelImage, rows: Range<usize>) -> Result<Profile1D> {
    if rows.start >= rows.end {
        return Err(invalid("row range is empty"));
    }
    if rows.end > img.rows {
        return Err(invalid(format!(
            "rows {rows:?} outside image with {} rows",
            img.rows
        )));
    }
    let mut values = vec![0.0; img.cols];
    for j in rows.clone() {
        let row = &img.counts[j * img.cols..(j + 1) * img.cols];
        for (v, c) in values.iter_mut().zip(row) {
            *v += c;
        }
    }
    Profile1D::new(values, 0, rows.len())
}

/// Subtracts the mean over `signal_free` (local index ranges). Ranges that
/// intersect any of `rois` are rejected.
pub fn subtract_background(
    profile: &Profile1D,
    signal_free: &[Range<usize>],
    rois: &[Range<usize>],
) -> Result<Profile1D> {
    let n = profile.values.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in signal_free {
        if r.end > n {
            return Err(invalid(format!("signal-free range {r:?} outside profile")));
        }
        if rois.iter().any(|roi| roi.start < r.end && r.start < roi.end) {
            return Err(invalid(format!("signal-free range {r:?} overlaps a region of interest")));
        }
        sum += profile.values[r.clone()].iter().sum::<f64>();
        count += r.len();
    }
    if count == 0 {
        return Err(invalid("no signal-free pixels"));
    }
    let baseline = sum / count as f64;
    let mut out = profile.clone();
    for v in out.values.iter_mut() {
        *v -= baseline;
    }
    out.background_subtracted = true;
    Ok(out)
}
