//! Sub-pixel response functions and their reconstruction from
//! single-emitter profiles.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::Profile1D;
use crate::optim::{self, Bounds, LmOptions, Residuals};
use crate::spectral;

/// Oversampling of the dense evaluation table relative to the stored grid.
const TABLE_OVERSAMPLE: usize = 16;

#[derive(Debug)]
struct Table {
    x0: f64,
    h: f64,
    values: Vec<f64>,
    derivs: Vec<f64>,
}

impl Table {
    fn build(samples: &[f64], x0: f64, s: usize) -> Table {
        let n = samples.len();
        let padded_len = spectral::next_pow2(2 * n);
        let pad_left = (padded_len - n) / 2;
        let mut padded = vec![0.0; padded_len];
        padded[pad_left..pad_left + n].copy_from_slice(samples);
        let spec = spectral::fft_real(&padded);
        let big = padded_len * TABLE_OVERSAMPLE;
        let mut vals = vec![Complex64::new(0.0, 0.0); big];
        let mut ders = vec![Complex64::new(0.0, 0.0); big];
        let half = padded_len / 2;
        let dx = 1.0 / s as f64;
        for q in 0..padded_len {
            if q == half {
                // Nyquist bin split evenly; its derivative is dropped
                vals[half] = spec[q] * 0.5;
                vals[big - half] = spec[q] * 0.5;
                continue;
            }
            let k = spectral::bin_frequency(q, padded_len) / dx;
            let dst = if q < half { q } else { big - (padded_len - q) };
            vals[dst] = spec[q];
            ders[dst] = spec[q] * Complex64::new(0.0, 2.0 * PI * k);
        }
        let scale = TABLE_OVERSAMPLE as f64;
        let values = spectral::ifft_to_real(vals)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let derivs = spectral::ifft_to_real(ders)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Table {
            x0: x0 - pad_left as f64 * dx,
            h: dx / TABLE_OVERSAMPLE as f64,
            values,
            derivs,
        }
    }

    #[inline]
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        let u = (x - self.x0) / self.h;
        if !(u >= 0.0) {
            return None;
        }
        let i = u as usize;
        if i + 1 >= self.values.len() {
            return None;
        }
        Some((i, u - i as f64))
    }

    #[inline]
    fn value(&self, x: f64) -> f64 {
        let Some((i, t)) = self.locate(x) else {
            return 0.0;
        };
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.derivs[i] * self.h, self.derivs[i + 1] * self.h);
        let t2 = t * t;
        let t3 = t2 * t;
        (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * d1
    }

    #[inline]
    fn derivative(&self, x: f64) -> f64 {
        let Some((i, t)) = self.locate(x) else {
            return 0.0;
        };
        let (y0, y1) = (self.values[i], self.values[i + 1]);
        let (d0, d1) = (self.derivs[i] * self.h, self.derivs[i + 1] * self.h);
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * d1)
            / self.h
    }
}

#[derive(Serialize, Deserialize)]
struct LsfData {
    samples: Vec<f64>,
    s: usize,
    x0: f64,
    delta_s_um: f64,
    patch_id: Option<String>,
}

/// Unit-area response function on a grid of `1/s` pixels.
///
/// `samples[j]` is the value at `x0 + j/s` pixels relative to the emitter
/// position. Normalization is `Σ samples / s = 1`, i.e. unit area in pixel
/// units. Between grid points the function is evaluated by band-limited
/// (Fourier) interpolation, tabulated densely and read back with cubic
/// Hermite interpolation; outside the stored window it is zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LsfData", into = "LsfData")]
pub struct ResponseLsf {
    samples: Vec<f64>,
    s: usize,
    x0: f64,
    delta_s_um: f64,
    patch_id: Option<String>,
    table: Arc<Table>,
}

impl TryFrom<LsfData> for ResponseLsf {
    type Error = Error;
    fn try_from(d: LsfData) -> Result<Self> {
        let mut lsf = ResponseLsf::new(d.samples, d.s, d.x0, d.delta_s_um)?;
        lsf.patch_id = d.patch_id;
        Ok(lsf)
    }
}

impl From<ResponseLsf> for LsfData {
    fn from(l: ResponseLsf) -> Self {
        LsfData {
            samples: l.samples,
            s: l.s,
            x0: l.x0,
            delta_s_um: l.delta_s_um,
            patch_id: l.patch_id,
        }
    }
}

impl PartialEq for ResponseLsf {
    fn eq(&self, other: &Self) -> bool {
        self.samples == other.samples
            && self.s == other.s
            && self.x0 == other.x0
            && self.delta_s_um == other.delta_s_um
            && self.patch_id == other.patch_id
    }
}

impl ResponseLsf {
    /// Builds a response from raw samples and rescales it to unit area.
    pub fn new(samples: Vec<f64>, s: usize, x0: f64, delta_s_um: f64) -> Result<Self> {
        if s == 0 {
            return Err(invalid("upsampling factor must be at least 1"));
        }
        if samples.is_empty() {
            return Err(invalid("response needs at least one sample"));
        }
        if !x0.is_finite() || samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("response samples must be finite"));
        }
        let area: f64 = samples.iter().sum::<f64>() / s as f64;
        if !(area.abs() > 0.0) {
            return Err(invalid("response has zero area"));
        }
        let samples: Vec<f64> = if (area - 1.0).abs() > 1e-12 {
            samples.into_iter().map(|v| v / area).collect()
        } else {
            samples
        };
        let table = Arc::new(Table::build(&samples, x0, s));
        Ok(ResponseLsf {
            samples,
            s,
            x0,
            delta_s_um,
            patch_id: None,
            table,
        })
    }

    /// Samples `f` on `[-half_width, half_width)` at spacing `1/s`.
    pub fn from_fn(
        f: impl Fn(f64) -> f64,
        s: usize,
        half_width_px: f64,
        delta_s_um: f64,
    ) -> Result<Self> {
        if s == 0 {
            return Err(invalid("upsampling factor must be at least 1"));
        }
        let n = (2.0 * half_width_px * s as f64).round() as usize;
        let x0 = -(n as f64) / (2.0 * s as f64);
        let samples = (0..n).map(|j| f(x0 + j as f64 / s as f64)).collect();
        Self::new(samples, s, x0, delta_s_um)
    }

    /// Normalized Gaussian of rms `sigma_px`, tabulated over ±`half_width_px`.
    pub fn gaussian(sigma_px: f64, s: usize, half_width_px: f64, delta_s_um: f64) -> Result<Self> {
        if !(sigma_px > 0.0) {
            return Err(invalid("gaussian width must be positive"));
        }
        Self::from_fn(
            |x| (-0.5 * (x / sigma_px).powi(2)).exp(),
            s,
            half_width_px,
            delta_s_um,
        )
    }

    pub fn with_patch_id(mut self, id: impl Into<String>) -> Self {
        self.patch_id = Some(id.into());
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn delta_s_um(&self) -> f64 {
        self.delta_s_um
    }

    pub fn patch_id(&self) -> Option<&str> {
        self.patch_id.as_deref()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.s as f64
    }

    /// Coordinate (pixels) of sample `j`.
    pub fn coord(&self, j: usize) -> f64 {
        self.x0 + j as f64 / self.s as f64
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.samples.len()).map(|j| self.coord(j)).collect()
    }

    /// Stored window `[first, last]` in pixels.
    pub fn support(&self) -> (f64, f64) {
        (self.x0, self.coord(self.samples.len() - 1))
    }

    pub fn area(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.s as f64
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.table.value(x)
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.table.derivative(x)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn peak_position(&self) -> f64 {
        let (j, _) = self
            .samples
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        self.coord(j)
    }

    pub fn centroid(&self) -> f64 {
        self.samples
            .iter()
            .enumerate()
            .map(|(j, v)| v * self.coord(j))
            .sum::<f64>()
            / self.s as f64
    }

    /// RMS width about the centroid.
    pub fn rms_width(&self) -> f64 {
        let c = self.centroid();
        (self
            .samples
            .iter()
            .enumerate()
            .map(|(j, v)| v * (self.coord(j) - c).powi(2))
            .sum::<f64>()
            / self.s as f64)
            .sqrt()
    }

    /// Continuous Fourier transform at `k` cycles per pixel.
    pub fn otf(&self, k: f64) -> Complex64 {
        spectral::sampled_transform(&self.samples, self.x0, self.spacing(), k)
    }

    /// Mirror image `x → -x`.
    pub fn mirrored(&self) -> ResponseLsf {
        let n = self.samples.len();
        let samples: Vec<f64> = self.samples.iter().rev().cloned().collect();
        let x0 = -self.coord(n - 1);
        let mut out = ResponseLsf::new(samples, self.s, x0, self.delta_s_um)
            .expect("mirror of a valid response is valid");
        out.patch_id = self.patch_id.clone();
        out
    }

    /// Same function with the origin moved so that the emitter sits at
    /// `shift` pixels in the old frame (`L'(x) = L(x + shift)`).
    pub fn recentered(&self, shift: f64) -> ResponseLsf {
        let mut out = ResponseLsf::new(self.samples.clone(), self.s, self.x0 - shift, self.delta_s_um)
            .expect("recentered response is valid");
        out.patch_id = self.patch_id.clone();
        out
    }

    /// Convolution with a unit-area box of width `width_px`, computed as a
    /// `sinc` multiplication in Fourier space on a zero-padded grid.
    pub fn convolve_box(&self, width_px: f64) -> ResponseLsf {
        if width_px <= 0.0 {
            return self.clone();
        }
        let n = self.samples.len();
        let pad = ((width_px * self.s as f64).ceil() as usize + 8).max(16);
        let len = spectral::next_pow2(n + 2 * pad);
        let left = (len - n) / 2;
        let mut buf = vec![0.0; len];
        buf[left..left + n].copy_from_slice(&self.samples);
        let mut spec = spectral::fft_real(&buf);
        for (q, c) in spec.iter_mut().enumerate() {
            let k = spectral::bin_frequency(q, len) * self.s as f64;
            *c *= sinc(PI * k * width_px);
        }
        let out = spectral::ifft_to_real(spec);
        let x0 = self.x0 - left as f64 / self.s as f64;
        let mut lsf = ResponseLsf::new(out, self.s, x0, self.delta_s_um)
            .expect("box convolution of a valid response is valid");
        lsf.patch_id = self.patch_id.clone();
        lsf
    }

    /// Largest absolute sample difference to `other` on this grid.
    pub fn max_abs_diff(&self, other: &ResponseLsf) -> f64 {
        (0..self.samples.len())
            .map(|j| (self.samples[j] - other.eval(self.coord(j))).abs())
            .fold(0.0, f64::max)
    }

    /// RMS difference to `other` on this grid over `[lo, hi]`.
    pub fn rms_diff(&self, other: &ResponseLsf, lo: f64, hi: f64) -> f64 {
        let diffs: Vec<f64> = (0..self.samples.len())
            .filter(|&j| (lo..=hi).contains(&self.coord(j)))
            .map(|j| self.samples[j] - other.eval(self.coord(j)))
            .collect();
        crate::stats::rms(&diffs)
    }
}

#[inline]
pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Zeroes every DFT component with `|k| > cutoff` (cycles per pixel).
pub fn fourier_lowpass(profile: &Profile1D, cutoff: f64) -> Result<Profile1D> {
    if !(cutoff > 0.0) {
        return Err(invalid("cutoff must be positive"));
    }
    let n = profile.values.len();
    let mut spec = spectral::fft_real(&profile.values);
    for (q, c) in spec.iter_mut().enumerate() {
        if spectral::bin_frequency(q, n).abs() > cutoff {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    let mut out = profile.clone();
    out.values = spectral::ifft_to_real(spec);
    Ok(out)
}

/// Fourier zero-padding interpolation onto `s` sub-pixels per pixel;
/// sample `j` sits at `origin_px + j/s`.
pub fn upsample(profile: &Profile1D, s: usize) -> Result<Vec<f64>> {
    if s == 0 {
        return Err(invalid("upsampling factor must be at least 1"));
    }
    Ok(spectral::zero_pad_upsample(&profile.values, s))
}

/// How each upsampled profile is moved onto the common grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftMode {
    /// Exact linear phase ramp.
    Fourier,
    /// Shift rounded to whole sub-pixels.
    SubPixelBin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructOptions {
    pub s: usize,
    /// Low-pass cutoff in cycles per pixel.
    pub cutoff: f64,
    pub max_iters: usize,
    /// Half width of the analysis window in pixels.
    pub window_half_width_px: usize,
    /// Width of the iteration-0 Gaussian.
    pub initial_sigma_px: f64,
    /// Radius around the peak inside which secondary structure is allowed.
    pub core_radius_px: f64,
    /// Largest secondary maximum (relative to the peak) for an isolated
    /// profile.
    pub isolation_ratio: f64,
    pub tolerance: f64,
    pub shift_mode: ShiftMode,
    pub delta_s_um: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        let optics = crate::imaging::Optics::default();
        let r_a = optics.abbe_radius_px();
        ReconstructOptions {
            s: 8,
            cutoff: 1.2 / r_a,
            max_iters: 50,
            window_half_width_px: (10.0 * r_a).ceil() as usize,
            initial_sigma_px: optics.rms_psf_px(),
            core_radius_px: 2.0 * r_a,
            isolation_ratio: 0.25,
            tolerance: 1e-4,
            shift_mode: ShiftMode::Fourier,
            delta_s_um: optics.delta_s_um,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reconstruction {
    pub lsf: ResponseLsf,
    pub iterations: usize,
    pub converged: bool,
    /// Max change between successive guesses, relative to the peak.
    pub trace: Vec<f64>,
    /// Final fitted emitter position of each used profile (parent pixels,
    /// in the frame of the returned response).
    pub positions: Vec<f64>,
    /// Indices of used profiles.
    pub used: Vec<usize>,
    /// Indices of profiles rejected by the isolation check.
    pub rejected: Vec<usize>,
}

struct Prepared {
    index: usize,
    /// Filtered pixel values over the window.
    window: Vec<f64>,
    /// Parent coordinate of `window[0]`.
    start: f64,
    upsampled: Vec<f64>,
}

struct SingleEmitterFit<'a> {
    x: Vec<f64>,
    y: &'a [f64],
    lsf: &'a ResponseLsf,
}

impl Residuals for SingleEmitterFit<'_> {
    fn n_residuals(&self) -> usize {
        self.y.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        for i in 0..out.len() {
            out[i] = p[0] * self.lsf.eval(self.x[i] - p[1]) - self.y[i];
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut nalgebra::DMatrix<f64>) -> bool {
        for i in 0..self.y.len() {
            let u = self.x[i] - p[1];
            jac[(i, 0)] = self.lsf.eval(u);
            jac[(i, 1)] = -p[0] * self.lsf.derivative(u);
        }
        true
    }
}

/// Least-squares amplitude and position of one emitter.
fn fit_single(x: Vec<f64>, y: &[f64], lsf: &ResponseLsf) -> (f64, f64) {
    let total: f64 = y.iter().sum();
    let weight: f64 = y.iter().map(|v| v.max(0.0)).sum();
    let centroid = if weight > 0.0 {
        x.iter().zip(y).map(|(a, b)| a * b.max(0.0)).sum::<f64>() / weight
    } else {
        x[x.len() / 2]
    };
    let (lo, hi) = (x[0], x[x.len() - 1]);
    let problem = SingleEmitterFit { x, y, lsf };
    let bounds = Bounds {
        lower: vec![f64::NEG_INFINITY, lo],
        upper: vec![f64::INFINITY, hi],
    };
    // peak-referenced seed: the response origin need not be its centroid
    let seed = centroid - lsf.centroid();
    let res = optim::minimize(&problem, &[total, seed], Some(&bounds), &LmOptions::default());
    (res.params[0], res.params[1])
}

fn prepare(profile: &Profile1D, index: usize, opts: &ReconstructOptions) -> Result<Option<Prepared>> {
    let filtered = fourier_lowpass(profile, opts.cutoff)?;
    let v = &filtered.values;
    let (ipk, peak) = v
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
    if !(peak > 0.0) {
        return Ok(None);
    }
    let h = opts.window_half_width_px as i64;
    let start = ipk as i64 - h;
    let mut window = vec![0.0; 2 * h as usize];
    for (k, w) in window.iter_mut().enumerate() {
        let i = start + k as i64;
        if i >= 0 && (i as usize) < v.len() {
            *w = v[i as usize];
        }
    }
    let secondary = window
        .iter()
        .enumerate()
        .filter(|(k, _)| ((*k as i64 - h) as f64).abs() > opts.core_radius_px)
        .map(|(_, &x)| x)
        .fold(0.0, f64::max);
    if secondary > opts.isolation_ratio * peak {
        return Ok(None);
    }
    let upsampled = spectral::zero_pad_upsample(&window, opts.s);
    Ok(Some(Prepared {
        index,
        window,
        start: (profile.origin_px as i64 + start) as f64,
        upsampled,
    }))
}

fn align(p: &Prepared, xi: f64, opts: &ReconstructOptions) -> Vec<f64> {
    // sample j sits at start + j/s; the common grid is (j/s - H) relative
    // to the emitter, so the sequence moves by (start + H - ξ)·s samples
    let h = opts.window_half_width_px as f64;
    let shift = (p.start + h - xi) * opts.s as f64;
    match opts.shift_mode {
        ShiftMode::Fourier => spectral::fourier_shift(&p.upsampled, shift),
        ShiftMode::SubPixelBin => {
            let k = shift.round() as i64;
            let n = p.upsampled.len() as i64;
            (0..n)
                .map(|j| p.upsampled[(j - k).rem_euclid(n) as usize])
                .collect()
        }
    }
}

/// Iterative sub-pixel reconstruction of the response from single-emitter
/// profiles.
///
/// Each profile is low-pass filtered, cut to a window around its peak and
/// upsampled. Every iteration fits the current guess (a Gaussian at the
/// start unless `initial` is given) to each filtered profile, shifts the
/// upsampled profiles by the negated position estimates, averages them
/// and renormalizes. Iteration stops once the largest change between
/// successive guesses drops below `tolerance` times the peak.
pub fn reconstruct_lsf(
    profiles: &[Profile1D],
    initial: Option<&ResponseLsf>,
    opts: &ReconstructOptions,
) -> Result<Reconstruction> {
    if opts.s == 0 || opts.window_half_width_px == 0 {
        return Err(invalid("upsampling factor and window must be positive"));
    }
    if profiles.is_empty() {
        return Err(invalid("no profiles to reconstruct from"));
    }
    let prepared: Vec<Option<Prepared>> = profiles
        .par_iter()
        .enumerate()
        .map(|(i, p)| prepare(p, i, opts))
        .collect::<Result<_>>()?;
    let rejected: Vec<usize> = prepared
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_none())
        .map(|(i, _)| i)
        .collect();
    let prepared: Vec<Prepared> = prepared.into_iter().flatten().collect();
    if prepared.is_empty() {
        return Err(invalid("every profile failed the isolation check"));
    }

    let h = opts.window_half_width_px as f64;
    let mut guess = match initial {
        Some(l) => l.clone(),
        None => ResponseLsf::gaussian(opts.initial_sigma_px, opts.s, h, opts.delta_s_um)?,
    };
    let mut trace = Vec::new();
    let mut positions = Vec::new();
    let mut converged = false;
    let n_grid = 2 * opts.window_half_width_px * opts.s;

    for _ in 0..opts.max_iters.max(1) {
        let fits: Vec<(f64, f64)> = prepared
            .par_iter()
            .map(|p| {
                let x: Vec<f64> = (0..p.window.len()).map(|k| p.start + k as f64).collect();
                fit_single(x, &p.window, &guess)
            })
            .collect();
        positions = fits.iter().map(|f| f.1).collect();
        let aligned: Vec<Vec<f64>> = prepared
            .par_iter()
            .zip(&positions)
            .map(|(p, &xi)| align(p, xi, opts))
            .collect();
        let mut sum = vec![0.0; n_grid];
        for a in &aligned {
            for (s, v) in sum.iter_mut().zip(a) {
                *s += v;
            }
        }
        let next = ResponseLsf::new(sum, opts.s, -h, opts.delta_s_um)?;
        let peak = next.peak();
        let change = (0..n_grid)
            .map(|j| (next.samples()[j] - guess.eval(next.coord(j))).abs())
            .fold(0.0, f64::max)
            / peak;
        trace.push(change);
        guess = next;
        if change < opts.tolerance {
            converged = true;
            break;
        }
    }
    Ok(Reconstruction {
        lsf: guess,
        iterations: trace.len(),
        converged,
        trace,
        positions,
        used: prepared.iter().map(|p| p.index).collect(),
        rejected,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasPatch {
    /// First column covered.
    pub start: usize,
    /// One past the last column covered.
    pub end: usize,
    pub lsf: ResponseLsf,
}

/// Responses for disjoint column intervals of the detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsfAtlas {
    pub patches: Vec<AtlasPatch>,
}

impl LsfAtlas {
    /// A single patch covering `columns`.
    pub fn uniform(lsf: ResponseLsf, columns: std::ops::Range<usize>) -> Self {
        LsfAtlas {
            patches: vec![AtlasPatch {
                start: columns.start,
                end: columns.end,
                lsf,
            }],
        }
    }

    pub fn lookup(&self, column: usize) -> Result<&ResponseLsf> {
        self.patches
            .iter()
            .find(|p| (p.start..p.end).contains(&column))
            .map(|p| &p.lsf)
            .ok_or(Error::OutsideAtlas { column })
    }
}

/// Reconstructs one response per patch `[edges[i], edges[i+1])`; profiles
/// are assigned to the patch containing their peak column.
pub fn build_atlas(
    profiles: &[Profile1D],
    patch_edges: &[usize],
    opts: &ReconstructOptions,
) -> Result<LsfAtlas> {
    if patch_edges.len() < 2 || patch_edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("patch edges must be strictly increasing with at least two entries"));
    }
    let mut groups: BTreeMap<usize, Vec<Profile1D>> = BTreeMap::new();
    for p in profiles {
        let ipk = p
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0;
        let column = p.origin_px + ipk;
        if let Some(k) = patch_edges.windows(2).position(|w| (w[0]..w[1]).contains(&column)) {
            groups.entry(k).or_default().push(p.clone());
        }
    }
    let n_patches = patch_edges.len() - 1;
    let patches = (0..n_patches)
        .into_par_iter()
        .map(|k| {
            let group = groups.get(&k).filter(|g| !g.is_empty()).ok_or(Error::EmptyPatch { index: k })?;
            let rec = reconstruct_lsf(group, None, opts).map_err(|e| match e {
                Error::InvalidInput(_) => Error::EmptyPatch { index: k },
                other => other,
            })?;
            Ok(AtlasPatch {
                start: patch_edges[k],
                end: patch_edges[k + 1],
                lsf: rec.lsf.with_patch_id(format!("patch-{k}")),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LsfAtlas { patches })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_unit_area_and_interpolates() {
        let l = ResponseLsf::gaussian(2.0, 8, 20.0, 0.3).unwrap();
        assert!((l.area() - 1.0).abs() < 1e-12);
        let exact = |x: f64| (-0.5 * (x / 2.0f64).powi(2)).exp() / (2.0 * (2.0 * PI).sqrt());
        for x in [-3.3, -0.01, 0.0, 0.77, 5.123] {
            assert!((l.eval(x) - exact(x)).abs() < 1e-9, "{x}");
            let d = -x / 4.0 * exact(x);
            assert!((l.derivative(x) - d).abs() < 1e-8, "{x}");
        }
        assert_eq!(l.eval(100.0), 0.0);
    }

    #[test]
    fn box_convolution_of_gaussian() {
        let l = ResponseLsf::gaussian(2.0, 8, 24.0, 0.3).unwrap();
        let c = l.convolve_box(1.0);
        let exact = |x: f64| {
            let s = 2.0 * std::f64::consts::SQRT_2;
            0.5 * (statrs::function::erf::erf((x + 0.5) / s) - statrs::function::erf::erf((x - 0.5) / s))
        };
        for x in [-2.0, 0.0, 0.3, 4.0] {
            assert!((c.eval(x) - exact(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn lowpass_keeps_constant_and_kills_high_tone() {
        let flat = Profile1D::new(vec![3.0; 64], 0, 1).unwrap();
        let out = fourier_lowpass(&flat, 0.1).unwrap();
        assert!(out.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let tone: Vec<f64> = (0..64).map(|i| (2.0 * PI * 20.0 * i as f64 / 64.0).sin()).collect();
        let out = fourier_lowpass(&Profile1D::new(tone, 0, 1).unwrap(), 0.2).unwrap();
        assert!(out.values.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn mirrored_lsf_reflects() {
        let l = ResponseLsf::from_fn(|x| (-(x - 1.0).powi(2) / 8.0).exp(), 8, 20.0, 0.3).unwrap();
        let m = l.mirrored();
        for x in [-2.0, 0.5, 3.1] {
            assert!((m.eval(x) - l.eval(-x)).abs() < 1e-12);
        }
    }

    #[test]
    fn atlas_lookup_outside_is_error() {
        let l = ResponseLsf::gaussian(2.0, 8, 20.0, 0.3).unwrap();
        let atlas = LsfAtlas::uniform(l, 10..20);
        assert!(atlas.lookup(15).is_ok());
        assert!(matches!(atlas.lookup(20), Err(Error::OutsideAtlas { column: 20 })));
    }
}
