//! Zernike wavefront model: aberrated pupil → PSF → line spread function,
//! transfer functions, Strehl ratio, and least-squares wavefront fits to a
//! measured response.
//!
//! The 1D optical transfer function is the pupil autocorrelation along the
//! lattice axis, accumulated row by row over the transverse pupil
//! coordinate. Line spread functions are synthesized from it on a periodic
//! window, so they are exactly band-limited at `2 NA/λ`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imaging::Optics;
use crate::lsf::{sinc, ResponseLsf};
use crate::optim::{self, Bounds, LmOptions, Residuals};
use crate::spectral;

/// One RMS-normalized Zernike term `c · Z_n^m(ρ) cos(m(θ − angle))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZernikeTerm {
    pub n: u32,
    pub m: u32,
    /// RMS contribution in waves.
    pub coefficient: f64,
    pub angle_rad: f64,
}

impl ZernikeTerm {
    pub fn new(n: u32, m: u32, coefficient: f64, angle_rad: f64) -> Self {
        ZernikeTerm {
            n,
            m,
            coefficient,
            angle_rad,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.n, self.m) {
            (2, 0) => "defocus",
            (2, 2) => "astigmatism",
            (3, 1) => "coma",
            (3, 3) => "trefoil",
            (4, 0) => "spherical",
            _ => "unsupported",
        }
    }

    /// Wavefront in waves at normalized pupil point `(u, v)`.
    #[inline]
    fn eval(&self, u: f64, v: f64) -> f64 {
        let r2 = u * u + v * v;
        let (c, s) = {
            let m = self.m as f64;
            ((m * self.angle_rad).cos(), (m * self.angle_rad).sin())
        };
        let z = match (self.n, self.m) {
            (2, 0) => 3f64.sqrt() * (2.0 * r2 - 1.0),
            (2, 2) => 6f64.sqrt() * ((u * u - v * v) * c + 2.0 * u * v * s),
            (3, 1) => 8f64.sqrt() * (3.0 * r2 - 2.0) * (u * c + v * s),
            (3, 3) => 8f64.sqrt() * ((u * u * u - 3.0 * u * v * v) * c + (3.0 * u * u * v - v * v * v) * s),
            (4, 0) => 5f64.sqrt() * (6.0 * r2 * r2 - 6.0 * r2 + 1.0),
            _ => 0.0,
        };
        self.coefficient * z
    }
}

const SUPPORTED: [(u32, u32); 5] = [(2, 0), (2, 2), (3, 1), (3, 3), (4, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZernikeWavefront {
    pub terms: Vec<ZernikeTerm>,
    pub na: f64,
    pub wavelength_nm: f64,
    /// Pupil samples across the aperture diameter.
    pub pupil_grid: usize,
}

impl ZernikeWavefront {
    pub fn aberration_free(na: f64, wavelength_nm: f64) -> Self {
        ZernikeWavefront {
            terms: Vec::new(),
            na,
            wavelength_nm,
            pupil_grid: 512,
        }
    }

    /// The measured aberrations of the reference setup. Angles are not
    /// known from the measurement; astigmatism is placed at 60° and the odd
    /// terms along the lattice axis.
    pub fn reference() -> Self {
        ZernikeWavefront {
            terms: vec![
                ZernikeTerm::new(2, 0, 0.016, 0.0),
                ZernikeTerm::new(2, 2, 0.048, PI / 3.0),
                ZernikeTerm::new(3, 1, -0.007, 0.0),
                ZernikeTerm::new(3, 3, -0.025, 0.0),
                ZernikeTerm::new(4, 0, 0.013, 0.0),
            ],
            na: 0.228,
            wavelength_nm: 852.0,
            pupil_grid: 512,
        }
    }

    pub fn with_grid(mut self, pupil_grid: usize) -> Self {
        self.pupil_grid = pupil_grid;
        self
    }

    pub fn coefficient(&self, n: u32, m: u32) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.n == n && t.m == m)
            .map(|t| t.coefficient)
            .sum()
    }

    pub fn term(&self, n: u32, m: u32) -> Option<&ZernikeTerm> {
        self.terms.iter().find(|t| t.n == n && t.m == m)
    }

    /// Quadrature sum of the RMS coefficients (waves).
    pub fn rms(&self) -> f64 {
        self.terms.iter().map(|t| t.coefficient * t.coefficient).sum::<f64>().sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if t.m > t.n || (t.n - t.m) % 2 != 0 {
                return Err(invalid(format!("invalid Zernike order ({}, {})", t.n, t.m)));
            }
            if !SUPPORTED.contains(&(t.n, t.m)) {
                return Err(invalid(format!(
                    "Zernike order ({}, {}) is beyond the supported set",
                    t.n, t.m
                )));
            }
            if !t.coefficient.is_finite() || !t.angle_rad.is_finite() {
                return Err(invalid("Zernike coefficients must be finite"));
            }
        }
        if !(self.na > 0.0 && self.na < 1.0) {
            return Err(invalid("numerical aperture must lie in (0, 1)"));
        }
        if !(self.wavelength_nm > 0.0) {
            return Err(invalid("wavelength must be positive"));
        }
        if self.pupil_grid < 256 {
            return Err(invalid(format!(
                "pupil grid {} too coarse (need at least 256)",
                self.pupil_grid
            )));
        }
        Ok(())
    }

    pub fn wavefront_at(&self, u: f64, v: f64) -> f64 {
        self.terms.iter().map(|t| t.eval(u, v)).sum()
    }

    /// Optical cutoff `2 NA/λ` in cycles per pixel of spacing `delta_s_um`.
    pub fn cutoff_px(&self, delta_s_um: f64) -> f64 {
        2.0 * self.na / (self.wavelength_nm * 1e-3) * delta_s_um
    }
}

/// Sampled pupil: transmission (edge cells partially covered) and complex
/// field, row-major with rows along the transverse coordinate.
struct Pupil {
    n: usize,
    field: Vec<Complex64>,
}

fn cell_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5 - 0.5 * n as f64) / (0.5 * n as f64)
}

/// Fraction of cell `(i, j)` inside the unit disk, by 8×8 supersampling of
/// cells straddling the rim.
fn coverage(i: usize, j: usize, n: usize) -> f64 {
    let h = 1.0 / (0.5 * n as f64);
    let (u, v) = (cell_coord(i, n), cell_coord(j, n));
    let r = (u * u + v * v).sqrt();
    let half_diag = h * std::f64::consts::FRAC_1_SQRT_2;
    if r + half_diag <= 1.0 {
        return 1.0;
    }
    if r - half_diag >= 1.0 {
        return 0.0;
    }
    let k = 8;
    let mut inside = 0;
    for a in 0..k {
        for b in 0..k {
            let uu = u + h * ((a as f64 + 0.5) / k as f64 - 0.5);
            let vv = v + h * ((b as f64 + 0.5) / k as f64 - 0.5);
            if uu * uu + vv * vv <= 1.0 {
                inside += 1;
            }
        }
    }
    inside as f64 / (k * k) as f64
}

fn pupil(w: &ZernikeWavefront) -> Pupil {
    let n = w.pupil_grid;
    let mut field = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let v = cell_coord(j, n);
        for i in 0..n {
            let t = coverage(i, j, n);
            if t == 0.0 {
                continue;
            }
            let u = cell_coord(i, n);
            let phase = 2.0 * PI * w.wavefront_at(u, v);
            field[j * n + i] = Complex64::from_polar(t, phase);
        }
    }
    Pupil { n, field }
}

/// Relative difference between the sampled pupil area and the disk area.
pub fn pupil_area_residual(pupil_grid: usize) -> f64 {
    let n = pupil_grid;
    let mut area = 0.0;
    for j in 0..n {
        for i in 0..n {
            area += coverage(i, j, n);
        }
    }
    let exact = PI * (0.5 * n as f64).powi(2);
    (area - exact).abs() / exact
}

/// 1D OTF sampled at `κ_j = j/n` of the cutoff, `j = 0..=n`.
struct OtfTable {
    values: Vec<Complex64>,
}

impl OtfTable {
    fn from_pupil(p: &Pupil) -> OtfTable {
        let n = p.n;
        let len = 2 * n;
        let mut acc = vec![Complex64::new(0.0, 0.0); n + 1];
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for j in 0..n {
            let row = &p.field[j * n..(j + 1) * n];
            if row.iter().all(|c| c.norm_sqr() == 0.0) {
                continue;
            }
            buf[..n].copy_from_slice(row);
            buf[n..].fill(Complex64::new(0.0, 0.0));
            spectral::fft_in_place(&mut buf);
            for c in buf.iter_mut() {
                *c = Complex64::new(c.norm_sqr(), 0.0);
            }
            spectral::ifft_in_place(&mut buf);
            // ifft(|F|²)[j] = Σ_u conj(p[u]) p[u + j]
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        let norm = acc[0].re;
        OtfTable {
            values: acc.into_iter().map(|c| c / norm).collect(),
        }
    }

    /// OTF at `kappa` in units of the cutoff.
    fn at(&self, kappa: f64) -> Complex64 {
        let n = self.values.len() - 1;
        let x = kappa.abs() * n as f64;
        if x >= n as f64 {
            return Complex64::new(0.0, 0.0);
        }
        let i = x as usize;
        let t = x - i as f64;
        let v = self.values[i] * (1.0 - t) + self.values[i + 1] * t;
        if kappa < 0.0 {
            v.conj()
        } else {
            v
        }
    }
}

/// Sampling grid for synthesized responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsfGrid {
    pub s: usize,
    /// Number of samples; the window spans `n_samples / s` pixels.
    pub n_samples: usize,
    /// Coordinate of the first sample (pixels).
    pub x0: f64,
    pub delta_s_um: f64,
}

impl LsfGrid {
    /// Symmetric window of `2·half_width_px` pixels.
    pub fn centered(s: usize, half_width_px: usize, delta_s_um: f64) -> Self {
        LsfGrid {
            s,
            n_samples: 2 * half_width_px * s,
            x0: -(half_width_px as f64),
            delta_s_um,
        }
    }

    pub fn of(lsf: &ResponseLsf) -> Self {
        LsfGrid {
            s: lsf.s(),
            n_samples: lsf.samples().len(),
            x0: lsf.x0(),
            delta_s_um: lsf.delta_s_um(),
        }
    }

    fn window_px(&self) -> f64 {
        self.n_samples as f64 / self.s as f64
    }
}

impl Default for LsfGrid {
    fn default() -> Self {
        let optics = Optics::default();
        LsfGrid::centered(8, (10.0 * optics.abbe_radius_px()).ceil() as usize, optics.delta_s_um)
    }
}

/// Response samples on `grid` from an OTF table: periodic band-limited
/// synthesis, optionally convolved with a pixel box of `aperture_px` and
/// shifted by `shift` pixels.
fn synthesize(otf: &OtfTable, kc: f64, grid: &LsfGrid, aperture_px: f64, shift: f64) -> Vec<f64> {
    let m = grid.n_samples;
    let wlen = grid.window_px();
    let qmax = (kc * wlen).floor() as i64;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for q in -qmax..=qmax {
        if 2 * q.unsigned_abs() as usize >= m {
            continue;
        }
        let k = q as f64 / wlen;
        let mut c = otf.at(k / kc);
        if aperture_px > 0.0 {
            c *= sinc(PI * k * aperture_px);
        }
        c *= Complex64::from_polar(1.0, 2.0 * PI * k * (grid.x0 - shift));
        buf[q.rem_euclid(m as i64) as usize] = c;
    }
    spectral::ifft_in_place(&mut buf);
    let scale = m as f64 / wlen;
    buf.into_iter().map(|c| c.re * scale).collect()
}

fn otf_for(w: &ZernikeWavefront) -> OtfTable {
    OtfTable::from_pupil(&pupil(w))
}

/// Optical line spread function: the PSF `|FT(pupil · e^{i2πW})|²`
/// integrated across the transverse axis, area-normalized.
pub fn lsf_from_wavefront(w: &ZernikeWavefront, grid: &LsfGrid) -> Result<ResponseLsf> {
    response_from_wavefront(w, grid, 0.0)
}

/// The optical response convolved with a pixel aperture of `aperture_px`.
pub fn response_from_wavefront(w: &ZernikeWavefront, grid: &LsfGrid, aperture_px: f64) -> Result<ResponseLsf> {
    w.validate()?;
    let residual = pupil_area_residual(w.pupil_grid);
    if residual > 1e-4 {
        return Err(invalid(format!(
            "pupil grid {} too coarse: area residual {residual:.2e}",
            w.pupil_grid
        )));
    }
    let otf = otf_for(w);
    let kc = w.cutoff_px(grid.delta_s_um);
    let samples = synthesize(&otf, kc, grid, aperture_px, 0.0);
    ResponseLsf::new(samples, grid.s, grid.x0, grid.delta_s_um)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mtf {
    /// Frequencies in cycles per pixel.
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest frequency with `mtf > 1e-3`.
    pub cutoff: f64,
}

impl Mtf {
    /// NA implied by the cutoff for the given wavelength and pixel spacing.
    pub fn na_estimate(&self, wavelength_nm: f64, delta_s_um: f64) -> f64 {
        self.cutoff / delta_s_um * wavelength_nm * 1e-3 / 2.0
    }

    pub fn bin_width(&self) -> f64 {
        self.freqs.get(1).copied().unwrap_or(0.0)
    }
}

/// Modulus of the Fourier transform of `lsf` at the DFT frequencies of its
/// stored grid, normalized to one at zero frequency.
pub fn mtf_of(lsf: &ResponseLsf) -> Mtf {
    let m = lsf.samples().len();
    let dk = lsf.s() as f64 / m as f64;
    let zero = lsf.otf(0.0).norm();
    let freqs: Vec<f64> = (0..=m / 2).map(|q| q as f64 * dk).collect();
    let values: Vec<f64> = freqs
        .iter()
        .enumerate()
        .map(|(q, &k)| if q == 0 { 1.0 } else { lsf.otf(k).norm() / zero })
        .collect();
    let cutoff = freqs
        .iter()
        .zip(&values)
        .filter(|(_, &v)| v > 1e-3)
        .map(|(&k, _)| k)
        .fold(0.0, f64::max);
    Mtf {
        freqs,
        values,
        cutoff,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferFunctions {
    pub mtf: Mtf,
    pub lsf: ResponseLsf,
    pub strehl: f64,
    pub rms_error: f64,
}

pub fn transfer_functions(w: &ZernikeWavefront, grid: &LsfGrid) -> Result<TransferFunctions> {
    let lsf = lsf_from_wavefront(w, grid)?;
    let (strehl, rms_error) = strehl_and_rms(w)?;
    Ok(TransferFunctions {
        mtf: mtf_of(&lsf),
        lsf,
        strehl,
        rms_error,
    })
}

/// Focal-plane field of a pupil at image point `(x, y)` in units of
/// `λ/NA` scaled so the pupil edge sits at unit frequency.
fn field_at(p: &Pupil, x: f64, y: f64) -> Complex64 {
    let n = p.n;
    let h = 1.0 / (0.5 * n as f64);
    let ex: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(1.0, 2.0 * PI * cell_coord(i, n) * x))
        .collect();
    let step = Complex64::from_polar(1.0, 2.0 * PI * h * y);
    let mut ey = Complex64::from_polar(1.0, 2.0 * PI * cell_coord(0, n) * y);
    let mut total = Complex64::new(0.0, 0.0);
    for j in 0..n {
        let row = &p.field[j * n..(j + 1) * n];
        let mut acc = Complex64::new(0.0, 0.0);
        for (f, e) in row.iter().zip(&ex) {
            acc += f * e;
        }
        total += acc * ey;
        ey *= step;
    }
    total
}

/// |FT|² of the pupil zero-padded to twice its size, row-major.
fn intensity_map(p: &Pupil) -> Vec<f64> {
    let n = p.n;
    let big = 2 * n;
    let mut grid = vec![Complex64::new(0.0, 0.0); big * big];
    for j in 0..n {
        grid[j * big..j * big + n].copy_from_slice(&p.field[j * n..(j + 1) * n]);
    }
    for r in 0..big {
        spectral::fft_in_place(&mut grid[r * big..(r + 1) * big]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); big];
    let mut out = vec![0.0; big * big];
    for c in 0..big {
        for r in 0..big {
            col[r] = grid[r * big + c];
        }
        spectral::fft_in_place(&mut col);
        for (r, v) in col.iter().enumerate() {
            out[r * big + c] = v.norm_sqr();
        }
    }
    out
}

/// Squared sum of the pupil transmission: the aberration-free peak.
fn ideal_peak(p: &Pupil) -> f64 {
    let t: f64 = p.field.iter().map(|c| c.norm()).sum();
    t * t
}

/// 2D PSF at `(x_um, y_um)` from the optical axis in the object plane, in
/// units of the aberration-free peak.
pub fn psf_at(w: &ZernikeWavefront, x_um: f64, y_um: f64) -> Result<f64> {
    w.validate()?;
    let p = pupil(w);
    let scale = w.na / (w.wavelength_nm * 1e-3);
    Ok(field_at(&p, x_um * scale, y_um * scale).norm_sqr() / ideal_peak(&p))
}

/// 2D PSF on the periodic grid of the twice zero-padded pupil transform,
/// in units of the aberration-free peak. Returns the `m × m` row-major
/// values (optical axis at index 0) and the sample spacing in µm.
pub fn psf_grid(w: &ZernikeWavefront) -> Result<(Vec<f64>, usize, f64)> {
    w.validate()?;
    let p = pupil(w);
    let norm = ideal_peak(&p);
    let values = intensity_map(&p).into_iter().map(|v| v / norm).collect();
    // bin q is q/(2n·h) = q/4 in units of λ/NA
    let spacing = w.wavelength_nm * 1e-3 / w.na / 4.0;
    Ok((values, 2 * p.n, spacing))
}

fn peak_intensity(p: &Pupil) -> f64 {
    // coarse map from a zero-padded 2D transform, then pattern search
    let n = p.n;
    let big = 2 * n;
    let map = intensity_map(p);
    let mut best = (0usize, 0usize, 0.0f64);
    for (k, &i) in map.iter().enumerate() {
        if i > best.2 {
            best = (k / big, k % big, i);
        }
    }
    // FFT bin q corresponds to image coordinate -q/(big·h) with h the cell
    // size in normalized pupil units
    let h = 1.0 / (0.5 * n as f64);
    let to_coord = |q: usize| -spectral::bin_frequency(q, big) / h;
    let (mut x, mut y) = (to_coord(best.1), to_coord(best.0));
    let mut val = field_at(p, x, y).norm_sqr();
    let mut step = 0.5 / (big as f64 * h);
    while step > 1e-5 {
        let mut improved = false;
        for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
            let (cx, cy) = (x + dx * step, y + dy * step);
            let v = field_at(p, cx, cy).norm_sqr();
            if v > val {
                (x, y, val) = (cx, cy, v);
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    val
}

/// Strehl ratio (aberrated to ideal 2D PSF peak at equal pupil energy)
/// and quadrature RMS of the coefficients in waves.
pub fn strehl_and_rms(w: &ZernikeWavefront) -> Result<(f64, f64)> {
    w.validate()?;
    let rms = w.rms();
    if w.terms.iter().all(|t| t.coefficient == 0.0) {
        return Ok((1.0, rms));
    }
    let aberrated = pupil(w);
    let peak = peak_intensity(&aberrated);
    Ok(((peak / ideal_peak(&aberrated)).min(1.0), rms))
}

/// Peak of the aberrated optical LSF relative to the aberration-free one.
pub fn lsf_peak_ratio(w: &ZernikeWavefront, grid: &LsfGrid) -> Result<f64> {
    let ideal = ZernikeWavefront {
        terms: Vec::new(),
        ..w.clone()
    };
    let fine = LsfGrid {
        s: grid.s.max(32),
        n_samples: grid.n_samples / grid.s * grid.s.max(32),
        ..*grid
    };
    let a = lsf_from_wavefront(w, &fine)?;
    let b = lsf_from_wavefront(&ideal, &fine)?;
    Ok(a.peak() / b.peak())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AngleMode {
    /// Angles held at the values of the initial wavefront.
    Fixed,
    /// Angles of astigmatism, coma and trefoil fitted.
    Free,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WavefrontFitOptions {
    /// Starting point; its terms define which orders are fitted and, in
    /// fixed mode, their angles.
    pub initial: ZernikeWavefront,
    pub angle_mode: AngleMode,
    /// Pixel aperture (pixels) convolved into the model.
    pub aperture_px: f64,
    pub max_iters: usize,
}

impl Default for WavefrontFitOptions {
    fn default() -> Self {
        let reference = ZernikeWavefront::reference();
        let initial = ZernikeWavefront {
            terms: reference
                .terms
                .iter()
                .map(|t| ZernikeTerm::new(t.n, t.m, 0.0, t.angle_rad))
                .collect(),
            ..reference
        };
        WavefrontFitOptions {
            initial,
            angle_mode: AngleMode::Fixed,
            aperture_px: 1.0,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub name: String,
    pub value: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WavefrontFit {
    pub wavefront: ZernikeWavefront,
    /// Offset of the measured response relative to the model (pixels).
    pub shift: f64,
    pub parameters: Vec<ParameterEstimate>,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Reciprocal condition number of the parameter correlation matrix.
    pub rcond: f64,
    /// Groups of parameters spanning near-null directions of the fit.
    pub degenerate: Vec<Vec<String>>,
    /// The fit first landed on the twin with negated even-order terms and
    /// was moved to the non-negative-defocus one.
    pub twin_flipped: bool,
}

struct WavefrontProblem<'a> {
    measured: &'a ResponseLsf,
    grid: LsfGrid,
    base: ZernikeWavefront,
    mode: AngleMode,
    aperture_px: f64,
}

impl WavefrontProblem<'_> {
    fn names(&self) -> Vec<String> {
        let mut names = vec!["shift".to_string(), "na".to_string()];
        names.extend(self.base.terms.iter().map(|t| t.name().to_string()));
        if self.mode == AngleMode::Free {
            names.extend(
                self.base
                    .terms
                    .iter()
                    .filter(|t| t.m > 0)
                    .map(|t| format!("{}_angle", t.name())),
            );
        }
        names
    }

    fn pack(&self, w: &ZernikeWavefront, shift: f64) -> Vec<f64> {
        let mut p = vec![shift, w.na];
        p.extend(w.terms.iter().map(|t| t.coefficient));
        if self.mode == AngleMode::Free {
            p.extend(w.terms.iter().filter(|t| t.m > 0).map(|t| t.angle_rad));
        }
        p
    }

    fn unpack(&self, p: &[f64]) -> (ZernikeWavefront, f64) {
        let mut w = self.base.clone();
        w.na = p[1];
        let nt = w.terms.len();
        for (t, c) in w.terms.iter_mut().zip(&p[2..2 + nt]) {
            t.coefficient = *c;
        }
        if self.mode == AngleMode::Free {
            let mut k = 2 + nt;
            for t in w.terms.iter_mut().filter(|t| t.m > 0) {
                t.angle_rad = p[k];
                k += 1;
            }
        }
        (w, p[0])
    }

    fn model(&self, p: &[f64]) -> Vec<f64> {
        let (w, shift) = self.unpack(p);
        let otf = otf_for(&w);
        synthesize(&otf, w.cutoff_px(self.grid.delta_s_um), &self.grid, self.aperture_px, shift)
    }
}

impl Residuals for WavefrontProblem<'_> {
    fn n_residuals(&self) -> usize {
        self.grid.n_samples
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let model = self.model(p);
        for ((o, m), y) in out.iter_mut().zip(&model).zip(self.measured.samples()) {
            *o = m - y;
        }
    }
}

const RADIAL_STARTS: [(f64, f64); 8] = [
    (0.03, 0.0),
    (-0.03, 0.0),
    (0.0, 0.03),
    (0.0, -0.03),
    (0.03, 0.03),
    (-0.03, -0.03),
    (0.03, -0.03),
    (-0.03, 0.03),
];
const SCOUT_ITERS: usize = 12;

/// Groups of parameters with large weight in eigenvectors of the
/// correlation matrix whose eigenvalue is below `tol` times the largest.
fn degeneracies(jac: &DMatrix<f64>, names: &[String], tol: f64) -> (f64, Vec<Vec<String>>) {
    let jtj = jac.transpose() * jac;
    let n = jtj.nrows();
    let d: Vec<f64> = (0..n).map(|i| jtj[(i, i)].max(1e-300).sqrt()).collect();
    let corr = DMatrix::from_fn(n, n, |i, j| jtj[(i, j)] / (d[i] * d[j]));
    let eig = SymmetricEigen::new(corr);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut groups = Vec::new();
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev < tol * max {
            let v = eig.eigenvectors.column(k);
            let group: Vec<String> = (0..n)
                .filter(|&i| v[i].abs() > 0.2)
                .map(|i| names[i].clone())
                .collect();
            groups.push(group);
        }
    }
    (min.max(0.0) / max, groups)
}

/// Least-squares fit of the wavefront model (NA, Zernike coefficients and,
/// in free mode, azimuthal angles, plus a registration offset) to a
/// measured response.
///
/// Along one axis the data constrain only some combinations of terms: each
/// pupil row's constant phase drops out of the transverse integral. The
/// report flags parameter groups that span near-null directions.
pub fn fit_wavefront(measured: &ResponseLsf, opts: &WavefrontFitOptions) -> Result<WavefrontFit> {
    opts.initial.validate()?;
    let optics_ra = opts.initial.wavelength_nm * 1e-3 / (2.0 * opts.initial.na) / measured.delta_s_um();
    let (lo, hi) = measured.support();
    if lo > -5.0 * optics_ra || hi < 5.0 * optics_ra {
        return Err(invalid("measured response must cover at least ±5 Abbe radii"));
    }
    let problem = WavefrontProblem {
        measured,
        grid: LsfGrid::of(measured),
        base: opts.initial.clone(),
        mode: opts.angle_mode,
        aperture_px: opts.aperture_px,
    };
    let shift0 = measured.centroid()
        - ResponseLsf::new(problem.model(&problem.pack(&opts.initial, 0.0)), measured.s(), measured.x0(), measured.delta_s_um())?
            .centroid();
    let x_init = problem.pack(&opts.initial, shift0);
    let np = x_init.len();
    let mut lower = vec![f64::NEG_INFINITY; np];
    let mut upper = vec![f64::INFINITY; np];
    lower[1] = 0.02;
    upper[1] = 0.95;
    for i in 2..2 + opts.initial.terms.len() {
        lower[i] = -0.5;
        upper[i] = 0.5;
    }
    let bounds = Bounds { lower, upper };
    let lm = LmOptions {
        max_iters: opts.max_iters,
        ftol: 1e-12,
        ..LmOptions::default()
    };
    // the radially symmetric terms trade off against each other along one
    // axis; short runs from a few offsets pick the basin before polishing
    let idx = |n: u32, m: u32| opts.initial.terms.iter().position(|t| t.n == n && t.m == m).map(|k| 2 + k);
    let mut starts = vec![x_init.clone()];
    if let (Some(d), Some(s)) = (idx(2, 0), idx(4, 0)) {
        for &(dd, ds) in &RADIAL_STARTS {
            let mut x = x_init.clone();
            x[d] = (x[d] + dd).clamp(-0.5, 0.5);
            x[s] = (x[s] + ds).clamp(-0.5, 0.5);
            starts.push(x);
        }
    }
    let scout = LmOptions {
        max_iters: SCOUT_ITERS.min(opts.max_iters),
        ..lm.clone()
    };
    let x0 = if starts.len() > 1 {
        starts
            .par_iter()
            .map(|x| optim::minimize(&problem, x, Some(&bounds), &scout))
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
            .map(|r| r.params)
            .unwrap_or(x_init)
    } else {
        x_init
    };
    let mut res = optim::minimize(&problem, &x0, Some(&bounds), &lm);
    // negating every even-order term leaves the integrated response
    // unchanged here; report the twin with non-negative defocus
    let mut twin_flipped = false;
    if let Some(d) = idx(2, 0) {
        if res.params[d] < 0.0 {
            let mut x = res.params.clone();
            for (k, t) in opts.initial.terms.iter().enumerate() {
                if t.n % 2 == 0 {
                    x[2 + k] = -x[2 + k];
                }
            }
            let twin = optim::minimize(&problem, &x, Some(&bounds), &lm);
            if twin.cost <= res.cost * (1.0 + 1e-6) + 1e-24 {
                res = twin;
                twin_flipped = true;
            }
        }
    }
    let names = problem.names();
    let dof = problem.grid.n_samples.saturating_sub(np);
    let cov = res.covariance(dof);
    let parameters = names
        .iter()
        .enumerate()
        .map(|(i, name)| ParameterEstimate {
            name: name.clone(),
            value: res.params[i],
            uncertainty: cov.as_ref().map(|c| c[(i, i)].max(0.0).sqrt()).unwrap_or(f64::NAN),
        })
        .collect();
    let (rcond, degenerate) = degeneracies(&res.jacobian, &names, 1e-9);
    let (mut wavefront, shift) = problem.unpack(&res.params);
    // report odd-m angles in [0, 2π/m)
    for t in wavefront.terms.iter_mut().filter(|t| t.m > 0) {
        let period = 2.0 * PI / t.m as f64;
        t.angle_rad = t.angle_rad.rem_euclid(period);
    }
    Ok(WavefrontFit {
        wavefront,
        shift,
        parameters,
        residual_rms: (res.cost / problem.grid.n_samples as f64).sqrt(),
        iterations: res.iterations,
        converged: res.converged(),
        rcond,
        degenerate,
        twin_flipped,
    })
}
