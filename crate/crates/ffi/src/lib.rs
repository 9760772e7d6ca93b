//! C ABI for latloc.
//!
//! Every fallible call returns an [`LlStatus`] and writes its result
//! through an out pointer. On failure the message is kept per thread and
//! can be read with [`ll_last_error_message`]. Objects are opaque handles
//! released with their `_free` function; strings returned by the library
//! are released with [`ll_string_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use latloc::bench::Responses;
use latloc::imaging::{integrate_transverse, simulate_exposure, AtomConfig, FrameSpec, LatticeModel, Optics, Profile1D};
use latloc::localize::{analyze_profile, precision_bound, AnalyzeOptions, Calibration, FrameResult};
use latloc::lsf::{LsfAtlas, ResponseLsf};
use latloc::noise::{sigma_model, NoiseParams};
use latloc::rng;
use latloc::wavefront::ZernikeWavefront;
use latloc::Error;

/// Status codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NonConvergence = 3,
    TooManyEmitters = 4,
    NoLatticeConstant = 5,
    OutsideAtlas = 6,
    Config = 7,
    CalibrationMissing = 8,
    Io = 9,
    BufferTooSmall = 10,
    OutOfRange = 11,
    Panic = 12,
}

/// Noise parameters of the compact and channel models.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LlNoise {
    pub sigma_b: f64,
    pub c1: f64,
    pub c2: f64,
    pub g: f64,
    pub sigma_ro: f64,
    pub cic_rate: f64,
    pub dark_rate: f64,
    pub stray_rate: f64,
    pub em_enabled: bool,
}

impl From<&NoiseParams> for LlNoise {
    fn from(p: &NoiseParams) -> Self {
        LlNoise {
            sigma_b: p.sigma_b,
            c1: p.c1,
            c2: p.c2,
            g: p.g,
            sigma_ro: p.sigma_ro,
            cic_rate: p.cic_rate,
            dark_rate: p.dark_rate,
            stray_rate: p.stray_rate,
            em_enabled: p.em_enabled,
        }
    }
}

impl From<&LlNoise> for NoiseParams {
    fn from(n: &LlNoise) -> Self {
        NoiseParams {
            sigma_b: n.sigma_b,
            c1: n.c1,
            c2: n.c2,
            g: n.g,
            sigma_ro: n.sigma_ro,
            cic_rate: n.cic_rate,
            dark_rate: n.dark_rate,
            stray_rate: n.stray_rate,
            intensity_rel: 0.0,
            prnu_rel: 0.0,
            em_enabled: n.em_enabled,
            calibration_gain: None,
        }
    }
}

/// Sampled line spread function.
pub struct LlLsf(ResponseLsf);

/// Analysis result of one profile.
pub struct LlResult(FrameResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LlStatus {
    match e {
        Error::InvalidInput(_) | Error::EmptyPatch { .. } => LlStatus::InvalidInput,
        Error::NonConvergence { .. } => LlStatus::NonConvergence,
        Error::TooManyEmitters { .. } => LlStatus::TooManyEmitters,
        Error::NoLatticeConstant { .. } => LlStatus::NoLatticeConstant,
        Error::OutsideAtlas { .. } => LlStatus::OutsideAtlas,
        Error::Config(_) => LlStatus::Config,
        Error::CalibrationMissing(_) => LlStatus::CalibrationMissing,
        Error::Io(_) | Error::Json(_) => LlStatus::Io,
    }
}

struct Fail(LlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(LlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LlStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            LlStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ll_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a
/// success). Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ll_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default detector noise.
#[no_mangle]
pub unsafe extern "C" fn ll_noise_default(out_noise: *mut LlNoise) -> LlStatus {
    guard(|| {
        *out(out_noise, "out_noise")? = LlNoise::from(&NoiseParams::default());
        Ok(())
    })
}

/// Gaussian response of rms `sigma_px` sampled `s` times per pixel over
/// `±half_width_px`.
#[no_mangle]
pub unsafe extern "C" fn ll_lsf_new_gaussian(
    sigma_px: f64,
    s: usize,
    half_width_px: f64,
    delta_s_um: f64,
    out_lsf: *mut *mut LlLsf,
) -> LlStatus {
    guard(|| {
        let o = out(out_lsf, "out_lsf")?;
        let l = ResponseLsf::gaussian(sigma_px, s, half_width_px, delta_s_um)?;
        *o = Box::into_raw(Box::new(LlLsf(l)));
        Ok(())
    })
}

/// Response from `n` samples at `x0 + j/s` pixels.
#[no_mangle]
pub unsafe extern "C" fn ll_lsf_from_samples(
    samples: *const f64,
    n: usize,
    s: usize,
    x0: f64,
    delta_s_um: f64,
    out_lsf: *mut *mut LlLsf,
) -> LlStatus {
    guard(|| {
        let o = out(out_lsf, "out_lsf")?;
        let v = slice(samples, n, "samples")?.to_vec();
        let l = ResponseLsf::new(v, s, x0, delta_s_um)?;
        *o = Box::into_raw(Box::new(LlLsf(l)));
        Ok(())
    })
}

/// Responses of the default optics with the reference aberrations:
/// the optical one (for simulation) and the pixel-integrated one (for
/// analysis). Either out pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn ll_lsf_default_optics(out_optical: *mut *mut LlLsf, out_ccd: *mut *mut LlLsf) -> LlStatus {
    guard(|| {
        let r = Responses::from_wavefront(&ZernikeWavefront::reference(), &Optics::default())?;
        if let Some(o) = out_optical.as_mut() {
            *o = Box::into_raw(Box::new(LlLsf(r.optical)));
        }
        if let Some(o) = out_ccd.as_mut() {
            *o = Box::into_raw(Box::new(LlLsf(r.ccd)));
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_lsf_eval(lsf: *const LlLsf, x: f64, out_value: *mut f64) -> LlStatus {
    guard(|| {
        let l = handle(lsf, "lsf")?;
        *out(out_value, "out_value")? = l.0.eval(x);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_lsf_free(lsf: *mut LlLsf) {
    if !lsf.is_null() {
        drop(Box::from_raw(lsf));
    }
}

/// `√(σ_b² + c1² S + c2² S²)`.
#[no_mangle]
pub unsafe extern "C" fn ll_sigma_model(s: f64, noise: *const LlNoise, out_sigma: *mut f64) -> LlStatus {
    guard(|| {
        let n = NoiseParams::from(handle(noise, "noise")?);
        *out(out_sigma, "out_sigma")? = sigma_model(s, &n);
        Ok(())
    })
}

/// Single-emitter localization precision in the unit of the inputs.
#[no_mangle]
pub unsafe extern "C" fn ll_precision_bound(
    rms_psf: f64,
    delta_p: f64,
    n_photons: f64,
    sigma_b: f64,
    n_perp: usize,
    emccd: bool,
    out_bound: *mut f64,
) -> LlStatus {
    guard(|| {
        *out(out_bound, "out_bound")? = precision_bound(rms_psf, delta_p, n_photons, sigma_b, n_perp, emccd);
        Ok(())
    })
}

/// Simulates one exposure of `n_atoms` emitters through the optical
/// response `lsf` with the default optics and writes the transversely
/// integrated profile (`n_cols` values) to `out_values`.
#[no_mangle]
pub unsafe extern "C" fn ll_simulate_profile(
    lsf: *const LlLsf,
    positions: *const f64,
    amplitudes: *const f64,
    n_atoms: usize,
    noise: *const LlNoise,
    n_cols: usize,
    n_rows: usize,
    seed: u64,
    out_values: *mut f64,
    capacity: usize,
) -> LlStatus {
    guard(|| {
        let l = handle(lsf, "lsf")?;
        let n = NoiseParams::from(handle(noise, "noise")?);
        let pos = slice(positions, n_atoms, "positions")?.to_vec();
        let amp = slice(amplitudes, n_atoms, "amplitudes")?.to_vec();
        if out_values.is_null() {
            return Err(null("out_values"));
        }
        if capacity < n_cols {
            return Err(Fail(
                LlStatus::BufferTooSmall,
                format!("buffer holds {capacity} values, {n_cols} needed"),
            ));
        }
        let atoms = AtomConfig::new(pos, amp)?;
        let frame = FrameSpec {
            n_cols,
            n_rows,
            ..FrameSpec::default()
        };
        let mut r = rng::seeded(seed);
        let img = simulate_exposure(&atoms, &l.0, &n, &Optics::default(), &frame, &mut r)?;
        let p = integrate_transverse(&img, 0..n_rows)?;
        std::slice::from_raw_parts_mut(out_values, n_cols).copy_from_slice(&p.values);
        Ok(())
    })
}

/// Analyzes a background-containing profile of `n` values summed over
/// `n_perp` rows. `lsf` is the pixel-integrated response; every region is
/// assumed to hold `atoms_per_roi` emitters.
#[no_mangle]
pub unsafe extern "C" fn ll_analyze_profile(
    values: *const f64,
    n: usize,
    n_perp: usize,
    lsf: *const LlLsf,
    noise: *const LlNoise,
    a_px: f64,
    delta_l: f64,
    atoms_per_roi: usize,
    out_result: *mut *mut LlResult,
) -> LlStatus {
    guard(|| {
        let o = out(out_result, "out_result")?;
        let v = slice(values, n, "values")?.to_vec();
        let l = handle(lsf, "lsf")?;
        let noise = NoiseParams::from(handle(noise, "noise")?);
        let optics = Optics::default();
        let cal = Calibration {
            id: "ffi".into(),
            optics: optics.clone(),
            noise,
            atlas: LsfAtlas::uniform(l.0.clone(), 0..usize::MAX),
            lattice: LatticeModel::new(a_px, delta_l, optics.lattice_nm)?,
            histogram: None,
        };
        let opts = AnalyzeOptions {
            atoms_per_roi: if atoms_per_roi == 0 { None } else { Some(atoms_per_roi) },
            ..AnalyzeOptions::default()
        };
        let profile = Profile1D::new(v, 0, n_perp)?;
        let res = analyze_profile(&profile, &cal, &opts)?;
        *o = Box::into_raw(Box::new(LlResult(res)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_result_roi_count(res: *const LlResult, out_count: *mut usize) -> LlStatus {
    guard(|| {
        let r = handle(res, "result")?;
        *out(out_count, "out_count")? = r.0.rois.len();
        Ok(())
    })
}

/// Positions (pixels) of region `roi`, from the discrete fit when
/// `discrete` is set and the continuous one otherwise. `out_len` receives
/// the number of emitters even when the buffer is too small.
#[no_mangle]
pub unsafe extern "C" fn ll_result_positions(
    res: *const LlResult,
    roi: usize,
    discrete: bool,
    out_positions: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> LlStatus {
    guard(|| {
        let r = handle(res, "result")?;
        let len = out(out_len, "out_len")?;
        let region = r.0.rois.get(roi).ok_or_else(|| {
            Fail(LlStatus::OutOfRange, format!("region {roi} of {}", r.0.rois.len()))
        })?;
        let est = if discrete { &region.discrete } else { &region.continuous };
        let xi: &[f64] = est.as_ref().map(|e| e.xi.as_slice()).unwrap_or(&[]);
        *len = xi.len();
        if xi.is_empty() {
            return Ok(());
        }
        if out_positions.is_null() {
            return Err(null("out_positions"));
        }
        if capacity < xi.len() {
            return Err(Fail(
                LlStatus::BufferTooSmall,
                format!("buffer holds {capacity} values, {} needed", xi.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out_positions, xi.len()).copy_from_slice(xi);
        Ok(())
    })
}

/// Lattice sites of region `roi` from the discrete fit.
#[no_mangle]
pub unsafe extern "C" fn ll_result_sites(
    res: *const LlResult,
    roi: usize,
    out_sites: *mut i64,
    capacity: usize,
    out_len: *mut usize,
) -> LlStatus {
    guard(|| {
        let r = handle(res, "result")?;
        let len = out(out_len, "out_len")?;
        let region = r.0.rois.get(roi).ok_or_else(|| {
            Fail(LlStatus::OutOfRange, format!("region {roi} of {}", r.0.rois.len()))
        })?;
        let p: &[i64] = region.discrete.as_ref().map(|e| e.p.as_slice()).unwrap_or(&[]);
        *len = p.len();
        if p.is_empty() {
            return Ok(());
        }
        if out_sites.is_null() {
            return Err(null("out_sites"));
        }
        if capacity < p.len() {
            return Err(Fail(
                LlStatus::BufferTooSmall,
                format!("buffer holds {capacity} values, {} needed", p.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out_sites, p.len()).copy_from_slice(p);
        Ok(())
    })
}

/// JSON record of the result; release with [`ll_string_free`].
#[no_mangle]
pub unsafe extern "C" fn ll_result_to_json(res: *const LlResult, out_json: *mut *mut c_char) -> LlStatus {
    guard(|| {
        let r = handle(res, "result")?;
        let o = out(out_json, "out_json")?;
        let s = serde_json::to_string(&r.0).map_err(Error::from)?;
        *o = CString::new(s)
            .map_err(|e| Fail(LlStatus::InvalidInput, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ll_result_free(res: *mut LlResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ll_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Length of a NUL-terminated string returned by the library, or zero for
/// null.
#[no_mangle]
pub unsafe extern "C" fn ll_string_len(s: *const c_char) -> usize {
    if s.is_null() {
        0
    } else {
        CStr::from_ptr(s).to_bytes().len()
    }
}
