//! Discrete Fourier helpers shared by the filtering, upsampling and
//! deconvolution stages.
//!
//! Conventions: forward transform `X[q] = Σ x[n] e^{-i2π qn/N}`, inverse
//! carries the `1/N`. Frequencies are in cycles per sample.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn fft_in_place(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()));
    plan.process(buf);
}

pub fn ifft_in_place(buf: &mut [Complex64]) {
    if buf.is_empty() {
        return;
    }
    let n = buf.len();
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
    plan.process(buf);
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

pub fn fft_real(values: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    buf
}

/// Real part of the inverse transform.
pub fn ifft_to_real(mut spectrum: Vec<Complex64>) -> Vec<f64> {
    ifft_in_place(&mut spectrum);
    spectrum.into_iter().map(|c| c.re).collect()
}

/// Signed frequency of bin `q` of an `n`-point transform, in cycles/sample.
#[inline]
pub fn bin_frequency(q: usize, n: usize) -> f64 {
    let q = q as i64;
    let n_i = n as i64;
    let signed = if 2 * q < n_i { q } else { q - n_i };
    signed as f64 / n as f64
}

/// Zero-padding interpolation by an integer factor. The returned sequence
/// has `values.len() * factor` samples and reproduces the input at stride
/// `factor`. An even-length Nyquist bin is split symmetrically so the
/// output stays real.
pub fn zero_pad_upsample(values: &[f64], factor: usize) -> Vec<f64> {
    let n = values.len();
    if factor <= 1 || n == 0 {
        return values.to_vec();
    }
    let spec = fft_real(values);
    let big = n * factor;
    let mut padded = vec![Complex64::new(0.0, 0.0); big];
    let half = n / 2;
    if n % 2 == 0 {
        for q in 0..half {
            padded[q] = spec[q];
        }
        for q in (half + 1)..n {
            padded[big - (n - q)] = spec[q];
        }
        let nyq = spec[half] * 0.5;
        padded[half] = nyq;
        padded[big - half] = nyq;
    } else {
        for q in 0..=half {
            padded[q] = spec[q];
        }
        for q in (half + 1)..n {
            padded[big - (n - q)] = spec[q];
        }
    }
    let scale = factor as f64;
    ifft_to_real(padded).into_iter().map(|v| v * scale).collect()
}

/// Shifts a periodic band-limited sequence by `shift` samples (positive
/// moves features to larger indices) with a linear phase ramp.
pub fn fourier_shift(values: &[f64], shift: f64) -> Vec<f64> {
    let n = values.len();
    if n == 0 || shift == 0.0 {
        return values.to_vec();
    }
    let mut spec = fft_real(values);
    for (q, c) in spec.iter_mut().enumerate() {
        let k = bin_frequency(q, n);
        if n % 2 == 0 && 2 * q == n {
            // Nyquist bin: keep the real, symmetric part only
            *c *= (2.0 * PI * 0.5 * shift).cos();
        } else {
            *c *= Complex64::from_polar(1.0, -2.0 * PI * k * shift);
        }
    }
    ifft_to_real(spec)
}

/// Continuous Fourier transform of a sampled function at frequency `k`
/// (cycles per unit of `x`), `Σ f(x_j) e^{-i2πk x_j} · dx`.
pub fn sampled_transform(samples: &[f64], first_x: f64, dx: f64, k: f64) -> Complex64 {
    let step = Complex64::from_polar(1.0, -2.0 * PI * k * dx);
    let mut phase = Complex64::from_polar(1.0, -2.0 * PI * k * first_x);
    let mut acc = Complex64::new(0.0, 0.0);
    for &v in samples {
        acc += phase * v;
        phase *= step;
    }
    acc * dx
}

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}
