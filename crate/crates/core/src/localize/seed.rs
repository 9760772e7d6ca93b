use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lsf::ResponseLsf;
use crate::noise::NoiseParams;
use crate::spectral;

/// Deconvolved spectrum `f[k] ≈ Σ_l A_l e^{-i2πkξ_l}` of a region, with
/// positions relative to its first sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerSpectrum {
    pub n_fft: usize,
    /// Signed frequency of each bin (cycles per pixel).
    pub freqs: Vec<f64>,
    pub spectrum: Vec<Complex64>,
    /// Final filter `MTF²/(MTF² + 1/SNR)` per bin.
    pub filter: Vec<f64>,
    pub noise_power: f64,
}

/// Iterative Wiener deconvolution of a background-subtracted region.
///
/// The noise power per bin is `n_⊥·n_∥·σ_b² + F²·N`. The first pass takes
/// its SNR from the raw spectrum; later passes from the previous estimate.
pub fn wiener_deconvolve(
    values: &[f64],
    lsf: &ResponseLsf,
    noise: &NoiseParams,
    n_perp: usize,
    iters: usize,
) -> Result<WienerSpectrum> {
    if values.is_empty() {
        return Err(invalid("empty region"));
    }
    let n = values.len();
    let n_fft = spectral::next_pow2((2 * n).max(128));
    let mut padded = vec![0.0; n_fft];
    padded[..n].copy_from_slice(values);
    let data = spectral::fft_real(&padded);
    let freqs: Vec<f64> = (0..n_fft).map(|q| spectral::bin_frequency(q, n_fft)).collect();
    let otf: Vec<Complex64> = freqs.iter().map(|&k| lsf.otf(k)).collect();
    let photons: f64 = values.iter().sum::<f64>().max(0.0);
    let f2 = noise.excess_factor().powi(2);
    let sigma2 = n_perp as f64 * n as f64 * noise.sigma_b * noise.sigma_b + f2 * photons;

    let apply = |snr_source: &[f64], out: &mut Vec<Complex64>, filter: &mut Vec<f64>| {
        for q in 0..n_fft {
            let mtf2 = otf[q].norm_sqr();
            let inv_snr = if sigma2 == 0.0 {
                0.0
            } else if snr_source[q] > 0.0 {
                sigma2 / snr_source[q]
            } else {
                f64::INFINITY
            };
            let denom = mtf2 + inv_snr;
            if mtf2 == 0.0 || !denom.is_finite() || denom == 0.0 {
                out[q] = Complex64::new(0.0, 0.0);
                filter[q] = 0.0;
            } else {
                out[q] = data[q] * otf[q].conj() / denom;
                filter[q] = mtf2 / denom;
            }
        }
    };

    let mut spectrum = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut filter = vec![0.0; n_fft];
    let raw: Vec<f64> = data.iter().map(|c| c.norm_sqr()).collect();
    apply(&raw, &mut spectrum, &mut filter);
    for _ in 1..iters.max(1) {
        let power: Vec<f64> = spectrum.iter().map(|c| c.norm_sqr()).collect();
        apply(&power, &mut spectrum, &mut filter);
    }
    Ok(WienerSpectrum {
        n_fft,
        freqs,
        spectrum,
        filter,
        noise_power: sigma2,
    })
}

/// Frequency band usable for subspace estimation: `min(limit, k_c)` with
/// `k_c` the highest frequency where the response transmits more than
/// `1e-3` of its zero-frequency value.
pub fn usable_band(lsf: &ResponseLsf, limit: f64) -> f64 {
    let zero = lsf.otf(0.0).norm();
    let dk = 1e-3;
    let mut k = 0.0;
    let mut last = 0.0;
    while k <= limit {
        if lsf.otf(k).norm() > 1e-3 * zero {
            last = k;
        }
        k += dk;
    }
    last.min(limit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MusicResult {
    /// Position estimates relative to the first sample, ascending.
    pub positions: Vec<f64>,
    pub grid: Vec<f64>,
    pub pseudospectrum: Vec<f64>,
    /// The `m` largest peaks were not all distinct and the strongest was
    /// split.
    pub split: bool,
}

fn max_resolvable(k: usize) -> usize {
    let mut m = 0;
    while 2 * (m + 1) + 2 <= k && 2 * (k - (2 * (m + 1) + 2) + 1) >= m + 1 {
        m += 1;
    }
    m
}

/// MUSIC position estimates from a deconvolved spectrum.
///
/// Uses the `k` bins with `|k| ≤ band` as one uniformly spaced sequence,
/// forms a forward-backward averaged covariance of order `max(2m + 2, k/3)`
/// and returns the `m` largest pseudospectrum peaks on `[0, roi_len)`.
pub fn music_estimate(spec: &WienerSpectrum, band: f64, m: usize, roi_len: usize) -> Result<MusicResult> {
    if m == 0 {
        return Err(invalid("atom count must be at least one"));
    }
    let n_fft = spec.n_fft;
    let qmax = (band * n_fft as f64).floor() as i64;
    let seq: Vec<Complex64> = (-qmax..=qmax)
        .map(|q| spec.spectrum[q.rem_euclid(n_fft as i64) as usize])
        .collect();
    let k = seq.len();
    let max = max_resolvable(k);
    if m > max {
        return Err(Error::TooManyEmitters {
            requested: m,
            max,
            samples: k,
        });
    }
    let order = (2 * m + 2).max(k / 3);
    let snapshots = k - order + 1;
    let mut r = DMatrix::<Complex64>::zeros(order, order);
    for t in 0..snapshots {
        let x = &seq[t..t + order];
        for i in 0..order {
            for j in 0..order {
                r[(i, j)] += x[i] * x[j].conj();
            }
        }
    }
    let rb = DMatrix::from_fn(order, order, |i, j| r[(order - 1 - i, order - 1 - j)].conj());
    let r = (&r + rb) * Complex64::new(0.5 / snapshots as f64, 0.0);
    let eig = SymmetricEigen::new(r);
    let mut idx: Vec<usize> = (0..order).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let noise: Vec<usize> = idx[..order - m].to_vec();

    let dk = 1.0 / n_fft as f64;
    let step = 0.05;
    let n_grid = ((roi_len as f64 - 1.0) / step).ceil() as usize + 1;
    let grid: Vec<f64> = (0..n_grid).map(|i| i as f64 * step).collect();
    let pseudo: Vec<f64> = grid
        .iter()
        .map(|&xi| {
            let a: Vec<Complex64> = (0..order)
                .map(|j| Complex64::from_polar(1.0, -2.0 * PI * dk * xi * j as f64))
                .collect();
            let mut proj = 0.0;
            for &c in &noise {
                let v = eig.eigenvectors.column(c);
                let mut s = Complex64::new(0.0, 0.0);
                for j in 0..order {
                    s += v[j].conj() * a[j];
                }
                proj += s.norm_sqr();
            }
            1.0 / proj.max(1e-300)
        })
        .collect();

    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 0..n_grid {
        let left = if i > 0 { pseudo[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < n_grid { pseudo[i + 1] } else { f64::NEG_INFINITY };
        if pseudo[i] > left && pseudo[i] >= right {
            let mut x = grid[i];
            if i > 0 && i + 1 < n_grid {
                let (a, b, c) = (pseudo[i - 1].ln(), pseudo[i].ln(), pseudo[i + 1].ln());
                let den = a - 2.0 * b + c;
                if den < 0.0 {
                    x += 0.5 * step * (a - c) / den;
                }
            }
            peaks.push((x, pseudo[i]));
        }
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(m);
    let mut split = false;
    if peaks.len() < m {
        // spread the missing seeds one pixel apart around the strongest peak
        split = true;
        let (x, v, count) = if peaks.is_empty() {
            (0.5 * (roi_len as f64 - 1.0), 1.0, m)
        } else {
            let (x, v) = peaks.remove(0);
            (x, v, m - peaks.len())
        };
        for c in 0..count {
            let off = c as f64 - 0.5 * (count as f64 - 1.0);
            peaks.push(((x + off).clamp(0.0, roi_len as f64 - 1.0), v));
        }
    }
    let mut positions: Vec<f64> = peaks.into_iter().map(|p| p.0).collect();
    positions.sort_by(f64::total_cmp);
    Ok(MusicResult {
        positions,
        grid,
        pseudospectrum: pseudo,
        split,
    })
}
