//! Emitter localization along the lattice axis: segmentation into regions
//! of interest, atom counting from integrated photoelectrons, spectral
//! seeding (Wiener deconvolution followed by MUSIC), noise-weighted
//! least squares, and discrete refinement onto lattice sites.

mod counting;
mod fit;
mod lattice;
mod pipeline;
mod segment;
mod seed;

use serde::{Deserialize, Serialize};

pub use counting::{count_atoms, fit_photon_histogram, AcceptanceRegion, CountResult, PhotonHistogramModel};
pub use fit::{nlls_fit, AmplitudeBounds, FitInput};
pub use lattice::{calibrate_lattice, lattice_refine, lattice_refine_shared, LatticeCalibration, RefineOptions};
pub use pipeline::{analyze_profile, baseline_corrected, fit_region, AnalyzeOptions, Calibration, FrameResult, RoiResult};
pub use segment::{segment_rois, SegmentOptions, Segmentation};
pub use seed::{music_estimate, usable_band, wiener_deconvolve, MusicResult, WienerSpectrum};

/// A region of interest on a background-subtracted profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    /// Local index range on the parent profile.
    pub range: std::ops::Range<usize>,
    /// Pixel coordinate of the first sample.
    pub start_px: usize,
    pub integrated_e: f64,
    pub atom_count: usize,
    pub count_confidence: f64,
    pub accepted: bool,
}

impl Roi {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn contains_px(&self, x: f64) -> bool {
        x >= self.start_px as f64 - 0.5 && x < (self.start_px + self.len()) as f64 - 0.5
    }
}

/// Result of a continuous or discrete fit of one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomEstimate {
    /// Positions in pixels, ascending.
    pub xi: Vec<f64>,
    /// Lattice sites (empty for a continuous fit).
    pub p: Vec<i64>,
    /// Amplitudes in photoelectrons.
    pub amplitudes: Vec<f64>,
    pub chi2: f64,
    pub dof: usize,
    /// Upper-tail χ² probability of `chi2` at `dof`.
    pub p_value: f64,
    /// `chi2 + Σ ln σ²`, the negative log-likelihood up to a constant.
    pub nll: f64,
    pub accepted: bool,
    pub delta_l: Option<f64>,
    pub converged: bool,
    /// Indices of amplitudes pinned at a bound.
    pub pinned: Vec<usize>,
    /// Seeds were not strictly increasing, or fitted positions changed
    /// order.
    pub order_violation: bool,
}

impl AtomEstimate {
    pub fn reduced_chi2(&self) -> f64 {
        if self.dof == 0 {
            f64::NAN
        } else {
            self.chi2 / self.dof as f64
        }
    }

    pub fn m(&self) -> usize {
        self.xi.len()
    }

    /// Nearest-neighbour distances in lattice sites, from `p` when present,
    /// otherwise rounded from `xi`.
    pub fn site_distances(&self, a_px: f64) -> Vec<i64> {
        if !self.p.is_empty() {
            self.p.windows(2).map(|w| w[1] - w[0]).collect()
        } else {
            self.xi.windows(2).map(|w| ((w[1] - w[0]) / a_px).round() as i64).collect()
        }
    }
}

/// Localization precision of a single emitter:
/// `√((κ·rms² + Δp²/12)/N + 4√π·rms³·σ_b²·n_⊥/(Δp·N²))` with `κ = 2` for
/// EM-amplified detection. Lengths in any consistent unit.
pub fn precision_bound(rms_psf: f64, delta_p: f64, n: f64, sigma_b: f64, n_perp: usize, emccd: bool) -> f64 {
    let kappa = if emccd { 2.0 } else { 1.0 };
    let shot = (kappa * rms_psf * rms_psf + delta_p * delta_p / 12.0) / n;
    let background = if sigma_b == 0.0 {
        0.0
    } else {
        4.0 * std::f64::consts::PI.sqrt() * rms_psf.powi(3) * sigma_b * sigma_b * n_perp as f64 / (delta_p * n * n)
    };
    (shot + background).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_at_reference_values() {
        let dx = precision_bound(1.5, 0.29, 1300.0, 0.6, 40, true);
        assert!((dx * 1e3 - 64.6).abs() < 1.0, "{}", dx * 1e3);
    }

    #[test]
    fn bound_limits() {
        let dx = precision_bound(1.5, 1e-12, 1000.0, 0.0, 40, true);
        assert!((dx - 2f64.sqrt() * 1.5 / 1000f64.sqrt()).abs() < 1e-12);
        assert!(precision_bound(1.5, 0.29, 1e12, 0.6, 40, true) < 1e-5);
    }
}
