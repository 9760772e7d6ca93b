use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::Roi;
use crate::imaging::{Optics, Profile1D};
use crate::noise::NoiseParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentOptions {
    /// Threshold in units of the per-pixel background rms `σ_b √n_⊥`.
    pub threshold_sigma: f64,
    /// Margin added on each side of an above-threshold run (pixels).
    pub dilation_px: f64,
    /// Pixels next to a region that are left out of the signal-free set,
    /// keeping response tails out of the background estimate.
    pub guard_px: f64,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            threshold_sigma: 3.0,
            dilation_px: Optics::default().abbe_radius_px(),
            guard_px: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub rois: Vec<Roi>,
    /// Local index ranges outside every region.
    pub signal_free: Vec<Range<usize>>,
}

impl Segmentation {
    pub fn roi_ranges(&self) -> Vec<Range<usize>> {
        self.rois.iter().map(|r| r.range.clone()).collect()
    }
}

/// Thresholds a background-subtracted profile, dilates each run by the
/// margin and merges overlapping runs. Counting fields of the returned
/// regions are unset.
pub fn segment_rois(profile: &Profile1D, noise: &NoiseParams, opts: &SegmentOptions) -> Segmentation {
    let n = profile.len();
    let threshold = opts.threshold_sigma * noise.sigma_b * (profile.n_perp as f64).sqrt();
    let margin = opts.dilation_px.ceil().max(0.0) as usize;
    let mut runs: Vec<Range<usize>> = Vec::new();
    let mut i = 0;
    while i < n {
        if profile.values[i] > threshold {
            let start = i;
            while i < n && profile.values[i] > threshold {
                i += 1;
            }
            let lo = start.saturating_sub(margin);
            let hi = (i + margin).min(n);
            match runs.last_mut() {
                Some(last) if lo <= last.end => last.end = last.end.max(hi),
                _ => runs.push(lo..hi),
            }
        } else {
            i += 1;
        }
    }
    let guard = opts.guard_px.ceil().max(0.0) as usize;
    let mut signal_free = complement(&runs, n, guard);
    if guard > 0 && signal_free.is_empty() {
        signal_free = complement(&runs, n, 0);
    }
    let rois = runs
        .into_iter()
        .map(|range| Roi {
            start_px: profile.origin_px + range.start,
            integrated_e: profile.values[range.clone()].iter().sum(),
            range,
            atom_count: 0,
            count_confidence: 0.0,
            accepted: false,
        })
        .collect();
    Segmentation { rois, signal_free }
}

fn complement(runs: &[Range<usize>], n: usize, guard: usize) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut cursor = 0;
    for r in runs {
        let lo = r.start.saturating_sub(guard);
        if lo > cursor {
            out.push(cursor..lo);
        }
        cursor = cursor.max((r.end + guard).min(n));
    }
    if cursor < n {
        out.push(cursor..n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_profile_has_no_rois() {
        let p = Profile1D::new(vec![0.0; 100], 0, 40).unwrap();
        let s = segment_rois(&p, &NoiseParams::default(), &SegmentOptions::default());
        assert!(s.rois.is_empty());
        assert_eq!(s.signal_free, vec![0..100]);
    }

    #[test]
    fn nearby_runs_merge() {
        let mut v = vec![0.0; 100];
        v[40] = 100.0;
        v[45] = 100.0;
        v[90] = 100.0;
        let p = Profile1D::new(v, 10, 40).unwrap();
        let opts = SegmentOptions {
            threshold_sigma: 3.0,
            dilation_px: 3.0,
            guard_px: 0.0,
        };
        let s = segment_rois(&p, &NoiseParams::default(), &opts);
        assert_eq!(s.roi_ranges(), vec![37..49, 87..94]);
        assert_eq!(s.signal_free, vec![0..37, 49..87, 94..100]);
        assert_eq!(s.rois[0].start_px, 47);
        assert_eq!(s.rois[0].integrated_e, 200.0);

        let guarded = segment_rois(&p, &NoiseParams::default(), &SegmentOptions { guard_px: 5.0, ..opts });
        assert_eq!(guarded.roi_ranges(), s.roi_ranges());
        assert_eq!(guarded.signal_free, vec![0..32, 54..82, 99..100]);
    }
}
