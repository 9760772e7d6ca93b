//! Run configuration shared by the command-line tool: every physical
//! default is baked in and any field can be overridden from a JSON or TOML
//! document. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::imaging::{FrameSpec, LatticeModel, Optics};
use crate::io::FrameFormat;
use crate::localize::AnalyzeOptions;
use crate::lsf::ReconstructOptions;
use crate::noise::NoiseParams;
use crate::wavefront::{WavefrontFitOptions, ZernikeWavefront};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Simulate,
    ReconstructLsf,
    FitWavefront,
    Analyze,
    CalibrateLattice,
    BenchFig7,
    BenchPrecision,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Simulate => "simulate",
            Scenario::ReconstructLsf => "reconstruct-lsf",
            Scenario::FitWavefront => "fit-wavefront",
            Scenario::Analyze => "analyze",
            Scenario::CalibrateLattice => "calibrate-lattice",
            Scenario::BenchFig7 => "bench-fig7",
            Scenario::BenchPrecision => "bench-precision",
        }
    }

    pub fn default_frames(&self) -> usize {
        match self {
            Scenario::Simulate | Scenario::Analyze => 1,
            Scenario::ReconstructLsf => 200,
            Scenario::FitWavefront => 0,
            Scenario::CalibrateLattice => 500,
            Scenario::BenchFig7 | Scenario::BenchPrecision => 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    /// Occupied lattice sites, relative to the site nearest the frame
    /// centre.
    pub sites: Vec<i64>,
    pub amplitude: f64,
    pub format: FrameFormat,
    /// Draw the lattice offset uniformly per frame instead of using
    /// `lattice.delta_l`.
    pub random_offset: bool,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            sites: vec![-6, -2, 0, 3, 9],
            amplitude: 1300.0,
            format: FrameFormat::Binary,
            random_offset: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub amplitude: f64,
    pub atoms: usize,
    pub spacings: Vec<i64>,
    pub photon_counts: Vec<f64>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        let b = BenchConfig::default();
        BenchSettings {
            amplitude: b.amplitude,
            atoms: b.atoms,
            spacings: b.spacings,
            photon_counts: b.photon_counts,
        }
    }
}

/// Files read by the analysis commands; when absent the inputs are
/// simulated from the configured defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    /// Frame sidecar files.
    pub frames: Vec<PathBuf>,
    /// Response metadata file.
    pub lsf: Option<PathBuf>,
    /// Photon-histogram model (JSON).
    pub histogram: Option<PathBuf>,
    /// One distance in pixels per line.
    pub distances: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
    pub frames: Option<usize>,
    pub out: Option<PathBuf>,
    pub calibration_id: String,
    pub optics: Optics,
    /// Recompute `sigma_b`, `c1`, `c2` from the channel parameters.
    pub noise_from_channels: bool,
    pub noise: NoiseParams,
    pub lattice: LatticeModel,
    pub frame: FrameSpec,
    pub wavefront: ZernikeWavefront,
    pub wavefront_fit: WavefrontFitOptions,
    pub reconstruct: ReconstructOptions,
    pub analysis: AnalyzeOptions,
    pub simulate: SimulateSettings,
    pub bench: BenchSettings,
    pub inputs: Inputs,
}

impl Default for RunConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        RunConfig {
            scenario: None,
            seed: None,
            frames: None,
            out: None,
            calibration_id: "default".into(),
            optics: b.optics,
            noise_from_channels: true,
            noise: b.noise,
            lattice: b.lattice,
            frame: b.frame,
            wavefront: b.wavefront,
            wavefront_fit: WavefrontFitOptions::default(),
            reconstruct: ReconstructOptions::default(),
            analysis: b.analysis,
            simulate: SimulateSettings::default(),
            bench: BenchSettings::default(),
            inputs: Inputs::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document, or TOML when the extension is `.toml`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        Self::from_str(&text, toml)
    }

    pub fn from_str(text: &str, toml: bool) -> Result<Self> {
        let mut cfg: RunConfig = if toml {
            ::toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.apply_defaults();
        Ok(cfg)
    }

    /// Brings derived fields in line with the overridden ones.
    pub fn apply_defaults(&mut self) {
        if self.noise_from_channels {
            self.noise.sync_compact();
        }
    }

    pub fn frames_for(&self, scenario: Scenario) -> usize {
        self.frames.unwrap_or_else(|| scenario.default_frames())
    }

    /// Whether `scenario` draws random numbers with this configuration.
    pub fn is_stochastic(&self, scenario: Scenario) -> bool {
        match scenario {
            Scenario::Simulate | Scenario::BenchFig7 | Scenario::BenchPrecision => true,
            Scenario::ReconstructLsf | Scenario::Analyze => self.inputs.frames.is_empty(),
            Scenario::CalibrateLattice => self.inputs.distances.is_none(),
            Scenario::FitWavefront => false,
        }
    }

    /// Checks the configuration against the command about to run.
    pub fn validate_for(&self, scenario: Scenario) -> Result<()> {
        if let Some(s) = self.scenario {
            if s != scenario {
                return Err(Error::Config(format!(
                    "configuration is for `{}` but `{}` was requested",
                    s.name(),
                    scenario.name()
                )));
            }
        }
        if self.is_stochastic(scenario) && self.seed.is_none() {
            return Err(Error::Config(format!("`{}` needs a seed", scenario.name())));
        }
        if self.frames == Some(0) {
            return Err(Error::Config("frame count must be positive".into()));
        }
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optics.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn bench_config(&self, scenario: Scenario) -> BenchConfig {
        BenchConfig {
            optics: self.optics.clone(),
            noise: self.noise.clone(),
            lattice: self.lattice,
            frame: self.frame.clone(),
            wavefront: self.wavefront.clone(),
            analysis: self.analysis.clone(),
            amplitude: self.bench.amplitude,
            atoms: self.bench.atoms,
            spacings: self.bench.spacings.clone(),
            frames: self.frames_for(scenario),
            photon_counts: self.bench.photon_counts.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_str(r#"{"seed": 1, "sed": 2}"#, false).is_err());
        assert!(RunConfig::from_str(r#"{"noise": {"gain": 10}}"#, false).is_err());
        assert!(RunConfig::from_str("seed = 3\n[noise]\ng = 500.0\n", true).is_ok());
    }

    #[test]
    fn channel_overrides_update_compact_coefficients() {
        let cfg = RunConfig::from_str(r#"{"noise": {"stray_rate": 0.5}}"#, false).unwrap();
        let mut expected = NoiseParams::default();
        expected.stray_rate = 0.5;
        expected.sync_compact();
        assert_eq!(cfg.noise.sigma_b, expected.sigma_b);
    }

    #[test]
    fn stochastic_runs_need_a_seed() {
        let cfg = RunConfig::default();
        assert!(cfg.validate_for(Scenario::Simulate).is_err());
        assert!(cfg.validate_for(Scenario::FitWavefront).is_ok());
        let seeded = RunConfig { seed: Some(4), ..RunConfig::default() };
        assert!(seeded.validate_for(Scenario::BenchFig7).is_ok());
    }
}
