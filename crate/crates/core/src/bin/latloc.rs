use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use latloc::bench::{run_benchmark_fig7, run_precision_sweep, Fig7Report, Method, PrecisionReport, Responses};
use latloc::config::{RunConfig, Scenario};
use latloc::imaging::{integrate_transverse, simulate_exposure, AtomConfig, LatticeModel, PixelImage, Profile1D};
use latloc::io::{emit_reports, read_column, read_frame, read_lsf, write_frame, write_lsf, RunMetadata};
use latloc::localize::{
    analyze_profile, baseline_corrected, calibrate_lattice, Calibration, FrameResult, PhotonHistogramModel,
};
use latloc::lsf::{reconstruct_lsf, LsfAtlas, ResponseLsf};
use latloc::wavefront::{fit_wavefront, response_from_wavefront, strehl_and_rms, LsfGrid, WavefrontFit};
use latloc::{rng, Error};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;
const EXIT_ACCEPTANCE: u8 = 4;

#[derive(Parser)]
#[command(name = "latloc", version, about = "Simulate and analyze lattice fluorescence images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate EMCCD frames of emitters on the lattice.
    Simulate(Common),
    /// Reconstruct the response from single-emitter profiles.
    ReconstructLsf(Common),
    /// Fit Zernike coefficients and NA to a measured response.
    FitWavefront(Common),
    /// Locate emitters and lattice sites in frames.
    Analyze(Common),
    /// Estimate the lattice constant from emitter distances.
    CalibrateLattice(Common),
    /// Success rates for four-atom chains at spacings of 1 to 9 sites.
    BenchFig7(Common),
    /// Single-emitter localization error against the analytic bound.
    BenchPrecision(Common),
}

#[derive(Args)]
struct Common {
    /// JSON or TOML configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frames: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with a failure code when the benchmark misses its targets.
    #[arg(long)]
    check: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            Error::CalibrationMissing(_) => EXIT_CALIBRATION,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (scenario, common) = match &cli.command {
        Command::Simulate(c) => (Scenario::Simulate, c),
        Command::ReconstructLsf(c) => (Scenario::ReconstructLsf, c),
        Command::FitWavefront(c) => (Scenario::FitWavefront, c),
        Command::Analyze(c) => (Scenario::Analyze, c),
        Command::CalibrateLattice(c) => (Scenario::CalibrateLattice, c),
        Command::BenchFig7(c) => (Scenario::BenchFig7, c),
        Command::BenchPrecision(c) => (Scenario::BenchPrecision, c),
    };
    match run(scenario, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("latloc {}: {}", scenario.name(), f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(scenario: Scenario, common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.frames.is_some() {
        cfg.frames = common.frames;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    cfg.validate_for(scenario)?;
    Ok(cfg)
}

fn run(scenario: Scenario, common: &Common) -> Outcome {
    let cfg = load_config(scenario, common)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(scenario.name()));
    let mut meta = RunMetadata::new(scenario.name(), cfg.seed, &cfg, &cfg.noise)?;
    match scenario {
        Scenario::Simulate => simulate(&cfg, &out, &mut meta),
        Scenario::ReconstructLsf => reconstruct(&cfg, &out, &mut meta),
        Scenario::FitWavefront => wavefront(&cfg, &out, &mut meta),
        Scenario::Analyze => analyze(&cfg, &out, &mut meta),
        Scenario::CalibrateLattice => lattice(&cfg, &out, &mut meta),
        Scenario::BenchFig7 => fig7(&cfg, &out, &mut meta, common.check),
        Scenario::BenchPrecision => precision(&cfg, &out, &mut meta, common.check),
    }
}

fn json<T: Serialize>(value: &T) -> std::result::Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn seed_of(cfg: &RunConfig) -> u64 {
    cfg.seed.expect("validated: stochastic runs carry a seed")
}

/// Configured emitters placed around the frame centre, with a lattice
/// offset drawn per frame when requested.
fn simulated_frame(cfg: &RunConfig, resp: &Responses, index: usize) -> latloc::Result<(PixelImage, AtomConfig)> {
    let mut r = rng::frame_rng(seed_of(cfg), index as u64);
    let a = cfg.lattice.a_px;
    let delta = if cfg.simulate.random_offset {
        rng::uniform(&mut r, 0.0, a)
    } else {
        cfg.lattice.delta_l
    };
    let lattice = LatticeModel::new(a, delta, cfg.lattice.a_nm)?;
    let centre = lattice.nearest_site(0.5 * (cfg.frame.n_cols as f64 - 1.0));
    let sites: Vec<i64> = cfg.simulate.sites.iter().map(|s| centre + s).collect();
    let atoms = AtomConfig::on_lattice(&sites, cfg.simulate.amplitude, &lattice)?;
    let img = simulate_exposure(&atoms, &resp.optical, &cfg.noise, &cfg.optics, &cfg.frame, &mut r)?;
    Ok((img, atoms))
}

fn simulate(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata) -> Outcome {
    let resp = Responses::from_wavefront(&cfg.wavefront, &cfg.optics)?;
    let frames = cfg.frames_for(Scenario::Simulate);
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let sims: Vec<(PixelImage, AtomConfig)> = (0..frames)
        .into_par_iter()
        .map(|i| simulated_frame(cfg, &resp, i))
        .collect::<latloc::Result<_>>()?;
    let mut truth = String::from("frame,position_px,amplitude\n");
    for (i, (img, atoms)) in sims.iter().enumerate() {
        let path = out.join(format!("frame_{i:05}.{}", cfg.simulate.format.extension()));
        write_frame(img, &path, cfg.simulate.format, &cfg.noise, cfg.seed)?;
        for (x, a) in atoms.positions.iter().zip(&atoms.amplitudes) {
            truth.push_str(&format!("{i},{x},{a}\n"));
        }
    }
    emit_reports(out, "simulate", &[("truth.csv".into(), truth)], meta)?;
    println!("wrote {frames} frames to {}", out.display());
    Ok(())
}

fn load_profiles(cfg: &RunConfig) -> latloc::Result<Vec<Profile1D>> {
    cfg.inputs
        .frames
        .iter()
        .map(|p| {
            let (img, _) = read_frame(p)?;
            integrate_transverse(&img, 0..img.rows())
        })
        .collect()
}

fn reconstruct(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata) -> Outcome {
    let profiles = if cfg.inputs.frames.is_empty() {
        let resp = Responses::from_wavefront(&cfg.wavefront, &cfg.optics)?;
        let n = cfg.frames_for(Scenario::ReconstructLsf);
        let centre = 0.5 * (cfg.frame.n_cols as f64 - 1.0);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::frame_rng(seed_of(cfg), i as u64);
                let x = centre + rng::uniform(&mut r, -0.5 * cfg.lattice.a_px, 0.5 * cfg.lattice.a_px);
                let atoms = AtomConfig::new(vec![x], vec![cfg.simulate.amplitude])?;
                let img = simulate_exposure(&atoms, &resp.optical, &cfg.noise, &cfg.optics, &cfg.frame, &mut r)?;
                integrate_transverse(&img, 0..img.rows())
            })
            .collect::<latloc::Result<Vec<_>>>()?
    } else {
        load_profiles(cfg)?
    };
    let corrected: Vec<Profile1D> = profiles
        .iter()
        .map(|p| baseline_corrected(p, &cfg.noise, &cfg.analysis.segment).map(|c| c.0))
        .collect::<latloc::Result<_>>()?;
    let rec = reconstruct_lsf(&corrected, None, &cfg.reconstruct)?;
    if !rec.converged {
        meta.warnings.push(format!(
            "reconstruction did not converge in {} iterations (last change {:.3e})",
            rec.iterations,
            rec.trace.last().copied().unwrap_or(f64::NAN)
        ));
    }
    std::fs::create_dir_all(out).map_err(Error::from)?;
    write_lsf(&rec.lsf, &out.join("lsf.csv"), Some(rec.iterations))?;
    emit_reports(out, "reconstruct-lsf", &[("reconstruction.json".into(), json(&rec)?)], meta)?;
    println!(
        "reconstructed from {} profiles ({} rejected) in {} iterations, converged: {}",
        rec.used.len(),
        rec.rejected.len(),
        rec.iterations,
        rec.converged
    );
    Ok(())
}

#[derive(Serialize)]
struct WavefrontReport {
    fit: WavefrontFit,
    strehl: f64,
    rms_error_waves: f64,
}

fn wavefront(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata) -> Outcome {
    let measured = match &cfg.inputs.lsf {
        Some(p) => read_lsf(p)?.0,
        None => {
            let grid = LsfGrid::centered(8, 64, cfg.optics.delta_s_um);
            response_from_wavefront(&cfg.wavefront, &grid, cfg.wavefront_fit.aperture_px)?
        }
    };
    let fit = fit_wavefront(&measured, &cfg.wavefront_fit)?;
    let (strehl, rms) = strehl_and_rms(&fit.wavefront)?;
    if !fit.degenerate.is_empty() {
        meta.warnings.push(format!("near-degenerate parameter groups: {:?}", fit.degenerate));
    }
    if !fit.converged {
        meta.warnings.push("wavefront fit did not converge".into());
    }
    for p in &fit.parameters {
        println!("{:<24} {:>10.5} ± {:.5}", p.name, p.value, p.uncertainty);
    }
    println!("strehl {strehl:.4}  rms {rms:.5} waves  residual {:.3e}", fit.residual_rms);
    let report = WavefrontReport {
        fit,
        strehl,
        rms_error_waves: rms,
    };
    emit_reports(out, "fit-wavefront", &[("wavefront.json".into(), json(&report)?)], meta)?;
    Ok(())
}

fn calibration(cfg: &RunConfig) -> latloc::Result<Calibration> {
    let lsf: ResponseLsf = match &cfg.inputs.lsf {
        Some(p) => read_lsf(p)?.0,
        None => Responses::from_wavefront(&cfg.wavefront, &cfg.optics)?.ccd,
    };
    let histogram: Option<PhotonHistogramModel> = match &cfg.inputs.histogram {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            Some(serde_json::from_str(&text)?)
        }
        None => None,
    };
    if histogram.is_none() && cfg.analysis.atoms_per_roi.is_none() {
        return Err(Error::CalibrationMissing(
            "no photon-histogram model (inputs.histogram) and no fixed atoms_per_roi".into(),
        ));
    }
    Ok(Calibration {
        id: cfg.calibration_id.clone(),
        optics: cfg.optics.clone(),
        noise: cfg.noise.clone(),
        atlas: LsfAtlas::uniform(lsf, 0..usize::MAX),
        lattice: cfg.lattice,
        histogram,
    })
}

fn atoms_csv(results: &[FrameResult]) -> String {
    let mut s = String::from("frame,roi,start_px,len,m,confidence,accepted,kind,index,xi_px,site,amplitude,chi2,dof,p_value\n");
    for (f, fr) in results.iter().enumerate() {
        for (k, r) in fr.rois.iter().enumerate() {
            for (kind, est) in [("continuous", &r.continuous), ("discrete", &r.discrete)] {
                let Some(e) = est else { continue };
                for i in 0..e.m() {
                    let site = e.p.get(i).map(|p| p.to_string()).unwrap_or_default();
                    s.push_str(&format!(
                        "{f},{k},{},{},{},{:.6},{},{kind},{i},{:.6},{site},{:.3},{:.6},{},{:.6e}\n",
                        r.roi.start_px,
                        r.roi.len(),
                        r.roi.atom_count,
                        r.roi.count_confidence,
                        e.accepted && r.roi.accepted,
                        e.xi[i],
                        e.amplitudes[i],
                        e.chi2,
                        e.dof,
                        e.p_value
                    ));
                }
            }
        }
    }
    s
}

fn analyze(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata) -> Outcome {
    let cal = calibration(cfg)?;
    let profiles = if cfg.inputs.frames.is_empty() {
        let resp = Responses::from_wavefront(&cfg.wavefront, &cfg.optics)?;
        (0..cfg.frames_for(Scenario::Analyze))
            .into_par_iter()
            .map(|i| {
                let (img, _) = simulated_frame(cfg, &resp, i)?;
                integrate_transverse(&img, 0..img.rows())
            })
            .collect::<latloc::Result<Vec<_>>>()?
    } else {
        load_profiles(cfg)?
    };
    let results: Vec<FrameResult> = profiles
        .par_iter()
        .map(|p| analyze_profile(p, &cal, &cfg.analysis))
        .collect::<latloc::Result<_>>()?;
    let n_atoms: usize = results.iter().map(|r| r.atom_count()).sum();
    let n_errors: usize = results.iter().flat_map(|r| &r.rois).filter(|r| r.error.is_some()).count();
    if n_errors > 0 {
        meta.warnings.push(format!("{n_errors} regions could not be fitted"));
    }
    emit_reports(
        out,
        "analyze",
        &[
            ("results.json".into(), json(&results)?),
            ("atoms.csv".into(), atoms_csv(&results)),
        ],
        meta,
    )?;
    println!("analyzed {} frames, {n_atoms} accepted atoms", results.len());
    Ok(())
}

fn lattice(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata) -> Outcome {
    let distances = match &cfg.inputs.distances {
        Some(p) => read_column(p)?,
        None => {
            let mut r = rng::seeded(seed_of(cfg));
            let normal = rand_distr::Normal::new(0.0, 0.05).expect("positive width");
            (0..cfg.frames_for(Scenario::CalibrateLattice))
                .map(|_| {
                    let k = rand::RngExt::random_range(&mut r, 1..=9) as f64;
                    k * cfg.lattice.a_px + rand_distr::Distribution::sample(&normal, &mut r)
                })
                .collect()
        }
    };
    let cal = calibrate_lattice(&distances, cfg.lattice.a_nm)?;
    println!(
        "a = {:.5} px from {} distances (spread {:.4} px, coherence {:.3})",
        cal.lattice.a_px, cal.n_samples, cal.residual_spread, cal.coherence
    );
    emit_reports(out, "calibrate-lattice", &[("lattice.json".into(), json(&cal)?)], meta)?;
    Ok(())
}

fn fig7(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata, check: bool) -> Outcome {
    let bench = cfg.bench_config(Scenario::BenchFig7);
    let report = run_benchmark_fig7(&bench, seed_of(cfg))?;
    meta.warnings.extend(report.warnings.iter().cloned());
    emit_reports(out, "bench-fig7", &[("fig7.csv".into(), report.to_csv())], meta)?;
    print!("{}", report.to_csv());
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if check {
        let failed = fig7_failures(&report, &bench.spacings);
        if !failed.is_empty() {
            return Err(Failure {
                code: EXIT_ACCEPTANCE,
                message: failed.join("; "),
            });
        }
    }
    Ok(())
}

fn fig7_failures(report: &Fig7Report, spacings: &[i64]) -> Vec<String> {
    let mut out = Vec::new();
    for &s in spacings {
        if let Some(r) = report.rate(s, Method::Discrete) {
            if r.success_rate < 0.88 {
                out.push(format!("discrete success {:.3} < 0.88 at spacing {s}", r.success_rate));
            }
        }
    }
    out
}

fn precision(cfg: &RunConfig, out: &Path, meta: &mut RunMetadata, check: bool) -> Outcome {
    let bench = cfg.bench_config(Scenario::BenchPrecision);
    let report = run_precision_sweep(&bench, seed_of(cfg))?;
    emit_reports(
        out,
        "bench-precision",
        &[
            ("precision.csv".into(), report.to_csv()),
            ("precision.json".into(), json(&report)?),
        ],
        meta,
    )?;
    print!("{}", report.to_csv());
    println!("slope {:.4}", report.slope);
    if check {
        let failed = precision_failures(&report);
        if !failed.is_empty() {
            return Err(Failure {
                code: EXIT_ACCEPTANCE,
                message: failed.join("; "),
            });
        }
    }
    Ok(())
}

fn precision_failures(report: &PrecisionReport) -> Vec<String> {
    let mut out = Vec::new();
    for r in &report.rows {
        if r.rms_error_nm < r.bound_nm - 3.0 * r.stderr_nm {
            out.push(format!("error {:.2} nm below bound {:.2} nm at N = {}", r.rms_error_nm, r.bound_nm, r.n_photons));
        }
        if r.n_photons == 1300.0 && (r.rms_error_nm / r.bound_nm - 1.0).abs() > 0.2 {
            out.push(format!("error {:.2} nm not within 20% of {:.2} nm", r.rms_error_nm, r.bound_nm));
        }
    }
    if report.slope.is_finite() && (report.slope + 0.5).abs() > 0.05 {
        out.push(format!("log-log slope {:.3} outside -0.5 ± 0.05", report.slope));
    }
    out
}
