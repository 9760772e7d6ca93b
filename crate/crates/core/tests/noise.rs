use latloc::imaging::{simulate_exposure, AtomConfig, FrameSpec, Optics};
use latloc::lsf::ResponseLsf;
use latloc::noise::*;
use latloc::rng;
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

#[test]
fn reference_curve_value() {
    let mut p = NoiseParams::default();
    p.sigma_b = 0.6;
    p.c1 = std::f64::consts::SQRT_2;
    p.c2 = 0.0;
    assert!((sigma_model(1300.0, &p) - 51.0).abs() < 0.01);
}

#[test]
fn nominal_gain_exceeds_a_thousand() {
    let g = 1.015f64.powi(536);
    assert!((g - 2.9e3).abs() < 0.05e3, "{g}");
}

#[test]
fn excess_factor_doubles_shot_variance() {
    let on = NoiseParams::from_channels(1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, true);
    let off = NoiseParams::from_channels(1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, false);
    assert!((total_variance(500.0, &on) / total_variance(500.0, &off) - 2.0).abs() < 1e-12);
}

#[test]
fn all_channels_zero_give_zero_variance() {
    let p = NoiseParams::from_channels(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, false);
    assert_eq!(total_variance(0.0, &p), 0.0);
}

#[test]
fn pure_read_out_noise_fit() {
    let mut r = rng::seeded(8);
    let normal = Normal::new(0.0, 0.4).unwrap();
    let samples: Vec<f64> = (0..200_000).map(|_| normal.sample(&mut r)).collect();
    let rms = latloc::stats::rms(&samples);
    let fit = fit_background_histogram(&samples, 1000.0).unwrap();
    let rate_se = fit.report.uncertainties[0];
    assert!(fit.spurious_rate < 3.0 * rate_se, "rate {} ± {rate_se}", fit.spurious_rate);
    assert!((fit.sigma_ro / 1000.0 / rms - 1.0).abs() < 0.03, "{} vs {rms}", fit.sigma_ro / 1000.0);
}

#[test]
fn background_fit_needs_enough_samples() {
    assert!(fit_background_histogram(&[0.0; 10], 1000.0).is_err());
}

#[test]
fn identical_frames_have_zero_rms() {
    let frame: Vec<f64> = (0..30).map(|i| i as f64).collect();
    let curve = estimate_snr_curve(&[vec![frame.clone(); 5]], 0.0, 2.0).unwrap();
    assert!(curve.bins.iter().all(|b| b.rms == 0.0));
    assert!(curve.bins.windows(2).all(|w| w[0].signal < w[1].signal));
}

fn simulated_curve() -> (SnrCurve, NoiseParams) {
    let noise = NoiseParams::default();
    let optics = Optics::default();
    let frame = FrameSpec {
        n_cols: 64,
        n_rows: 2,
        transverse_rms_px: 0.0,
        ..FrameSpec::default()
    };
    let lsf = ResponseLsf::gaussian(6.0, 8, 40.0, optics.delta_s_um).unwrap();
    let atoms = AtomConfig::new(vec![31.5], vec![20_000.0]).unwrap();
    let stack: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let mut r = rng::frame_rng(77, i);
            simulate_exposure(&atoms, &lsf, &noise, &optics, &frame, &mut r)
                .unwrap()
                .counts()
                .to_vec()
        })
        .collect();
    let curve = estimate_snr_curve(&[stack], noise.background_mean(), 100.0).unwrap();
    (curve, noise)
}

#[test]
fn snr_curve_follows_noise_law() {
    let (curve, noise) = simulated_curve();
    assert!(curve.bins.len() >= 5);
    for b in &curve.bins {
        let expected = sigma_model(b.signal, &noise);
        assert!(
            (b.rms - expected).abs() <= 2.0 * b.stderr,
            "signal {:.1}: rms {:.3} vs {:.3} ± {:.3}",
            b.signal,
            b.rms,
            expected,
            b.stderr
        );
    }
}

#[test]
fn no_quadratic_noise_component() {
    // weighted fit of rms² = a + b S + c S²; c must vanish within its error
    let (curve, _) = simulated_curve();
    let rows: Vec<([f64; 3], f64, f64)> = curve
        .bins
        .iter()
        .map(|b| {
            let s = b.signal;
            let var_se = 2.0 * b.rms * b.stderr;
            ([1.0, s, s * s], b.rms * b.rms, 1.0 / var_se.max(1e-12).powi(2))
        })
        .collect();
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for (x, y, w) in &rows {
        let xv = nalgebra::Vector3::from_column_slice(x);
        ata += *w * xv * xv.transpose();
        atb += *w * *y * xv;
    }
    let cov = ata.try_inverse().unwrap();
    let coef = cov * atb;
    let c_se = cov[(2, 2)].sqrt();
    assert!(coef[2].abs() < 3.0 * c_se, "quadratic {:.3e} ± {:.3e}", coef[2], c_se);
    assert!((coef[1] - 2.0).abs() < 5.0 * cov[(1, 1)].sqrt(), "linear {}", coef[1]);
}

proptest! {
    #[test]
    fn sigma_model_is_monotone(
        sb in 0.0f64..3.0, c1 in 0.0f64..3.0, c2 in 0.0f64..0.2,
        s1 in -10.0f64..1e5, ds in 0.0f64..1e4,
    ) {
        let mut p = NoiseParams::default();
        p.sigma_b = sb;
        p.c1 = c1;
        p.c2 = c2;
        prop_assert!(sigma_model(s1 + ds, &p) >= sigma_model(s1, &p));
        prop_assert_eq!(sigma_model(0.0, &p), sb);
    }

    #[test]
    fn compact_law_matches_channels(
        g in 1.0f64..5000.0, ro in 0.0f64..100.0, cic in 0.0f64..0.1,
        dark in 0.0f64..0.1, stray in 0.0f64..1.0, em: bool, s in 0.0f64..1e4,
    ) {
        let p = NoiseParams::from_channels(g, ro, cic, dark, stray, 0.0, 0.0, em);
        let lhs = total_variance(s, &p);
        let rhs = sigma_model(s, &p).powi(2);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1.0));
    }
}
