use std::fs;

use latloc::config::RunConfig;
use latloc::imaging::{simulate_exposure_seeded, AtomConfig, FrameSpec, Optics};
use latloc::io::*;
use latloc::lsf::ResponseLsf;
use latloc::noise::NoiseParams;

fn frame() -> latloc::imaging::PixelImage {
    let o = Optics::default();
    let lsf = ResponseLsf::gaussian(2.0, 8, 20.0, o.delta_s_um).unwrap();
    let atoms = AtomConfig::new(vec![11.3], vec![900.0]).unwrap();
    let spec = FrameSpec {
        n_cols: 24,
        n_rows: 5,
        ..FrameSpec::default()
    };
    simulate_exposure_seeded(&atoms, &lsf, &NoiseParams::default(), &o, &spec, 3).unwrap()
}

#[test]
fn frames_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let img = frame();
    for format in [FrameFormat::Binary, FrameFormat::Csv] {
        let path = dir.path().join(format!("f.{}", format.extension()));
        let sidecar = write_frame(&img, &path, format, &NoiseParams::default(), Some(7)).unwrap();
        let (back, meta) = read_frame(&sidecar).unwrap();
        assert_eq!(back.counts(), img.counts());
        assert_eq!((back.rows(), back.cols()), (5, 24));
        assert_eq!(meta.seed, Some(7));
        assert_eq!(meta.format, format);
        assert_eq!(meta.noise, NoiseParams::default());
    }
}

#[test]
fn truncated_binary_frame_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.bin");
    let sidecar = write_frame(&frame(), &path, FrameFormat::Binary, &NoiseParams::default(), None).unwrap();
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(read_frame(&sidecar).is_err());
    fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
    assert!(read_frame(&sidecar).is_err());
}

#[test]
fn response_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let lsf = ResponseLsf::gaussian(2.3, 8, 15.0, 0.294).unwrap().with_patch_id("left");
    let meta_path = write_lsf(&lsf, &dir.path().join("lsf.csv"), Some(4)).unwrap();
    let (back, meta) = read_lsf(&meta_path).unwrap();
    assert_eq!(back.samples(), lsf.samples());
    assert_eq!((back.s(), back.x0(), back.delta_s_um()), (lsf.s(), lsf.x0(), lsf.delta_s_um()));
    assert_eq!(back.patch_id(), Some("left"));
    assert_eq!(meta.iterations, Some(4));
}

#[test]
fn column_reader_skips_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "distance_px\n1.5\n\n2.94,extra\n").unwrap();
    assert_eq!(read_column(&p).unwrap(), vec![1.5, 2.94]);
    fs::write(&p, "1.5\nx\n").unwrap();
    assert!(read_column(&p).is_err());
}

#[test]
fn reports_list_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let meta = RunMetadata::new("test", Some(1), &RunConfig::default(), &NoiseParams::default()).unwrap();
    let files = vec![("a.csv".to_string(), "x\n1\n".to_string())];
    let written = emit_reports(dir.path(), "test", &files, &meta).unwrap();
    assert_eq!(written.len(), 2);
    let back: RunMetadata = serde_json::from_str(&fs::read_to_string(dir.path().join("test.meta.json")).unwrap()).unwrap();
    assert_eq!(back.outputs, vec!["a.csv".to_string()]);
    assert_eq!(back.config_sha256, meta.config_sha256);
}

#[test]
fn config_hash_ignores_formatting() {
    let a = RunConfig::from_str(r#"{"seed": 1, "frames": 3}"#, false).unwrap();
    let b = RunConfig::from_str("frames = 3\nseed = 1\n", true).unwrap();
    let h = |c: &RunConfig| config_hash(&serde_json::to_value(c).unwrap()).unwrap();
    assert_eq!(h(&a), h(&b));
    let c = RunConfig::from_str(r#"{"seed": 2, "frames": 3}"#, false).unwrap();
    assert_ne!(h(&a), h(&c));
}

#[test]
fn config_rejects_bad_documents() {
    assert!(RunConfig::from_str(r#"{"sed": 1}"#, false).is_err());
    assert!(RunConfig::from_str(r#"{"frames": -1}"#, false).is_err());
    assert!(RunConfig::from_str("seed = \"one\"", true).is_err());
    let cfg = RunConfig::from_str(r#"{"noise": {"sigma_ro": 5000.0}}"#, false).unwrap();
    assert!(cfg.noise.sigma_b > NoiseParams::default().sigma_b);
}
