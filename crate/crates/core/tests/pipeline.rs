mod common;

use std::fs;
use std::path::Path;

use raymar::io;
use raymar::pipeline::{artifacts, run_mar, run_mar_from, run_stages, simulate_case, PipelineConfig, Stage};
use raymar::simulation::PhantomSpec;
use raymar::Error;

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn simulated(dir: &Path) -> PipelineConfig {
    let cfg = common::quick_config(dir);
    simulate_case(&cfg).unwrap();
    cfg
}

#[test]
fn runs_are_bitwise_reproducible_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = simulated(a.path());
    run_mar(&ca).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    pool.install(|| {
        let cb = simulated(b.path());
        run_mar(&cb).unwrap();
    });
    for name in [
        "unc_sino.raw",
        "prior.raw",
        "unc_recon.raw",
        artifacts::TRANSFORM,
        "metal_mask.raw",
        "shadow.raw",
        "corrected_sino.raw",
        "inpainted_sino.raw",
        "final.raw",
    ] {
        assert!(bytes(a.path(), name) == bytes(b.path(), name), "{name} differs");
    }
}

#[test]
fn resuming_reuses_earlier_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulated(dir.path());
    let full = run_mar(&cfg).unwrap();
    let transform = bytes(dir.path(), artifacts::TRANSFORM);

    let resumed = run_mar_from(&cfg, Stage::Inpaint).unwrap();
    assert!(resumed.report.contains("resumed_from: inpaint"));
    assert_eq!(bytes(dir.path(), artifacts::TRANSFORM), transform);
    // artifacts are stored in single precision
    let scale = full.volume.min_max().1;
    for (x, y) in full.volume.data().iter().zip(resumed.volume.data()) {
        assert!((x - y).abs() <= 1e-5 * scale);
    }
    let e = resumed.evaluation.expect("ground truth is on disk");
    assert!(e.band_reduction().is_finite());
    assert!(dir.path().join(artifacts::REPORT).exists());
}

#[test]
fn partial_runs_stop_after_the_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulated(dir.path());
    assert!(run_stages(&cfg, Stage::Reconstruct, Stage::Register).unwrap().is_none());
    assert!(dir.path().join(artifacts::ALIGNED_PRIOR).exists());
    assert!(!dir.path().join(artifacts::METAL_MASK).exists());
    assert!(run_stages(&cfg, Stage::SegmentMetal, Stage::SegmentMetal).unwrap().is_none());
    assert!(dir.path().join(artifacts::SHADOW).exists());
    assert!(!dir.path().join(artifacts::CORRECTED_SINO).exists());
    assert!(matches!(run_stages(&cfg, Stage::Inpaint, Stage::Correct), Err(Error::Config(_))));
}

#[test]
fn reinserted_metal_sits_at_rho() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = simulated(dir.path());
    cfg.output.reinsert_metal = true;
    cfg.metal.rho = Some(0.5);
    let out = run_mar(&cfg).unwrap();
    let mask = io::read_mask(&dir.path().join(artifacts::METAL_MASK)).unwrap();
    assert!(mask.count() > 0);
    for (v, &m) in out.volume.data().iter().zip(mask.data()) {
        if m {
            assert_eq!(*v, 0.5);
        }
    }
}

#[test]
fn metal_free_case_reports_no_metal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::quick_config(dir.path());
    let phantom = dir.path().join("phantom.toml");
    fs::write(&phantom, PhantomSpec::spine(cfg.grid.build().unwrap(), false).to_toml()).unwrap();
    cfg.simulation.phantom = Some(phantom);
    simulate_case(&cfg).unwrap();
    let err = run_mar(&cfg).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "segment-metal", .. }), "{err}");
    assert!(matches!(err.root(), Error::NoMetalFound));
}

#[test]
fn missing_inputs_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::quick_config(dir.path());
    let err = run_mar(&cfg).unwrap_err();
    assert!(matches!(err.root(), Error::Io(_)), "{err}");
}
