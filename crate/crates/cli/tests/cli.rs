use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use raymar::simulation::PhantomSpec;
use raymar::pipeline::artifacts;
use raymar::Grid;

/// Quarter-resolution scan with a short swarm: 64³ voxels of 2 mm.
const SMALL: &str = r#"
seed = 3

[geometry]
det_bins = [128, 64]
n_views = 90

[grid]
dims = [64, 64, 64]
spacing = [2.0, 2.0, 2.0]

[registration]
n_particles = 16
n_generations = 15
"#;

fn raymar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raymar")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, format!("{SMALL}\n{extra}")).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn simulate_then_mar_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().to_str().unwrap();

    let sim = raymar(&["simulate", "--config", &cfg, "--out", out]);
    assert!(sim.status.success(), "{}", stderr(&sim));
    let mar = raymar(&["mar", "--config", &cfg, "--out", out]);
    assert!(mar.status.success(), "{}", stderr(&mar));
    let report = String::from_utf8(mar.stdout).unwrap();
    assert!(report.contains("seam_excess:"), "{report}");

    for name in [
        artifacts::UNC_RECON,
        artifacts::TRANSFORM,
        artifacts::METAL_MASK,
        artifacts::SHADOW,
        artifacts::CORRECTED_SINO,
        artifacts::INPAINTED_SINO,
        artifacts::FINAL,
        artifacts::REPORT,
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }

    let final_vol = dir.path().join(artifacts::FINAL);
    let export = raymar(&[
        "export",
        "--out",
        out,
        "--volume",
        final_vol.to_str().unwrap(),
        "--indices",
        "10,32",
        "--prefix",
        "final",
    ]);
    assert!(export.status.success(), "{}", stderr(&export));
    let pgms: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "pgm"))
        .collect();
    assert_eq!(pgms.len(), 2);
    let bytes = fs::read(pgms[0].path()).unwrap();
    let header = b"P5\n64 64\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 64 * 64);
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[correction]\nunknown_key = 1\n");
    let o = raymar(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "[correction]\nh = -1.0\n");
    let o = raymar(&["mar", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn missing_inputs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = raymar(&["reconstruct", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn metal_free_scan_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::centered([64; 3], [2.0; 3]).unwrap();
    let phantom = dir.path().join("phantom.toml");
    fs::write(&phantom, PhantomSpec::spine(grid, false).to_toml()).unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("[simulation]\nphantom = {:?}\n", phantom.to_str().unwrap()),
    );
    let out = dir.path().to_str().unwrap();
    assert!(raymar(&["simulate", "--config", &cfg, "--out", out]).status.success());
    for stage in ["reconstruct", "segment-metal"] {
        let o = raymar(&[stage, "--config", &cfg, "--out", out]);
        if stage == "segment-metal" {
            assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
            assert!(stderr(&o).contains("no metal found"), "{}", stderr(&o));
        } else {
            assert!(o.status.success(), "{}", stderr(&o));
        }
    }
}
