mod common;

use common::soft_ball;
use raymar::fdk::{fdk_reconstruct, RampWindow};
use raymar::projector::{default_step, forward_project};
use raymar::volume::BinaryMask3D;
use raymar::{ConeBeamGeometry, Grid};

fn interior_stats(recon: &raymar::Volume3D, truth: &raymar::Volume3D, radius: f64) -> (f64, f64) {
    let inside = BinaryMask3D::from_fn(*truth.grid(), |p| p.norm() < radius);
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((r, t), &m) in recon.data().iter().zip(truth.data()).zip(inside.data()) {
        if m {
            sum += r;
            sq += (r - t) * (r - t);
            n += 1;
        }
    }
    (sum / n as f64, (sq / n as f64).sqrt())
}

#[test]
fn smooth_ball_round_trip() {
    let grid = Grid::centered([64; 3], [2.0; 3]).unwrap();
    let geom = ConeBeamGeometry::o_arm_scaled([128, 48], 120).unwrap();
    let mu = 0.02;
    let truth = soft_ball(grid, 50.0, 8.0, mu);
    let sino = forward_project(&truth, &geom, default_step(&grid)).unwrap();
    for window in [RampWindow::RamLak, RampWindow::SheppLogan] {
        let recon = fdk_reconstruct(&sino, &grid, window).unwrap();
        let (mean, rmse) = interior_stats(&recon, &truth, 38.0);
        assert!((mean / mu - 1.0).abs() < 0.05, "{window:?}: mean {mean}");
        assert!(rmse < 0.1 * mu, "{window:?}: rmse {rmse}");
    }
}

#[test]
fn reconstruction_scales_with_data() {
    let grid = Grid::centered([32; 3], [3.0; 3]).unwrap();
    let geom = ConeBeamGeometry::o_arm_scaled([64, 24], 60).unwrap();
    let sino = forward_project(&soft_ball(grid, 35.0, 6.0, 0.02), &geom, 1.5).unwrap();
    let doubled = raymar::Sinogram::new(geom.clone(), sino.data().iter().map(|x| 2.0 * x).collect()).unwrap();
    let a = fdk_reconstruct(&sino, &grid, RampWindow::SheppLogan).unwrap();
    let b = fdk_reconstruct(&doubled, &grid, RampWindow::SheppLogan).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
}
