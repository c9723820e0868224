#![allow(dead_code)]

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use raymar::correction::{CorrectionParams, METAL_MEMBERSHIP};
use raymar::pipeline::PipelineConfig;
use raymar::projector::RayProfile;
use raymar::{ConeBeamGeometry, Grid, Vec3, Volume3D};

/// The scanner at 180 views over a 256 × 64 detector.
pub fn reference_geometry() -> ConeBeamGeometry {
    ConeBeamGeometry::o_arm_scaled([256, 64], 180).unwrap()
}

pub fn reference_grid() -> Grid {
    Grid::centered([128; 3], [1.0; 3]).unwrap()
}

pub fn ball(grid: Grid, radius: f64, mu: f64) -> Volume3D {
    Volume3D::from_fn(grid, |p| if p.norm() <= radius { mu } else { 0.0 })
}

/// Ball whose edge falls off with a raised cosine over `taper` mm.
pub fn soft_ball(grid: Grid, radius: f64, taper: f64, mu: f64) -> Volume3D {
    Volume3D::from_fn(grid, |p| {
        let r = p.norm();
        if r <= radius - taper {
            mu
        } else if r >= radius {
            0.0
        } else {
            let t = (r - (radius - taper)) / taper;
            mu * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    })
}

/// Length of the chord a ball of `radius` at the origin cuts from the line
/// through `a` and `b`.
pub fn chord(a: Vec3, b: Vec3, radius: f64) -> f64 {
    let d = (b - a).normalized();
    let closest = a - d * a.dot(d);
    let h2 = closest.dot(closest);
    if h2 >= radius * radius {
        0.0
    } else {
        2.0 * (radius * radius - h2).sqrt()
    }
}

/// Quarter-resolution pipeline: 64³ voxels of 2 mm, 128 × 64 detector and
/// 90 views. Runs end to end in well under a minute.
pub fn small_config(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.geometry.det_bins = [128, 64];
    cfg.geometry.n_views = 90;
    cfg.grid.dims = [64; 3];
    cfg.grid.spacing = [2.0; 3];
    cfg.output.dir = dir.to_path_buf();
    cfg
}

/// As [`small_config`] with a short swarm, for tests that only exercise
/// plumbing.
pub fn quick_config(dir: &Path) -> PipelineConfig {
    let mut cfg = small_config(dir);
    cfg.registration.n_particles = 16;
    cfg.registration.n_generations = 15;
    cfg
}

pub fn profile(samples: Vec<f64>, step: f64) -> RayProfile {
    RayProfile {
        samples,
        step,
        entry: Vec3::ZERO,
        direction: Vec3::new(0.0, 0.0, 1.0),
    }
}

pub struct Case {
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    pub metal: Vec<f64>,
    pub step: f64,
    pub params: CorrectionParams,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..120);
    let rho = rng.random_range(0.1..2.0);
    let mut metal = vec![0.0; n];
    // a few runs of metal, some partial-volume samples, some empty rays
    for _ in 0..rng.random_range(0..4) {
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..12)).min(n);
        for m in &mut metal[a..b] {
            *m = rho * rng.random_range(0.0..1.2);
        }
    }
    Case {
        noisy: (0..n).map(|_| rng.random_range(-0.01..0.2)).collect(),
        clean: (0..n).map(|_| rng.random_range(0.0..0.08)).collect(),
        metal,
        step: rng.random_range(0.2..2.0),
        params: CorrectionParams {
            rho,
            h: rng.random_range(1.0..30.0),
            prior_trust: rng.random_range(0.05..1.0),
        },
    }
}

/// Sample-by-sample evaluation written out longhand.
pub fn correction_oracle(c: &Case) -> (Vec<f64>, Vec<f64>) {
    let rho = c.params.rho;
    let flagged: Vec<usize> = (0..c.metal.len()).filter(|&i| c.metal[i] > METAL_MEMBERSHIP * rho).collect();
    let dt: Vec<f64> = (0..c.metal.len())
        .map(|i| {
            flagged
                .iter()
                .map(|&j| (i as f64 - j as f64).abs() * c.step)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let out = (0..c.metal.len())
        .map(|i| {
            if flagged.contains(&i) {
                let m = c.metal[i].min(rho);
                m + (1.0 - m / rho) * c.clean[i]
            } else {
                let w = c.params.prior_trust * (-dt[i] / c.params.h).exp();
                w * c.clean[i] + (1.0 - w) * c.noisy[i]
            }
        })
        .collect();
    (out, dt)
}

fn neighbours(w: usize, h: usize, i: usize) -> Vec<usize> {
    let (x, y) = ((i % w) as i64, (i / w) as i64);
    let mut out = Vec::new();
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (nx, ny) = (x + dx, y + dy);
            if (dx, dy) != (0, 0) && nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 {
                out.push(ny as usize * w + nx as usize);
            }
        }
    }
    out
}

/// Every term of the objective is `(a·x + c)²` for a sparse row `a`; the
/// minimiser solves `(Σ aᵀa) x = −Σ c·a`.
pub fn dense_solve(w: usize, h: usize, orig: &[f64], corr: &[f64], region: &[bool]) -> Vec<f64> {
    let unknowns: Vec<usize> = (0..w * h).filter(|&i| region[i]).collect();
    let col = |i: usize| unknowns.iter().position(|&u| u == i).unwrap();
    let n = unknowns.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for &i in &unknowns {
        for j in neighbours(w, h, i) {
            let mut a = DVector::<f64>::zeros(n);
            a[col(i)] = 1.0;
            let c = if region[j] {
                a[col(j)] = -1.0;
                -(corr[i] - corr[j])
            } else {
                -orig[j] - (corr[i] - corr[j])
            };
            m += &a * a.transpose();
            rhs -= &a * c;
        }
    }
    let x = m.lu().solve(&rhs).expect("anchored region gives a regular system");
    let mut out = orig.to_vec();
    for (k, &i) in unknowns.iter().enumerate() {
        out[i] = x[k];
    }
    out
}
