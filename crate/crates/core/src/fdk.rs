//! Feldkamp–Davis–Kress filtered backprojection for the circular orbit.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Sinogram};
use crate::volume::{Grid, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampWindow {
    RamLak,
    #[default]
    SheppLogan,
}

impl std::str::FromStr for RampWindow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" => Ok(RampWindow::RamLak),
            "shepp-logan" => Ok(RampWindow::SheppLogan),
            _ => Err(Error::invalid("ramp window", format!("`{s}` (expected ram-lak or shepp-logan)"))),
        }
    }
}

/// Discrete spatial-domain ramp kernel for one detector row length.
#[derive(Clone)]
pub struct RampFilter {
    pub window: RampWindow,
    /// Taps for offsets `0..nu`; the kernel is symmetric.
    pub taps: Vec<f64>,
    pub padded_len: usize,
    pub pitch: f64,
    spectrum: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for RampFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RampFilter")
            .field("window", &self.window)
            .field("padded_len", &self.padded_len)
            .field("pitch", &self.pitch)
            .finish()
    }
}

/// Closed-form discrete ramp tap at integer offset `k` for sample pitch `d`.
pub fn ramp_tap(window: RampWindow, k: i64, d: f64) -> f64 {
    match window {
        RampWindow::RamLak => {
            if k == 0 {
                1.0 / (4.0 * d * d)
            } else if k % 2 == 0 {
                0.0
            } else {
                -1.0 / (PI * PI * (k * k) as f64 * d * d)
            }
        }
        RampWindow::SheppLogan => -2.0 / (PI * PI * d * d * (4.0 * (k * k) as f64 - 1.0)),
    }
}

impl RampFilter {
    pub fn new(window: RampWindow, nu: usize, pitch: f64) -> Self {
        let taps: Vec<f64> = (0..nu as i64).map(|k| ramp_tap(window, k, pitch)).collect();
        let padded_len = (2 * nu).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(padded_len);
        let inverse = planner.plan_fft_inverse(padded_len);
        let mut spectrum = vec![Complex64::new(0.0, 0.0); padded_len];
        spectrum[0].re = taps[0];
        for (k, &t) in taps.iter().enumerate().skip(1) {
            spectrum[k].re = t;
            spectrum[padded_len - k].re = t;
        }
        forward.process(&mut spectrum);
        RampFilter {
            window,
            taps,
            padded_len,
            pitch,
            spectrum,
            forward,
            inverse,
        }
    }

    pub fn for_geometry(geom: &ConeBeamGeometry, window: RampWindow) -> Self {
        RampFilter::new(window, geom.nu(), geom.pitch()[0])
    }

    /// Linear convolution of `row` with the kernel, evaluated at the row's
    /// own bins (zero padded, so no wrap-around).
    pub fn convolve_row(&self, row: &mut [f64], buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.padded_len);
        for (b, &r) in buf.iter_mut().zip(row.iter()) {
            *b = Complex64::new(r, 0.0);
        }
        for b in buf[row.len()..].iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        self.forward.process(buf);
        for (b, h) in buf.iter_mut().zip(&self.spectrum) {
            *b *= h;
        }
        self.inverse.process(buf);
        let norm = 1.0 / self.padded_len as f64;
        for (r, b) in row.iter_mut().zip(buf.iter()) {
            *r = b.re * norm;
        }
    }
}

/// FDK cosine pre-weight `sdd / sqrt(sdd² + u² + v²)` of one bin.
pub fn cosine_weight(geom: &ConeBeamGeometry, u: usize, v: usize) -> f64 {
    let (uu, vv) = geom.detector_coords(u as f64, v as f64);
    geom.sdd / (geom.sdd * geom.sdd + uu * uu + vv * vv).sqrt()
}

/// Cosine-weights every bin and convolves each detector row with the ramp
/// kernel.
pub fn filter_rows(sino: &Sinogram, filter: &RampFilter) -> Result<Sinogram> {
    let geom = sino.geometry();
    let nu = geom.nu();
    if filter.taps.len() != nu {
        return Err(Error::ShapeMismatch(format!(
            "ramp filter built for {} bins, detector has {nu}",
            filter.taps.len()
        )));
    }
    let weights: Vec<f64> = (0..geom.nv())
        .flat_map(|v| (0..nu).map(move |u| (u, v)))
        .map(|(u, v)| cosine_weight(geom, u, v))
        .collect();
    let mut out = sino.clone();
    out.data_mut()
        .par_chunks_mut(geom.rays_per_view())
        .for_each(|view| {
            let mut buf = vec![Complex64::new(0.0, 0.0); filter.padded_len];
            for (x, w) in view.iter_mut().zip(&weights) {
                *x *= w;
            }
            for row in view.chunks_mut(nu) {
                filter.convolve_row(row, &mut buf);
            }
        });
    Ok(out)
}

/// Reconstructs `grid` from a full-turn circular cone-beam sinogram.
pub fn fdk_reconstruct(sino: &Sinogram, grid: &Grid, window: RampWindow) -> Result<Volume3D> {
    let geom = sino.geometry();
    grid.validate()?;
    if geom.n_views() < 2 {
        return Err(Error::ShapeMismatch("FDK needs at least two views".into()));
    }
    let coverage: f64 = geom.angular_weights().iter().sum();
    let span = geom.angles[geom.n_views() - 1] - geom.angles[0];
    let mean_gap = span / (geom.n_views() - 1) as f64;
    if span + mean_gap < 2.0 * PI * (1.0 - 1e-6) || (coverage - 2.0 * PI).abs() > 1e-6 {
        return Err(Error::ShapeMismatch(format!(
            "FDK needs views covering a full turn, got span {span:.4} rad"
        )));
    }
    let filtered = filter_rows(sino, &RampFilter::for_geometry(geom, window))?;
    Ok(backproject(&filtered, grid))
}

/// Distance-weighted voxel-driven backprojection of already filtered views
/// with bilinear detector interpolation.
pub fn backproject(filtered: &Sinogram, grid: &Grid) -> Volume3D {
    let geom = filtered.geometry();
    let (nu, nv) = (geom.nu(), geom.nv());
    let [du, dv] = geom.pitch();
    let scale = 0.5 * du * geom.sdd / geom.sad;
    let dbeta = geom.angular_weights();
    let trig: Vec<(f64, f64)> = geom.angles.iter().map(|a| a.sin_cos()).collect();

    // Views transposed to [view][u][v] so a voxel column walks contiguous v.
    let mut columns = vec![0.0; filtered.data().len()];
    columns
        .par_chunks_mut(nu * nv)
        .zip(filtered.data().par_chunks(nu * nv))
        .for_each(|(dst, src)| {
            for v in 0..nv {
                for u in 0..nu {
                    dst[u * nv + v] = src[v * nu + u];
                }
            }
        });

    let [nx, ny, nz] = grid.dims;
    let zs: Vec<f64> = (0..nz).map(|k| grid.origin[2] + k as f64 * grid.spacing[2]).collect();
    let u_off = 0.5 * nu as f64 - 0.5;
    let v_off = 0.5 * nv as f64 - 0.5;

    // One (x, y) row per task; each column accumulates all z.
    let rows: Vec<Vec<f64>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let y = grid.origin[1] + j as f64 * grid.spacing[1];
            let mut acc = vec![0.0; nx * nz];
            for (view, &(s, c)) in trig.iter().enumerate() {
                let data = &columns[view * nu * nv..(view + 1) * nu * nv];
                for i in 0..nx {
                    let x = grid.origin[0] + i as f64 * grid.spacing[0];
                    let depth = geom.sad - (x * c + y * s);
                    let mag = geom.sdd / depth;
                    let fu = mag * (-x * s + y * c) / du + u_off;
                    if !(fu >= 0.0 && fu <= (nu - 1) as f64) {
                        continue;
                    }
                    let w = dbeta[view] * geom.sad * geom.sad / (depth * depth) * scale;
                    let u0 = (fu as usize).min(nu.saturating_sub(2));
                    let (u1, tu) = if nu == 1 { (0, 0.0) } else { (u0 + 1, fu - u0 as f64) };
                    let col0 = &data[u0 * nv..(u0 + 1) * nv];
                    let col1 = &data[u1 * nv..(u1 + 1) * nv];
                    let vscale = mag / dv;
                    let out = &mut acc[i * nz..(i + 1) * nz];
                    for (slot, &z) in out.iter_mut().zip(&zs) {
                        let fv = z * vscale + v_off;
                        if !(fv >= 0.0 && fv <= (nv - 1) as f64) {
                            continue;
                        }
                        let v0 = (fv as usize).min(nv.saturating_sub(2));
                        let (v1, tv) = if nv == 1 { (0, 0.0) } else { (v0 + 1, fv - v0 as f64) };
                        let a = col0[v0] + tu * (col1[v0] - col0[v0]);
                        let b = col0[v1] + tu * (col1[v1] - col0[v1]);
                        *slot += w * (a + tv * (b - a));
                    }
                }
            }
            acc
        })
        .collect();

    let mut vol = Volume3D::zeros(*grid);
    let data = vol.data_mut();
    for (j, acc) in rows.iter().enumerate() {
        for i in 0..nx {
            for k in 0..nz {
                data[i + nx * (j + ny * k)] = acc[i * nz + k];
            }
        }
    }
    vol
}
