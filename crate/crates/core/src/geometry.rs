//! Circular-orbit cone-beam scanner description and projection data.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Flat-panel cone-beam scanner on a circular orbit about the world z axis.
///
/// The source sits at `sad · (cos β, sin β, 0)`. The detector is centred on
/// the source–isocenter line at distance `sdd` from the source, `u` runs
/// tangentially along `(-sin β, cos β, 0)` and `v` along `+z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    pub sad: f64,
    pub sdd: f64,
    /// Detector bins `(nu, nv)`.
    pub det_bins: [usize; 2],
    /// Active detector area `(wu, wv)` in mm.
    pub det_size: [f64; 2],
    pub angles: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RayIndex {
    pub view: usize,
    pub u: usize,
    pub v: usize,
}

impl ConeBeamGeometry {
    /// Views spread uniformly over a full turn, starting at angle 0.
    pub fn uniform(sad: f64, sdd: f64, det_bins: [usize; 2], det_size: [f64; 2], n_views: usize) -> Result<Self> {
        let angles = (0..n_views)
            .map(|i| 2.0 * PI * i as f64 / n_views as f64)
            .collect();
        let g = ConeBeamGeometry {
            sad,
            sdd,
            det_bins,
            det_size,
            angles,
        };
        g.validate()?;
        Ok(g)
    }

    /// The surgical C-arm the method was developed on: 647.7 / 1147.7 mm,
    /// 1024 × 384 bins over 393.432 × 290.224 mm², 360 views.
    pub fn o_arm() -> Self {
        ConeBeamGeometry::uniform(647.7, 1147.7, [1024, 384], [393.432, 290.224], 360)
            .expect("static geometry is valid")
    }

    /// Same physical scanner with fewer bins and views.
    pub fn o_arm_scaled(det_bins: [usize; 2], n_views: usize) -> Result<Self> {
        ConeBeamGeometry::uniform(647.7, 1147.7, det_bins, [393.432, 290.224], n_views)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sad > 0.0 && self.sad < self.sdd && self.sdd.is_finite()) {
            return Err(Error::invalid(
                "geometry",
                format!("need 0 < sad < sdd, got sad {} sdd {}", self.sad, self.sdd),
            ));
        }
        if self.det_bins.contains(&0) {
            return Err(Error::invalid("geometry", "detector bins must be >= 1"));
        }
        if self.det_size.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("geometry", "detector size must be > 0"));
        }
        if self.angles.is_empty() {
            return Err(Error::invalid("geometry", "no view angles"));
        }
        if self.angles.iter().any(|a| !a.is_finite()) || self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("geometry", "angles must be finite and strictly increasing"));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn nu(&self) -> usize {
        self.det_bins[0]
    }

    pub fn nv(&self) -> usize {
        self.det_bins[1]
    }

    /// Bin pitch `(Δu, Δv)` on the detector, mm.
    pub fn pitch(&self) -> [f64; 2] {
        [
            self.det_size[0] / self.det_bins[0] as f64,
            self.det_size[1] / self.det_bins[1] as f64,
        ]
    }

    pub fn rays_per_view(&self) -> usize {
        self.nu() * self.nv()
    }

    pub fn n_rays(&self) -> usize {
        self.n_views() * self.rays_per_view()
    }

    pub fn magnification(&self) -> f64 {
        self.sdd / self.sad
    }

    pub fn source(&self, view: usize) -> Vec3 {
        let (s, c) = self.angles[view].sin_cos();
        Vec3::new(self.sad * c, self.sad * s, 0.0)
    }

    /// Detector-plane coordinates of a (possibly fractional) bin index.
    /// Integer indices address bin centres.
    #[inline]
    pub fn detector_coords(&self, u_index: f64, v_index: f64) -> (f64, f64) {
        let [du, dv] = self.pitch();
        (
            (u_index + 0.5 - 0.5 * self.nu() as f64) * du,
            (v_index + 0.5 - 0.5 * self.nv() as f64) * dv,
        )
    }

    /// World position of a detector location given by fractional bin indices.
    pub fn detector_point(&self, view: usize, u_index: f64, v_index: f64) -> Vec3 {
        let (s, c) = self.angles[view].sin_cos();
        let (u, v) = self.detector_coords(u_index, v_index);
        let centre_dist = self.sdd - self.sad;
        Vec3::new(-centre_dist * c - u * s, -centre_dist * s + u * c, v)
    }

    /// Source point and detector-bin-centre point of one ray.
    pub fn ray_for(&self, idx: RayIndex) -> Result<(Vec3, Vec3)> {
        if idx.view >= self.n_views() || idx.u >= self.nu() || idx.v >= self.nv() {
            return Err(Error::OutOfBounds(format!(
                "ray {idx:?} outside {} views × {} × {} bins",
                self.n_views(),
                self.nu(),
                self.nv()
            )));
        }
        Ok((
            self.source(idx.view),
            self.detector_point(idx.view, idx.u as f64, idx.v as f64),
        ))
    }

    /// Per-view angular integration weights. Uniform full-turn sampling gives
    /// `2π / n`; irregular sampling uses half the gap to each neighbour.
    pub fn angular_weights(&self) -> Vec<f64> {
        let n = self.n_views();
        if n == 1 {
            return vec![2.0 * PI];
        }
        (0..n)
            .map(|i| {
                let prev = if i == 0 {
                    self.angles[n - 1] - 2.0 * PI
                } else {
                    self.angles[i - 1]
                };
                let next = if i == n - 1 {
                    self.angles[0] + 2.0 * PI
                } else {
                    self.angles[i + 1]
                };
                0.5 * (next - prev)
            })
            .collect()
    }

    #[inline]
    pub(crate) fn linear_index(&self, view: usize, v: usize, u: usize) -> usize {
        u + self.nu() * (v + self.nv() * view)
    }

    #[cfg(test)]
    pub(crate) fn ray_index(&self, linear: usize) -> RayIndex {
        let u = linear % self.nu();
        let r = linear / self.nu();
        RayIndex {
            view: r / self.nv(),
            u,
            v: r % self.nv(),
        }
    }
}

/// Line integrals for every ray, layout `[view][v][u]` (u fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: ConeBeamGeometry,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(geometry: ConeBeamGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.n_rays() {
            return Err(Error::ShapeMismatch(format!(
                "sinogram has {} values, geometry needs {}",
                data.len(),
                geometry.n_rays()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("sinogram", format!("non-finite value at {pos}")));
        }
        Ok(Sinogram { geometry, data })
    }

    pub fn zeros(geometry: ConeBeamGeometry) -> Self {
        let n = geometry.n_rays();
        Sinogram {
            geometry,
            data: vec![0.0; n],
        }
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn view(&self, view: usize) -> &[f64] {
        let n = self.geometry.rays_per_view();
        &self.data[view * n..(view + 1) * n]
    }

    pub fn get(&self, view: usize, v: usize, u: usize) -> f64 {
        self.data[self.geometry.linear_index(view, v, u)]
    }

    pub(crate) fn ensure_compatible(&self, other: &ConeBeamGeometry, ctx: &str) -> Result<()> {
        if &self.geometry == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{ctx}: sinogram geometries differ")))
        }
    }
}

/// One flag per detector pixel of every view: rays whose values cannot be
/// trusted because they traverse metal.
#[derive(Debug, Clone, PartialEq)]
pub struct MetalShadowMask {
    geometry: ConeBeamGeometry,
    data: Vec<bool>,
}

impl MetalShadowMask {
    pub fn new(geometry: ConeBeamGeometry, data: Vec<bool>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.n_rays() {
            return Err(Error::ShapeMismatch(format!(
                "shadow mask has {} values, geometry needs {}",
                data.len(),
                geometry.n_rays()
            )));
        }
        Ok(MetalShadowMask { geometry, data })
    }

    pub fn empty(geometry: ConeBeamGeometry) -> Self {
        let n = geometry.n_rays();
        MetalShadowMask {
            geometry,
            data: vec![false; n],
        }
    }

    pub fn geometry(&self) -> &ConeBeamGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn view(&self, view: usize) -> &[bool] {
        let n = self.geometry.rays_per_view();
        &self.data[view * n..(view + 1) * n]
    }

    pub fn get(&self, view: usize, v: usize, u: usize) -> bool {
        self.data[self.geometry.linear_index(view, v, u)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}
