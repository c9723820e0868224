//! Regular voxel grids: attenuation volumes and binary masks.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Voxel lattice description. `origin` is the world position of the centre
/// of voxel (0, 0, 0); data is stored x-fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Grid {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    /// Grid whose centre sits on the isocenter (world origin).
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Grid::new(dims, spacing, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid("grid", format!("dims {:?} must be >= 1", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(
                "grid",
                format!("spacing {:?} must be finite and > 0", self.spacing),
            ));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid", "origin must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        )
    }

    /// World point to continuous voxel-index coordinates.
    #[inline]
    pub fn to_index(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        )
    }

    /// Corners of the box spanned by the voxel centres.
    pub fn center_bounds(&self) -> (Vec3, Vec3) {
        let lo = Vec3(self.origin);
        let hi = Vec3([0, 1, 2].map(|a| self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a]));
        (lo, hi)
    }

    pub fn world_center(&self) -> Vec3 {
        let (lo, hi) = self.center_bounds();
        (lo + hi) * 0.5
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn same_lattice(&self, other: &Grid) -> bool {
        self == other
    }

    pub(crate) fn ensure_same(&self, other: &Grid, ctx: &str) -> Result<()> {
        if self.same_lattice(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!("{ctx}: {self:?} vs {other:?}")))
        }
    }
}

/// Linear attenuation coefficients (mm⁻¹) on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub(crate) grid: Grid,
    pub(crate) data: Vec<f64>,
}

impl Volume3D {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid("volume", format!("non-finite value at voxel {pos}")));
        }
        Ok(Volume3D { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume3D {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Volume3D {
            grid,
            data: vec![value; grid.len()],
        }
    }

    /// Evaluates `f` at every voxel centre.
    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.voxel_center(i, j, k)));
                }
            }
        }
        Volume3D { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
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

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume3D {
        Volume3D {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Trilinear interpolation at a world point; 0.0 outside the box spanned
    /// by the voxel centres.
    #[inline]
    pub fn sample_trilinear(&self, p: Vec3) -> f64 {
        let f = self.grid.to_index(p);
        self.sample_index(f[0], f[1], f[2])
    }

    /// Trilinear interpolation at continuous voxel-index coordinates.
    #[inline]
    pub fn sample_index(&self, fx: f64, fy: f64, fz: f64) -> f64 {
        let [nx, ny, nz] = self.grid.dims;
        let inside = |f: f64, n: usize| f >= 0.0 && f <= (n - 1) as f64;
        if !(inside(fx, nx) && inside(fy, ny) && inside(fz, nz)) {
            return 0.0;
        }
        self.sample_index_clamped(fx, fy, fz)
    }

    /// Trilinear interpolation with coordinates clamped into the grid. Used
    /// by ray marching, where samples are already clipped to the grid box and
    /// only rounding can push them outside.
    #[inline(always)]
    pub(crate) fn sample_index_clamped(&self, fx: f64, fy: f64, fz: f64) -> f64 {
        let [nx, ny, nz] = self.grid.dims;
        let (i0, di, tx) = cell(fx, nx);
        let (j0, dj, ty) = cell(fy, ny);
        let (k0, dk, tz) = cell(fz, nz);
        let (sy, sz) = (nx * dj, nx * ny * dk);
        let base = i0 + nx * (j0 + ny * k0);
        // one bounds check for the whole 2×2×2 cell
        let c = &self.data[base..=base + di + sy + sz];
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let c00 = lerp(c[0], c[di], tx);
        let c10 = lerp(c[sy], c[sy + di], tx);
        let c01 = lerp(c[sz], c[sz + di], tx);
        let c11 = lerp(c[sy + sz], c[sy + sz + di], tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
    }

    /// Voxels where `mask` is set keep their value, all others become zero.
    pub fn masked(&self, mask: &BinaryMask3D) -> Result<Volume3D> {
        self.grid.ensure_same(mask.grid(), "masked")?;
        Ok(Volume3D {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(mask.data())
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect(),
        })
    }

    fn zip_with(&self, other: &Volume3D, f: impl Fn(f64, f64) -> f64) -> Volume3D {
        assert!(
            self.grid.same_lattice(&other.grid),
            "volume arithmetic on mismatched grids"
        );
        Volume3D {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

/// Lower cell index, step to the upper one (0 on a single-voxel axis) and
/// fractional offset along one axis.
#[inline(always)]
fn cell(f: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let f = f.clamp(0.0, (n - 1) as f64);
    let i0 = (f as usize).min(n - 2);
    (i0, 1, f - i0 as f64)
}

impl Add for &Volume3D {
    type Output = Volume3D;
    fn add(self, o: &Volume3D) -> Volume3D {
        self.zip_with(o, |a, b| a + b)
    }
}

impl Sub for &Volume3D {
    type Output = Volume3D;
    fn sub(self, o: &Volume3D) -> Volume3D {
        self.zip_with(o, |a, b| a - b)
    }
}

impl Mul<f64> for &Volume3D {
    type Output = Volume3D;
    fn mul(self, s: f64) -> Volume3D {
        self.map(|v| v * s)
    }
}

/// One boolean per voxel on the same lattice as a companion volume.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask3D {
    grid: Grid,
    data: Vec<bool>,
}

impl BinaryMask3D {
    pub fn new(grid: Grid, data: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(BinaryMask3D { grid, data })
    }

    pub fn empty(grid: Grid) -> Self {
        BinaryMask3D {
            grid,
            data: vec![false; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> bool) -> Self {
        let v = Volume3D::from_fn(grid, |p| if f(p) { 1.0 } else { 0.0 });
        BinaryMask3D {
            grid,
            data: v.data.iter().map(|&x| x > 0.5).collect(),
        }
    }

    /// Voxels whose value exceeds `threshold`.
    pub fn above(vol: &Volume3D, threshold: f64) -> Self {
        BinaryMask3D {
            grid: vol.grid,
            data: vol.data.iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Nearest-voxel lookup at a world point; false outside the grid.
    #[inline]
    pub fn sample_nearest(&self, p: Vec3) -> bool {
        let f = self.grid.to_index(p);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = f[a].round();
            if !(r >= 0.0 && r <= (self.grid.dims[a] - 1) as f64) {
                return false;
            }
            idx[a] = r as usize;
        }
        self.get(idx[0], idx[1], idx[2])
    }

    /// Inclusive index bounds of the set voxels, `None` when empty.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = self.grid.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
        any.then_some((lo, hi))
    }

    pub fn and(&self, o: &BinaryMask3D) -> BinaryMask3D {
        self.zip_with(o, |a, b| a && b)
    }

    pub fn or(&self, o: &BinaryMask3D) -> BinaryMask3D {
        self.zip_with(o, |a, b| a || b)
    }

    pub fn and_not(&self, o: &BinaryMask3D) -> BinaryMask3D {
        self.zip_with(o, |a, b| a && !b)
    }

    pub fn not(&self) -> BinaryMask3D {
        BinaryMask3D {
            grid: self.grid,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    fn zip_with(&self, o: &BinaryMask3D, f: impl Fn(bool, bool) -> bool) -> BinaryMask3D {
        assert!(self.grid.same_lattice(&o.grid), "mask logic on mismatched grids");
        BinaryMask3D {
            grid: self.grid,
            data: self.data.iter().zip(&o.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: [usize; 3]) -> Grid {
        Grid::new(n, [1.0, 2.0, 0.5], [-3.0, 1.0, 2.0]).unwrap()
    }

    #[test]
    fn node_value_is_exact() {
        let g = grid([4, 3, 5]);
        let mut v = Volume3D::zeros(g);
        v.set(2, 1, 3, 3.7);
        assert_eq!(v.sample_trilinear(g.voxel_center(2, 1, 3)), 3.7);
    }

    #[test]
    fn midpoint_along_x() {
        let g = grid([4, 3, 5]);
        let v = Volume3D::from_fn(g, |p| if p.x() < -2.5 { 1.0 } else { 2.0 });
        let a = g.voxel_center(0, 1, 2);
        let b = g.voxel_center(1, 1, 2);
        assert!((v.sample_trilinear((a + b) * 0.5) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn far_outside_is_zero_fill() {
        let g = Grid::centered([10, 10, 10], [1.0; 3]).unwrap();
        let v = Volume3D::filled(g, 5.0);
        assert_eq!(v.sample_trilinear(Vec3::new(1000.0, 0.0, 0.0)), 0.0);
        // just outside the centre box is also fill
        assert_eq!(v.sample_trilinear(Vec3::new(4.5 + 1e-9, 0.0, 0.0)), 0.0);
        assert_eq!(v.sample_trilinear(Vec3::new(4.5, 4.5, -4.5)), 5.0);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(Grid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        let g = grid([2, 2, 2]);
        assert!(Volume3D::new(g, vec![0.0; 7]).is_err());
        assert!(Volume3D::new(g, vec![f64::NAN; 8]).is_err());
    }

    #[test]
    fn singleton_axis_samples_plane() {
        let g = Grid::new([3, 3, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::from_fn(g, |p| p.x() + 10.0 * p.y());
        assert!((v.sample_trilinear(Vec3::new(0.5, 1.5, 0.0)) - 15.5).abs() < 1e-12);
        assert_eq!(v.sample_trilinear(Vec3::new(0.5, 1.5, 0.1)), 0.0);
    }

    proptest! {
        #[test]
        fn exact_on_affine_fields(
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -5.0f64..5.0,
            fx in 0.0f64..5.0, fy in 0.0f64..3.0, fz in 0.0f64..4.0,
        ) {
            let g = grid([6, 4, 5]);
            let f = |p: Vec3| a * p.x() + b * p.y() + c * p.z() + d;
            let v = Volume3D::from_fn(g, f);
            let p = Vec3::new(
                g.origin[0] + fx * g.spacing[0],
                g.origin[1] + fy * g.spacing[1],
                g.origin[2] + fz * g.spacing[2],
            );
            let exact = f(p);
            let got = v.sample_trilinear(p);
            prop_assert!((got - exact).abs() <= 1e-9 * exact.abs().max(1.0));
        }
    }
}
