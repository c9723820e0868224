//! Six-parameter rigid motion and rigid resampling of volumes and masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::vec3::Vec3;
use crate::volume::{BinaryMask3D, Grid, Volume3D};

/// Rigid motion: rotation by intrinsic Z-then-Y-then-X Euler angles (rad)
/// about a pivot, followed by a translation (mm).
///
/// `x' = R (x - c) + c + t`, with `R = Rz(rz) · Ry(ry) · Rx(rx)` and `c` the
/// pivot (the world-space centre of the reference grid).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

pub type Mat3 = [[f64; 3]; 3];

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        translation: [0.0; 3],
        rotation: [0.0; 3],
    };

    pub fn new(translation: [f64; 3], rotation: [f64; 3]) -> Self {
        RigidTransform {
            translation,
            rotation,
        }
    }

    /// Parameter vector `[tx, ty, tz, rx, ry, rz]`.
    pub fn from_params(p: &[f64; 6]) -> Self {
        RigidTransform::new([p[0], p[1], p[2]], [p[3], p[4], p[5]])
    }

    pub fn params(&self) -> [f64; 6] {
        let [tx, ty, tz] = self.translation;
        let [rx, ry, rz] = self.rotation;
        [tx, ty, tz, rx, ry, rz]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let [rx, ry, rz] = self.rotation;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        [
            [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
            [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
            [-sy, cy * sx, cy * cx],
        ]
    }

    /// Euler angles recovered from a rotation matrix built with the same
    /// convention. Valid away from gimbal lock (|ry| < 90°).
    pub fn euler_from_matrix(m: &Mat3) -> [f64; 3] {
        let ry = (-m[2][0]).clamp(-1.0, 1.0).asin();
        let rx = m[2][1].atan2(m[2][2]);
        let rz = m[1][0].atan2(m[0][0]);
        [rx, ry, rz]
    }

    /// Inverse motion. The pivot cancels, so the result is pivot independent.
    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.rotation_matrix());
        let t = mat_vec(&rt, Vec3(self.translation));
        RigidTransform {
            translation: (-t).0,
            rotation: RigidTransform::euler_from_matrix(&rt),
        }
    }

    /// Applies the motion to a world point using pivot `center`.
    pub fn apply(&self, p: Vec3, center: Vec3) -> Vec3 {
        mat_vec(&self.rotation_matrix(), p - center) + center + Vec3(self.translation)
    }

    /// The motion as an affine map between two grids' continuous index
    /// coordinates: `idx_to = A · idx_from + b`.
    pub fn index_affine(&self, from: &Grid, to: &Grid, center: Vec3) -> IndexAffine {
        let r = self.rotation_matrix();
        let mut a = [[0.0; 3]; 3];
        for (row, arow) in a.iter_mut().enumerate() {
            for (col, v) in arow.iter_mut().enumerate() {
                *v = r[row][col] * from.spacing[col] / to.spacing[row];
            }
        }
        let o = self.apply(Vec3(from.origin), center);
        let b = to.to_index(o);
        IndexAffine { a, b: b.0 }
    }

    pub fn max_abs_rotation_deg(&self) -> f64 {
        self.rotation.iter().map(|r| r.abs().to_degrees()).fold(0.0, f64::max)
    }
}

/// Affine map between continuous index spaces.
#[derive(Debug, Clone, Copy)]
pub struct IndexAffine {
    pub a: Mat3,
    pub b: [f64; 3],
}

impl IndexAffine {
    #[inline(always)]
    pub fn apply(&self, i: f64, j: f64, k: f64) -> [f64; 3] {
        let a = &self.a;
        [
            a[0][0] * i + a[0][1] * j + a[0][2] * k + self.b[0],
            a[1][0] * i + a[1][1] * j + a[1][2] * k + self.b[1],
            a[2][0] * i + a[2][1] * j + a[2][2] * k + self.b[2],
        ]
    }
}

pub(crate) fn transpose(m: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            t[j][i] = *v;
        }
    }
    t
}

pub(crate) fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    Vec3::new(
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    )
}

/// Resamples `vol` onto `reference`'s grid under `t`: each output voxel
/// centre `c` receives `vol` sampled trilinearly at `t⁻¹(c)`. The pivot is
/// the reference grid's world centre.
pub fn resample_rigid(vol: &Volume3D, t: &RigidTransform, reference: &Grid) -> Volume3D {
    let map = t
        .inverse()
        .index_affine(reference, vol.grid(), reference.world_center());
    let [nx, ny, _] = reference.dims;
    let mut out = Volume3D::zeros(*reference);
    out.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let [x, y, z] = map.apply(i as f64, j as f64, k as f64);
                    slab[i + nx * j] = vol.sample_index(x, y, z);
                }
            }
        });
    out
}

/// Nearest-neighbour counterpart of [`resample_rigid`] for masks.
pub fn resample_mask_rigid(mask: &BinaryMask3D, t: &RigidTransform, reference: &Grid) -> BinaryMask3D {
    let map = t
        .inverse()
        .index_affine(reference, mask.grid(), reference.world_center());
    let src = mask.grid();
    let [nx, ny, _] = reference.dims;
    let mut out = BinaryMask3D::empty(*reference);
    out.data_mut()
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..ny {
                for i in 0..nx {
                    let f = map.apply(i as f64, j as f64, k as f64);
                    slab[i + nx * j] = nearest_index(src, f).is_some_and(|[a, b, c]| mask.get(a, b, c));
                }
            }
        });
    out
}

#[inline(always)]
pub(crate) fn nearest_index(g: &Grid, f: [f64; 3]) -> Option<[usize; 3]> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = f[a].round();
        if !(r >= 0.0 && r <= (g.dims[a] - 1) as f64) {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(idx)
}
