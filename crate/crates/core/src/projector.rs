//! Ray sampling through volumes and the cone-beam forward projector.
//!
//! Rays are sampled at a fixed step on a lattice centred inside the ray's
//! chord through the box spanned by the voxel centres; line integrals are the
//! rectangle-rule sum of the trilinear samples.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Sinogram};
use crate::vec3::Vec3;
use crate::volume::{Grid, Volume3D};

/// Sample positions along one ray: `entry + k · step · direction` for
/// `k < len`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayLattice {
    pub entry: Vec3,
    pub direction: Vec3,
    pub step: f64,
    pub len: usize,
}

/// Ordered attenuation samples along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RayProfile {
    pub samples: Vec<f64>,
    pub step: f64,
    pub entry: Vec3,
    pub direction: Vec3,
}

impl RayProfile {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn lattice(&self) -> RayLattice {
        RayLattice {
            entry: self.entry,
            direction: self.direction,
            step: self.step,
            len: self.samples.len(),
        }
    }
}

/// Half a voxel along the finest axis.
pub fn default_step(grid: &Grid) -> f64 {
    0.5 * grid.min_spacing()
}

/// Parametric range `[t0, t1]` (mm from `a`) of the segment `a → b` inside
/// the axis-aligned box `[lo, hi]`.
pub fn clip_segment(lo: Vec3, hi: Vec3, a: Vec3, b: Vec3) -> Option<(f64, f64)> {
    let seg = b - a;
    let length = seg.norm();
    if length == 0.0 {
        return None;
    }
    let dir = seg * (1.0 / length);
    let mut t0 = 0.0f64;
    let mut t1 = length;
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-300 {
            if a[axis] < lo[axis] || a[axis] > hi[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut ta, mut tb) = ((lo[axis] - a[axis]) * inv, (hi[axis] - a[axis]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

impl RayLattice {
    /// Uniform lattice over the chord of `source → det` through `grid`'s
    /// voxel-centre box: `round(chord / step)` samples centred in the chord.
    pub fn through(grid: &Grid, source: Vec3, det: Vec3, step: f64) -> RayLattice {
        let direction = (det - source).normalized();
        let (lo, hi) = grid.center_bounds();
        match clip_segment(lo, hi, source, det) {
            Some((t0, t1)) => {
                let chord = t1 - t0;
                let len = (chord / step).round() as usize;
                let first = 0.5 * (t0 + t1) - 0.5 * (len.saturating_sub(1)) as f64 * step;
                RayLattice {
                    entry: source + direction * first,
                    direction,
                    step,
                    len,
                }
            }
            None => RayLattice {
                entry: source,
                direction,
                step,
                len: 0,
            },
        }
    }

    pub fn point(&self, k: usize) -> Vec3 {
        self.entry + self.direction * (k as f64 * self.step)
    }

    /// Visits each sample's continuous index coordinate in `grid`.
    #[inline(always)]
    pub(crate) fn for_each_index(&self, grid: &Grid, mut f: impl FnMut(f64, f64, f64)) {
        if self.len == 0 {
            return;
        }
        let start = grid.to_index(self.entry);
        let inc = Vec3::new(
            self.direction[0] * self.step / grid.spacing[0],
            self.direction[1] * self.step / grid.spacing[1],
            self.direction[2] * self.step / grid.spacing[2],
        );
        for k in 0..self.len {
            let t = k as f64;
            f(start[0] + inc[0] * t, start[1] + inc[1] * t, start[2] + inc[2] * t);
        }
    }

    /// Samples `vol` on this lattice (the lattice may come from another ray
    /// or another volume on the same grid).
    pub fn sample(&self, vol: &Volume3D) -> RayProfile {
        let march = FixedMarch::new(self, vol.grid());
        let samples = (0..self.len).map(|k| march.sample(vol, k)).collect();
        RayProfile {
            samples,
            step: self.step,
            entry: self.entry,
            direction: self.direction,
        }
    }

    /// Rectangle-rule integral over samples `ks`; the others must be zero
    /// for this to equal the full integral.
    fn integrate_range(&self, vol: &Volume3D, ks: std::ops::Range<usize>) -> f64 {
        let march = FixedMarch::new(self, vol.grid());
        let mut sum = 0.0;
        for k in ks {
            sum += march.sample(vol, k);
        }
        sum * self.step
    }

    /// Samples whose position lies in the world box `[lo, hi]` (plus one
    /// sample either side).
    fn samples_within(&self, source: Vec3, lo: Vec3, hi: Vec3) -> std::ops::Range<usize> {
        let far = self.entry + self.direction * (self.len as f64 * self.step);
        match clip_segment(lo, hi, source, far) {
            Some((t0, t1)) => {
                let first = (self.entry - source).dot(self.direction);
                let k0 = ((t0 - first) / self.step).floor() - 1.0;
                let k1 = ((t1 - first) / self.step).ceil() + 2.0;
                let clampk = |k: f64| k.clamp(0.0, self.len as f64) as usize;
                clampk(k0)..clampk(k1)
            }
            None => 0..0,
        }
    }
}

const FIXED_ONE: f64 = (1u64 << 32) as f64;

/// Lattice positions in 32.32 fixed-point voxel-index coordinates. Sample
/// `k` is `pos + k·inc`, so finding its cell needs only integer shifts; the
/// float-to-integer conversions of the direct formula dominate the cost of
/// trilinear sampling otherwise.
struct FixedMarch {
    pos: [i64; 3],
    inc: [i64; 3],
    /// Largest position on each axis (the last voxel centre).
    hi: [i64; 3],
    /// Largest lower cell index and step to the upper neighbour, per axis.
    last_cell: [i64; 3],
    stride: [usize; 3],
}

impl FixedMarch {
    fn new(lattice: &RayLattice, grid: &Grid) -> FixedMarch {
        let start = grid.to_index(lattice.entry);
        let d = grid.dims;
        let fixed = |x: f64| (x * FIXED_ONE).round() as i64;
        FixedMarch {
            pos: std::array::from_fn(|a| fixed(start[a])),
            inc: std::array::from_fn(|a| fixed(lattice.direction[a] * lattice.step / grid.spacing[a])),
            hi: std::array::from_fn(|a| ((d[a] - 1) as i64) << 32),
            last_cell: std::array::from_fn(|a| d[a].saturating_sub(2) as i64),
            stride: [
                usize::from(d[0] > 1),
                d[0] * usize::from(d[1] > 1),
                d[0] * d[1] * usize::from(d[2] > 1),
            ],
        }
    }

    /// Trilinear sample `k`, clamped into the grid (samples are clipped to
    /// the grid box already; only rounding can push them out).
    #[inline(always)]
    fn sample(&self, vol: &Volume3D, k: usize) -> f64 {
        let [nx, ny, _] = vol.grid.dims;
        let mut cell = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            let p = (self.pos[a] + self.inc[a] * k as i64).clamp(0, self.hi[a]);
            let i = (p >> 32).min(self.last_cell[a]);
            cell[a] = i as usize;
            t[a] = (p - (i << 32)) as f64 * (1.0 / FIXED_ONE);
        }
        let [sx, sy, sz] = self.stride;
        let base = cell[0] + nx * (cell[1] + ny * cell[2]);
        // one bounds check for the whole 2×2×2 cell
        let c = &vol.data[base..=base + sx + sy + sz];
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let c00 = lerp(c[0], c[sx], t[0]);
        let c10 = lerp(c[sy], c[sy + sx], t[0]);
        let c01 = lerp(c[sz], c[sz + sx], t[0]);
        let c11 = lerp(c[sy + sz], c[sy + sz + sx], t[0]);
        lerp(lerp(c00, c10, t[1]), lerp(c01, c11, t[1]), t[2])
    }
}

/// Samples `vol` every `step` mm along `source → det`, restricted to the
/// voxel-centre box. Empty when the segment misses the volume.
pub fn extract_profile(vol: &Volume3D, source: Vec3, det: Vec3, step: f64) -> Result<RayProfile> {
    check_step(step)?;
    Ok(RayLattice::through(vol.grid(), source, det, step).sample(vol))
}

/// Rectangle-rule line integral `Σ samples · step`.
pub fn integrate_profile(p: &RayProfile) -> f64 {
    p.samples.iter().sum::<f64>() * p.step
}

pub(crate) fn check_step(step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid("step", format!("{step} must be finite and > 0")))
    }
}

/// Line integral of every detector ray. Rays are independent, so the result
/// does not depend on thread scheduling. Samples outside the box where the
/// volume can be non-zero are skipped; they would add exact zeros.
pub fn forward_project(vol: &Volume3D, geom: &ConeBeamGeometry, step: f64) -> Result<Sinogram> {
    project_with(vol, geom, step, support_box(vol))
}

/// Forward projection restricted to the world box `support`, which must
/// enclose everything non-zero in `vol`; rays missing it stay at zero.
pub(crate) fn project_with(
    vol: &Volume3D,
    geom: &ConeBeamGeometry,
    step: f64,
    support: Option<(Vec3, Vec3)>,
) -> Result<Sinogram> {
    check_step(step)?;
    geom.validate()?;
    let nu = geom.nu();
    let nv = geom.nv();
    let mut sino = Sinogram::zeros(geom.clone());
    let Some((lo, hi)) = support else {
        return Ok(sino);
    };
    sino.data_mut()
        .par_chunks_mut(nu)
        .enumerate()
        .for_each(|(row, out)| {
            let view = row / nv;
            let v = row % nv;
            let source = geom.source(view);
            for (u, slot) in out.iter_mut().enumerate() {
                let det = geom.detector_point(view, u as f64, v as f64);
                if clip_segment(lo, hi, source, det).is_none() {
                    continue;
                }
                let lattice = RayLattice::through(vol.grid(), source, det, step);
                let ks = lattice.samples_within(source, lo, hi);
                *slot = lattice.integrate_range(vol, ks);
            }
        });
    Ok(sino)
}

/// World box enclosing every point where trilinear sampling of `vol` can be
/// non-zero, `None` for an all-zero volume.
pub(crate) fn support_box(vol: &Volume3D) -> Option<(Vec3, Vec3)> {
    let g = vol.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, _) in vol.data().iter().enumerate().filter(|(_, v)| **v != 0.0) {
        let c = g.coords(idx);
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
        any = true;
    }
    if !any {
        return None;
    }
    let lo_w = g.voxel_center(lo[0], lo[1], lo[2]);
    let hi_w = g.voxel_center(hi[0], hi[1], hi[2]);
    let pad = Vec3(g.spacing);
    Some((lo_w - pad, hi_w + pad))
}
