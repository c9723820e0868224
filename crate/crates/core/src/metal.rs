//! Metal segmentation, the metal-only volume and per-view metal shadows.

use serde::{Deserialize, Serialize};

use crate::dbscan::dbscan;
use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, MetalShadowMask};
use crate::projector::{project_with, support_box};
use crate::registration::{bht_split, quantile, BONE_HISTOGRAM_QUANTILE};
use crate::volume::{BinaryMask3D, Grid, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    /// Neighbourhood radius in mm.
    pub eps: f64,
    pub min_pts: usize,
}

impl DbscanParams {
    /// Two voxels of the coarsest axis, ten points.
    pub fn for_grid(grid: &Grid) -> Self {
        DbscanParams {
            eps: 2.0 * grid.max_spacing(),
            min_pts: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("dbscan eps", format!("{} must be > 0", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::invalid("dbscan min_pts", "must be >= 1"));
        }
        Ok(())
    }
}

/// Clusters smaller than this are discarded after DBSCAN.
pub const MIN_CLUSTER_VOXELS: usize = 20;

/// Metal candidates must also exceed this multiple of the median dense
/// (bone) value, so that a metal-free scan does not split bone in two.
pub const MIN_METAL_CONTRAST: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MetalSegmentation {
    pub mask: BinaryMask3D,
    pub clusters: usize,
    /// Split between soft tissue and dense material.
    pub dense_threshold: f64,
    /// Split between bone and metal among dense voxels (never below the
    /// contrast floor).
    pub metal_threshold: f64,
}

/// Two-level balanced histogram thresholding followed by DBSCAN cleanup.
pub fn segment_metal(vol: &Volume3D, p: &DbscanParams) -> Result<MetalSegmentation> {
    p.validate()?;
    let no_metal = |e: Error| match e {
        Error::ConstantVolume(_) | Error::EmptyHistogram => Error::NoMetalFound,
        e => e,
    };
    let values = vol.data();
    let dense_threshold = bht_split(values, Some(BONE_HISTOGRAM_QUANTILE)).map_err(no_metal)?;
    let dense: Vec<f64> = values.iter().copied().filter(|&v| v > dense_threshold).collect();
    let metal_threshold = bht_split(&dense, None)
        .map_err(no_metal)?
        .max(MIN_METAL_CONTRAST * quantile(&dense, 0.5));

    let g = vol.grid();
    let candidates: Vec<usize> = (0..values.len()).filter(|&i| values[i] > metal_threshold).collect();
    if candidates.is_empty() {
        return Err(Error::NoMetalFound);
    }
    let points: Vec<[f64; 3]> = candidates
        .iter()
        .map(|&i| {
            let [a, b, c] = g.coords(i);
            g.voxel_center(a, b, c).0
        })
        .collect();
    let labels = dbscan(&points, p.eps, p.min_pts);
    let n_labels = labels.iter().flatten().map(|&l| l + 1).max().unwrap_or(0);
    let mut sizes = vec![0usize; n_labels];
    for l in labels.iter().flatten() {
        sizes[*l] += 1;
    }
    let mut mask = BinaryMask3D::empty(*g);
    for (&i, l) in candidates.iter().zip(&labels) {
        if let Some(l) = l {
            if sizes[*l] >= MIN_CLUSTER_VOXELS {
                mask.data_mut()[i] = true;
            }
        }
    }
    let clusters = sizes.iter().filter(|&&s| s >= MIN_CLUSTER_VOXELS).count();
    if clusters == 0 {
        return Err(Error::NoMetalFound);
    }
    Ok(MetalSegmentation {
        mask,
        clusters,
        dense_threshold,
        metal_threshold,
    })
}

/// Checks a segmentation against a known number of implants.
pub fn check_cluster_count(seg: &MetalSegmentation, expected: usize) -> Result<()> {
    if seg.clusters == expected {
        Ok(())
    } else {
        Err(Error::invalid(
            "metal clusters",
            format!("found {} objects, expected {expected}", seg.clusters),
        ))
    }
}

/// Attenuation assigned to metal voxels: the mean of `vol` over the metal
/// mask, at least 1.5 × the mean over the remaining dense voxels (bone).
pub fn default_rho(vol: &Volume3D, seg: &MetalSegmentation) -> Result<f64> {
    vol.grid().ensure_same(seg.mask.grid(), "metal mask")?;
    let mean = |pred: &dyn Fn(usize) -> bool| {
        let (s, n) = (0..vol.data().len())
            .filter(|&i| pred(i))
            .fold((0.0, 0usize), |(s, n), i| (s + vol.data()[i], n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let metal = mean(&|i| seg.mask.data()[i]).ok_or(Error::EmptyMask)?;
    let bone = mean(&|i| !seg.mask.data()[i] && vol.data()[i] > seg.dense_threshold).unwrap_or(0.0);
    Ok(metal.max(1.5 * bone))
}

/// `rho` inside the mask, zero elsewhere.
pub fn metal_only_volume(grid: &Grid, mask: &BinaryMask3D, rho: f64) -> Result<Volume3D> {
    grid.ensure_same(mask.grid(), "metal mask")?;
    if !rho.is_finite() {
        return Err(Error::invalid("rho", "must be finite"));
    }
    Volume3D::new(*grid, mask.data().iter().map(|&m| if m { rho } else { 0.0 }).collect())
}

/// Detector pixels whose ray crosses metal: the projection of the
/// metal-only volume exceeds half of one pure-metal sample (`0.5·ρ·step`,
/// with ρ the volume's maximum).
pub fn metal_shadow(metal: &Volume3D, geom: &ConeBeamGeometry, step: f64) -> Result<MetalShadowMask> {
    let rho = metal.min_max().1;
    shadow_with_threshold(metal, geom, step, 0.5 * rho * step)
}

/// Shadow with an explicit projection threshold.
pub fn shadow_with_threshold(metal: &Volume3D, geom: &ConeBeamGeometry, step: f64, eps: f64) -> Result<MetalShadowMask> {
    let Some(cull) = support_box(metal) else {
        geom.validate()?;
        return Ok(MetalShadowMask::empty(geom.clone()));
    };
    let proj = project_with(metal, geom, step, Some(cull))?;
    MetalShadowMask::new(geom.clone(), proj.data().iter().map(|&p| p > eps).collect())
}
