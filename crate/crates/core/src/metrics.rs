//! Image-quality measures against a ground-truth volume.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, Volume3D};

/// Root mean squared difference over the voxels selected by `mask`.
pub fn rmse_masked(a: &Volume3D, b: &Volume3D, mask: &BinaryMask3D) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "second volume")?;
    a.grid().ensure_same(mask.grid(), "mask")?;
    let (sum, n) = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), ((x, y), _)| (s + (x - y) * (x - y), n + 1));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

/// Sørensen–Dice overlap; two empty masks count as identical.
pub fn dice(a: &BinaryMask3D, b: &BinaryMask3D) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "second mask")?;
    let both = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * both as f64 / total as f64 })
}

/// Squared distance transform of one line, `d[p] = min_q f[q] + s²(p−q)²`,
/// by the lower envelope of parabolas. Infinite entries are skipped.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = s * s;
    let inter = |q: usize, p: usize| {
        let (q, p) = (q as f64, p as f64);
        ((f[q as usize] / s2 + q * q) - (f[p as usize] / s2 + p * p)) / (2.0 * (q - p))
    };
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        while let Some(&p) = v.last() {
            let x = inter(q, p);
            if x <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        let x = v.last().map_or(f64::NEG_INFINITY, |&p| inter(q, p));
        v.push(q);
        z.push(x);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = f[v[k]] + s2 * d * d;
    }
}

/// Exact Euclidean distance (mm) from every voxel centre to the nearest
/// mask voxel centre, honouring anisotropic spacing. An empty mask yields
/// `+∞` everywhere.
pub fn euclidean_dt_3d(mask: &BinaryMask3D) -> Volume3D {
    let g = *mask.grid();
    let [nx, ny, nz] = g.dims;
    let mut d: Vec<f64> = mask.data().iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();

    // x then y within each z slab
    d.par_chunks_mut(nx * ny).for_each(|slab| {
        let (mut v, mut z) = (Vec::new(), Vec::new());
        let mut line = vec![0.0; nx.max(ny)];
        let mut out = vec![0.0; nx.max(ny)];
        for j in 0..ny {
            let row = &mut slab[j * nx..(j + 1) * nx];
            line[..nx].copy_from_slice(row);
            edt_line(&line[..nx], g.spacing[0], &mut out[..nx], &mut v, &mut z);
            row.copy_from_slice(&out[..nx]);
        }
        for i in 0..nx {
            for j in 0..ny {
                line[j] = slab[j * nx + i];
            }
            edt_line(&line[..ny], g.spacing[1], &mut out[..ny], &mut v, &mut z);
            for j in 0..ny {
                slab[j * nx + i] = out[j];
            }
        }
    });

    // z columns, gathered per y row and scattered afterwards
    let plane = nx * ny;
    let columns: Vec<Vec<f64>> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let (mut v, mut z) = (Vec::new(), Vec::new());
            let mut line = vec![0.0; nz];
            let mut res = vec![0.0; nx * nz];
            for i in 0..nx {
                for k in 0..nz {
                    line[k] = d[k * plane + j * nx + i];
                }
                edt_line(&line, g.spacing[2], &mut res[i * nz..(i + 1) * nz], &mut v, &mut z);
            }
            res
        })
        .collect();
    for (j, res) in columns.into_iter().enumerate() {
        for i in 0..nx {
            for k in 0..nz {
                d[k * plane + j * nx + i] = res[i * nz + k].sqrt();
            }
        }
    }
    Volume3D { grid: g, data: d }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactBandSpec {
    /// Distance from metal (mm) that still counts as the band.
    pub radius: f64,
}

impl Default for ArtifactBandSpec {
    fn default() -> Self {
        ArtifactBandSpec { radius: 20.0 }
    }
}

/// Non-metal voxels within `radius` of metal.
pub fn artifact_band(metal: &BinaryMask3D, spec: &ArtifactBandSpec) -> Result<BinaryMask3D> {
    if !(spec.radius > 0.0) {
        return Err(Error::invalid("band radius", format!("{} must be > 0", spec.radius)));
    }
    let dt = euclidean_dt_3d(metal);
    BinaryMask3D::new(
        *metal.grid(),
        dt.data()
            .iter()
            .zip(metal.data())
            .map(|(&d, &m)| !m && d <= spec.radius)
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse_full: f64,
    pub rmse_band: f64,
    pub rmse_outside_band: f64,
    pub band_voxels: usize,
    pub metal_voxels: usize,
    pub metal_dice: Option<f64>,
}

impl EvaluationReport {
    /// Compares `recon` with `truth`. The band is built around `metal`;
    /// metal voxels themselves are excluded from every RMSE.
    pub fn compute(
        recon: &Volume3D,
        truth: &Volume3D,
        metal: &BinaryMask3D,
        band: &ArtifactBandSpec,
        segmented: Option<&BinaryMask3D>,
    ) -> Result<Self> {
        let band_mask = artifact_band(metal, band)?;
        let non_metal = metal.not();
        let outside = non_metal.and_not(&band_mask);
        Ok(EvaluationReport {
            rmse_full: rmse_masked(recon, truth, &non_metal)?,
            rmse_band: rmse_masked(recon, truth, &band_mask)?,
            rmse_outside_band: rmse_masked(recon, truth, &outside)?,
            band_voxels: band_mask.count(),
            metal_voxels: metal.count(),
            metal_dice: segmented.map(|s| dice(s, metal)).transpose()?,
        })
    }

    /// `key: value` lines with stable key names.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rmse_full: {:.9e}", self.rmse_full);
        let _ = writeln!(s, "rmse_band: {:.9e}", self.rmse_band);
        let _ = writeln!(s, "rmse_outside_band: {:.9e}", self.rmse_outside_band);
        let _ = writeln!(s, "band_voxels: {}", self.band_voxels);
        let _ = writeln!(s, "metal_voxels: {}", self.metal_voxels);
        if let Some(d) = self.metal_dice {
            let _ = writeln!(s, "metal_dice: {d:.6}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;
    use proptest::prelude::*;

    fn brute_dt(mask: &BinaryMask3D) -> Vec<f64> {
        let g = mask.grid();
        let trues: Vec<_> = (0..g.len()).filter(|&i| mask.data()[i]).map(|i| g.coords(i)).collect();
        (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                trues
                    .iter()
                    .map(|t| {
                        (0..3)
                            .map(|a| ((c[a] as f64 - t[a] as f64) * g.spacing[a]).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn rmse_basics() {
        let g = Grid::centered([4, 4, 4], [1.0; 3]).unwrap();
        let a = Volume3D::from_fn(g, |p| p.x() * p.y());
        let all = BinaryMask3D::from_fn(g, |_| true);
        assert_eq!(rmse_masked(&a, &a, &all).unwrap(), 0.0);
        let b = a.map(|v| v - 0.25);
        assert!((rmse_masked(&a, &b, &all).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(rmse_masked(&a, &b, &BinaryMask3D::empty(g)), Err(Error::EmptyMask)));
    }

    #[test]
    fn rmse_direct_formula() {
        let g = Grid::centered([7, 5, 3], [1.0; 3]).unwrap();
        let a = Volume3D::from_fn(g, |p| (p.x() * 1.7 + p.z()).sin());
        let b = Volume3D::from_fn(g, |p| (p.y() * 0.3 - p.x()).cos());
        let m = BinaryMask3D::from_fn(g, |p| p.x() + p.y() > -1.0);
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..g.len() {
            if m.data()[i] {
                s += (a.data()[i] - b.data()[i]).powi(2);
                n += 1.0;
            }
        }
        let r = rmse_masked(&a, &b, &m).unwrap();
        assert!((r - (s / n as f64).sqrt()).abs() < 1e-12);
        assert_eq!(r, rmse_masked(&b, &a, &m).unwrap());
    }

    #[test]
    fn dt_single_voxel_anisotropic() {
        let g = Grid::centered([5, 5, 5], [0.415, 0.415, 0.83]).unwrap();
        let m = BinaryMask3D::from_fn(g, |p| p.norm() < 1e-9);
        let d = euclidean_dt_3d(&m);
        assert_eq!(d.get(2, 2, 2), 0.0);
        assert!((d.get(3, 2, 2) - 0.415).abs() < 1e-12);
        assert!((d.get(2, 2, 3) - 0.83).abs() < 1e-12);
    }

    #[test]
    fn dt_full_and_empty() {
        let g = Grid::centered([3, 4, 5], [1.0; 3]).unwrap();
        assert!(euclidean_dt_3d(&BinaryMask3D::from_fn(g, |_| true)).data().iter().all(|&d| d == 0.0));
        assert!(euclidean_dt_3d(&BinaryMask3D::empty(g)).data().iter().all(|d| d.is_infinite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn dt_matches_brute_force(bits in proptest::collection::vec(proptest::bool::weighted(0.05), 16 * 16 * 16),
                                  sx in 0.3f64..2.0, sz in 0.3f64..2.0) {
            let g = Grid::centered([16, 16, 16], [sx, 1.0, sz]).unwrap();
            let m = BinaryMask3D::new(g, bits).unwrap();
            let fast = euclidean_dt_3d(&m);
            let brute = brute_dt(&m);
            for (a, b) in fast.data().iter().zip(&brute) {
                prop_assert!(a == b || (a - b).abs() <= 1e-9 * b.max(1.0));
            }
            // 1-Lipschitz along each axis
            for k in 0..16 {
                for j in 0..16 {
                    for i in 0..15 {
                        let (a, b) = (fast.get(i, j, k), fast.get(i + 1, j, k));
                        if a.is_finite() {
                            prop_assert!((a - b).abs() <= sx + 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn band_and_report() {
        let g = Grid::centered([21, 21, 3], [1.0; 3]).unwrap();
        let metal = BinaryMask3D::from_fn(g, |p| p.x().abs() < 0.5 && p.y().abs() < 0.5);
        let band = artifact_band(&metal, &ArtifactBandSpec { radius: 3.0 }).unwrap();
        assert!(!band.get(10, 10, 1));
        assert!(band.get(13, 10, 1));
        assert!(!band.get(14, 10, 1));
        assert!(band.get(12, 12, 1));
        assert!(artifact_band(&metal, &ArtifactBandSpec { radius: 0.0 }).is_err());

        let truth = Volume3D::zeros(g);
        let recon = Volume3D::from_fn(g, |p| if p.x().abs() < 2.5 { 1.0 } else { 0.0 });
        let r = EvaluationReport::compute(&recon, &truth, &metal, &ArtifactBandSpec { radius: 3.0 }, Some(&metal)).unwrap();
        assert_eq!(r.metal_dice, Some(1.0));
        assert!(r.rmse_band > r.rmse_outside_band);
        let text = r.to_text();
        assert!(text.starts_with("rmse_full: "));
        assert!(text.contains("metal_dice: 1.000000"));
    }
}
