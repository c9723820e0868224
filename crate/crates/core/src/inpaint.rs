//! Gradient-domain blending of corrected projections into the original
//! ones over the metal shadow.
//!
//! Inside the shadow region `R` of a view the new values keep the pairwise
//! differences of the corrected data over 8-connected neighbours. Across the
//! seam the outside pixel is fixed to its original value and the pair still
//! follows the corrected difference, so the patch is anchored to the
//! measured data without a step. Every ordered pair inside `R` contributes,
//! hence interior pairs carry twice the weight of seam pairs. The quadratic
//! is minimised exactly by solving its normal equations with conjugate
//! gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cg::conjugate_gradient;
use crate::error::{Error, Result};
use crate::geometry::{MetalShadowMask, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Relative residual target.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

/// One detector image: row-major `[v][u]` with `width = nu`.
#[derive(Debug, Clone, Copy)]
pub struct InpaintProblem<'a> {
    pub width: usize,
    pub height: usize,
    pub original: &'a [f64],
    pub corrected: &'a [f64],
    pub region: &'a [bool],
    pub solver: SolverParams,
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

impl InpaintProblem<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.original.len() != n || self.corrected.len() != n || self.region.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "view {}x{} with {}, {}, {} values",
                self.width,
                self.height,
                self.original.len(),
                self.corrected.len(),
                self.region.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn for_neighbours(&self, idx: usize, mut f: impl FnMut(usize)) {
        let (x, y) = ((idx % self.width) as isize, (idx / self.width) as isize);
        for (dx, dy) in NEIGHBOURS {
            let (nx, ny) = (x + dx, y + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                f(ny as usize * self.width + nx as usize);
            }
        }
    }

    /// Every 8-connected component of the region must touch a pixel
    /// outside it, otherwise the solution is not unique.
    fn check_anchored(&self) -> Result<()> {
        let mut seen = vec![false; self.region.len()];
        for start in 0..self.region.len() {
            if !self.region[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut anchored = false;
            while let Some(i) = stack.pop() {
                self.for_neighbours(i, |j| {
                    if !self.region[j] {
                        anchored = true;
                    } else if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                });
            }
            if !anchored {
                return Err(Error::UnanchoredRegion);
            }
        }
        Ok(())
    }

    /// Value of the quadratic for a full image `x` (outside values ignored
    /// except through the original data).
    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in (0..self.region.len()).filter(|&i| self.region[i]) {
            self.for_neighbours(i, |j| {
                if self.region[j] {
                    let d = (x[i] - x[j]) - (self.corrected[i] - self.corrected[j]);
                    e += d * d;
                } else {
                    let d = (x[i] - self.original[j]) - (self.corrected[i] - self.corrected[j]);
                    e += d * d;
                }
            });
        }
        e
    }
}

/// Solves one view. Pixels outside the region keep their original values.
pub fn inpaint_view(p: &InpaintProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let pixels: Vec<usize> = (0..p.region.len()).filter(|&i| p.region[i]).collect();
    let mut out = p.original.to_vec();
    if pixels.is_empty() {
        return Ok(out);
    }
    p.check_anchored()?;

    let mut slot = vec![usize::MAX; p.region.len()];
    for (k, &i) in pixels.iter().enumerate() {
        slot[i] = k;
    }
    // compressed rows: diagonal, then inner neighbours (off-diagonal −2)
    let mut diag = Vec::with_capacity(pixels.len());
    let mut starts = Vec::with_capacity(pixels.len() + 1);
    let mut cols = Vec::with_capacity(pixels.len() * 8);
    let mut rhs = Vec::with_capacity(pixels.len());
    for &i in &pixels {
        starts.push(cols.len());
        let (mut d, mut b) = (0.0, 0.0);
        p.for_neighbours(i, |j| {
            if p.region[j] {
                d += 2.0;
                b += 2.0 * (p.corrected[i] - p.corrected[j]);
                cols.push(slot[j]);
            } else {
                d += 1.0;
                b += p.original[j] + p.corrected[i] - p.corrected[j];
            }
        });
        diag.push(d);
        rhs.push(b);
    }
    starts.push(cols.len());
    let apply = |x: &[f64], y: &mut [f64]| {
        for k in 0..x.len() {
            let mut s = diag[k] * x[k];
            for &c in &cols[starts[k]..starts[k + 1]] {
                s -= 2.0 * x[c];
            }
            y[k] = s;
        }
    };
    let x0: Vec<f64> = pixels.iter().map(|&i| p.corrected[i]).collect();
    let (x, _) = conjugate_gradient(apply, &rhs, x0, p.solver.tolerance, p.solver.max_iterations)?;
    for (&i, v) in pixels.iter().zip(x) {
        out[i] = v;
    }
    Ok(out)
}

/// Inpaints every view of `orig` whose shadow is non-empty; views are
/// solved independently and in parallel.
pub fn inpaint_sinogram(orig: &Sinogram, corr: &Sinogram, shadow: &MetalShadowMask, solver: SolverParams) -> Result<Sinogram> {
    let geom = orig.geometry();
    corr.ensure_compatible(geom, "corrected sinogram")?;
    shadow.geometry().validate()?;
    orig.ensure_compatible(shadow.geometry(), "shadow mask")?;
    let (nu, nv) = (geom.nu(), geom.nv());
    let view_len = nu * nv;
    let mut out = orig.clone();
    out.data_mut()
        .par_chunks_mut(view_len)
        .enumerate()
        .try_for_each(|(view, dst)| -> Result<()> {
            let region = shadow.view(view);
            if !region.iter().any(|&r| r) {
                return Ok(());
            }
            let problem = InpaintProblem {
                width: nu,
                height: nv,
                original: orig.view(view),
                corrected: corr.view(view),
                region,
                solver,
            };
            dst.copy_from_slice(&inpaint_view(&problem)?);
            Ok(())
        })?;
    Ok(out)
}

/// Largest jump between a shadow pixel of `new` and an 8-connected
/// non-shadow neighbour of `orig`, relative to that view's dynamic range in
/// `orig`. Zero when there is no shadow.
///
/// This includes any genuine edge of the data at the shadow border; see
/// [`seam_excess`] for the part added by the blend itself.
pub fn seam_discontinuity(orig: &Sinogram, new: &Sinogram, shadow: &MetalShadowMask) -> Result<f64> {
    new.ensure_compatible(orig.geometry(), "inpainted sinogram")?;
    worst_seam_pair(orig, shadow, |view, i, j| {
        (new.view(view)[i] - orig.view(view)[j]).abs()
    })
}

/// Like [`seam_discontinuity`], but measures the jump in excess of the
/// guide's own difference across the seam: `|(new_i − orig_j) − (guide_i − guide_j)|`.
pub fn seam_excess(orig: &Sinogram, guide: &Sinogram, new: &Sinogram, shadow: &MetalShadowMask) -> Result<f64> {
    new.ensure_compatible(orig.geometry(), "inpainted sinogram")?;
    guide.ensure_compatible(orig.geometry(), "guide sinogram")?;
    worst_seam_pair(orig, shadow, |view, i, j| {
        let (o, g, n) = (orig.view(view), guide.view(view), new.view(view));
        ((n[i] - o[j]) - (g[i] - g[j])).abs()
    })
}

fn worst_seam_pair(orig: &Sinogram, shadow: &MetalShadowMask, jump: impl Fn(usize, usize, usize) -> f64 + Sync) -> Result<f64> {
    let geom = orig.geometry();
    orig.ensure_compatible(shadow.geometry(), "shadow mask")?;
    let (nu, nv) = (geom.nu(), geom.nv());
    let worst = (0..geom.n_views())
        .into_par_iter()
        .map(|view| {
            let (o, r) = (orig.view(view), shadow.view(view));
            let (lo, hi) = o.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let range = hi - lo;
            if !(range > 0.0) {
                return 0.0;
            }
            let p = InpaintProblem {
                width: nu,
                height: nv,
                original: o,
                corrected: o,
                region: r,
                solver: SolverParams::default(),
            };
            let mut worst = 0.0f64;
            for i in (0..r.len()).filter(|&i| r[i]) {
                p.for_neighbours(i, |j| {
                    if !r[j] {
                        worst = worst.max(jump(view, i, j) / range);
                    }
                });
            }
            worst
        })
        .collect::<Vec<f64>>();
    Ok(worst.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_region(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<bool> {
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                x >= x0 && x < x1 && y >= y0 && y < y1
            })
            .collect()
    }

    fn tight() -> SolverParams {
        SolverParams {
            tolerance: 1e-13,
            max_iterations: 10_000,
        }
    }

    #[test]
    fn identical_data_is_a_fixed_point() {
        let (w, h) = (12, 9);
        let orig: Vec<f64> = (0..w * h).map(|i| (i as f64 * 0.37).sin()).collect();
        let region = block_region(w, h, 3, 8, 2, 6);
        let p = InpaintProblem {
            width: w,
            height: h,
            original: &orig,
            corrected: &orig,
            region: &region,
            solver: tight(),
        };
        let out = inpaint_view(&p).unwrap();
        for (a, b) in out.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn flat_guide_takes_boundary_constant() {
        let (w, h) = (10, 10);
        let region = block_region(w, h, 2, 7, 3, 8);
        let orig: Vec<f64> = (0..w * h).map(|i| if region[i] { 9.0 } else { 2.5 }).collect();
        let corr = vec![-4.0; w * h];
        let p = InpaintProblem {
            width: w,
            height: h,
            original: &orig,
            corrected: &corr,
            region: &region,
            solver: tight(),
        };
        let out = inpaint_view(&p).unwrap();
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn whole_image_region_is_unanchored() {
        let region = vec![true; 16];
        let data = vec![0.0; 16];
        let p = InpaintProblem {
            width: 4,
            height: 4,
            original: &data,
            corrected: &data,
            region: &region,
            solver: SolverParams::default(),
        };
        assert!(matches!(inpaint_view(&p), Err(Error::UnanchoredRegion)));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let (w, h) = (20, 20);
        let region = block_region(w, h, 1, 19, 1, 19);
        let orig: Vec<f64> = (0..w * h).map(|i| (i % 7) as f64).collect();
        let corr: Vec<f64> = (0..w * h).map(|i| (i % 5) as f64 * 3.0).collect();
        let p = InpaintProblem {
            width: w,
            height: h,
            original: &orig,
            corrected: &corr,
            region: &region,
            solver: SolverParams {
                tolerance: 1e-12,
                max_iterations: 3,
            },
        };
        assert!(matches!(inpaint_view(&p), Err(Error::NotConverged { iterations: 3, .. })));
    }

    #[test]
    fn beats_naive_paste_and_shifts_with_offset() {
        let (w, h) = (16, 12);
        let region = block_region(w, h, 4, 11, 2, 9);
        let orig: Vec<f64> = (0..w * h).map(|i| ((i * 7919) % 101) as f64 / 50.0).collect();
        let corr: Vec<f64> = (0..w * h).map(|i| ((i * 104729) % 89) as f64 / 30.0).collect();
        let p = InpaintProblem {
            width: w,
            height: h,
            original: &orig,
            corrected: &corr,
            region: &region,
            solver: tight(),
        };
        let out = inpaint_view(&p).unwrap();
        let paste: Vec<f64> = (0..w * h).map(|i| if region[i] { corr[i] } else { orig[i] }).collect();
        assert!(p.objective(&out) <= p.objective(&paste));

        let orig_k: Vec<f64> = orig.iter().map(|v| v + 3.25).collect();
        let corr_k: Vec<f64> = corr.iter().map(|v| v + 3.25).collect();
        let shifted = inpaint_view(&InpaintProblem {
            original: &orig_k,
            corrected: &corr_k,
            ..p
        })
        .unwrap();
        for (a, b) in shifted.iter().zip(&out) {
            assert!((a - b - 3.25).abs() < 1e-9);
        }
    }
}
