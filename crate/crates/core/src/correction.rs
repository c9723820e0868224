//! Per-ray correction of reprojected profiles under the metal shadow.
//!
//! Along each shadowed ray three profiles are sampled on one lattice: the
//! uncorrected reconstruction ("noisy"), the aligned prior ("clean") and the
//! metal-only volume. Metal samples blend the metal value with the prior by
//! partial-volume fraction; other samples trust the prior more the closer
//! they are to metal. The corrected profile is integrated back into a
//! detector value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{MetalShadowMask, Sinogram};
use crate::projector::{check_step, integrate_profile, RayLattice, RayProfile};
use crate::volume::Volume3D;

/// Metal samples are those above this fraction of ρ.
pub const METAL_MEMBERSHIP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionParams {
    /// Attenuation of the implant material (mm⁻¹).
    pub rho: f64,
    /// Decay length of the prior weight away from metal (mm).
    pub h: f64,
    /// Prior weight right next to metal, in (0, 1].
    pub prior_trust: f64,
}

impl CorrectionParams {
    pub fn new(rho: f64) -> Self {
        CorrectionParams {
            rho,
            h: 10.0,
            prior_trust: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho", format!("{} must be > 0", self.rho)));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::invalid("h", format!("{} must be > 0", self.h)));
        }
        if !(self.prior_trust > 0.0 && self.prior_trust <= 1.0) {
            return Err(Error::invalid("prior_trust", format!("{} must lie in (0, 1]", self.prior_trust)));
        }
        Ok(())
    }

    /// Prior weight at distance `dt` from metal.
    #[inline]
    pub fn weight(&self, dt: f64) -> f64 {
        self.prior_trust * (-dt / self.h).exp()
    }
}

/// `ω·α + (1−ω)·β`.
#[inline]
pub fn lerp(alpha: f64, beta: f64, omega: f64) -> f64 {
    omega * alpha + (1.0 - omega) * beta
}

/// Distance (mm: index distance times `step`) from each sample to the
/// nearest flagged sample; `+∞` everywhere when nothing is flagged.
pub fn distance_transform_1d(flags: &[bool], step: f64) -> Vec<f64> {
    let n = flags.len();
    let mut d = vec![f64::INFINITY; n];
    let mut last: Option<usize> = None;
    for i in 0..n {
        if flags[i] {
            last = Some(i);
        }
        if let Some(j) = last {
            d[i] = (i - j) as f64 * step;
        }
    }
    let mut next: Option<usize> = None;
    for i in (0..n).rev() {
        if flags[i] {
            next = Some(i);
        }
        if let Some(j) = next {
            d[i] = d[i].min((j - i) as f64 * step);
        }
    }
    d
}

/// The three profiles of one ray plus the distance of every sample to metal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBundle {
    pub noisy: RayProfile,
    pub clean: RayProfile,
    pub metal: RayProfile,
    /// Metal membership per sample.
    pub is_metal: Vec<bool>,
    pub dt: Vec<f64>,
}

impl ProfileBundle {
    pub fn new(noisy: RayProfile, clean: RayProfile, metal: RayProfile, rho: f64) -> Result<Self> {
        let n = noisy.len();
        if clean.len() != n || metal.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "profile lengths {n}, {}, {}",
                clean.len(),
                metal.len()
            )));
        }
        if clean.step != noisy.step || metal.step != noisy.step {
            return Err(Error::invalid("profiles", "sample steps differ"));
        }
        let is_metal: Vec<bool> = metal.samples.iter().map(|&m| m > METAL_MEMBERSHIP * rho).collect();
        let dt = distance_transform_1d(&is_metal, noisy.step);
        Ok(ProfileBundle {
            noisy,
            clean,
            metal,
            is_metal,
            dt,
        })
    }

    /// Samples all three volumes on `lattice`.
    pub fn sample(lattice: &RayLattice, unc: &Volume3D, prior: &Volume3D, metal: &Volume3D, rho: f64) -> Result<Self> {
        Self::new(lattice.sample(unc), lattice.sample(prior), lattice.sample(metal), rho)
    }
}

/// Corrected profile, sample by sample:
/// metal: `lerp(ρ, clean, m/ρ)` with `m` clamped to `[0, ρ]`;
/// elsewhere: `lerp(clean, noisy, c·exp(−dt/h))`.
pub fn correct_profile(b: &ProfileBundle, p: &CorrectionParams) -> RayProfile {
    let samples = (0..b.noisy.len())
        .map(|i| {
            let clean = b.clean.samples[i];
            if b.is_metal[i] {
                let m = b.metal.samples[i].clamp(0.0, p.rho);
                lerp(p.rho, clean, m / p.rho)
            } else {
                lerp(clean, b.noisy.samples[i], p.weight(b.dt[i]))
            }
        })
        .collect();
    RayProfile {
        samples,
        ..b.noisy.clone()
    }
}

/// Replaces every shadowed detector value of `original` by the integral of
/// its corrected profile; other values are copied unchanged.
pub fn build_corrected_sinogram(
    original: &Sinogram,
    unc: &Volume3D,
    prior_aligned: &Volume3D,
    metal: &Volume3D,
    shadow: &MetalShadowMask,
    step: f64,
    p: &CorrectionParams,
) -> Result<Sinogram> {
    correct_pixels(original, unc, prior_aligned, metal, shadow, shadow.data(), step, p)
}

/// Like [`build_corrected_sinogram`], but also corrects the ring of
/// 8-neighbours around the shadow in each view. The inpainting guide needs a
/// corrected value on both sides of the seam; with the measured value on the
/// outside, the guide difference across the seam would carry the full metal
/// step.
pub fn build_inpainting_guide(
    original: &Sinogram,
    unc: &Volume3D,
    prior_aligned: &Volume3D,
    metal: &Volume3D,
    shadow: &MetalShadowMask,
    step: f64,
    p: &CorrectionParams,
) -> Result<Sinogram> {
    let geom = shadow.geometry();
    let targets = with_ring(shadow.data(), geom.nu(), geom.nv());
    correct_pixels(original, unc, prior_aligned, metal, shadow, &targets, step, p)
}

#[allow(clippy::too_many_arguments)]
fn correct_pixels(
    original: &Sinogram,
    unc: &Volume3D,
    prior_aligned: &Volume3D,
    metal: &Volume3D,
    shadow: &MetalShadowMask,
    targets: &[bool],
    step: f64,
    p: &CorrectionParams,
) -> Result<Sinogram> {
    p.validate()?;
    check_step(step)?;
    let geom = original.geometry();
    shadow.geometry().validate()?;
    original.ensure_compatible(shadow.geometry(), "shadow mask")?;
    unc.grid().ensure_same(prior_aligned.grid(), "aligned prior")?;
    unc.grid().ensure_same(metal.grid(), "metal volume")?;

    let nu = geom.nu();
    let nv = geom.nv();
    let mut out = original.clone();
    out.data_mut()
        .par_chunks_mut(nu)
        .zip(targets.par_chunks(nu))
        .enumerate()
        .for_each(|(row, (values, flags))| {
            if !flags.iter().any(|&f| f) {
                return;
            }
            let view = row / nv;
            let v = row % nv;
            let source = geom.source(view);
            for (u, (slot, _)) in values.iter_mut().zip(flags).enumerate().filter(|(_, (_, &f))| f) {
                let det = geom.detector_point(view, u as f64, v as f64);
                let lattice = RayLattice::through(unc.grid(), source, det, step);
                let bundle = ProfileBundle::sample(&lattice, unc, prior_aligned, metal, p.rho)
                    .expect("profiles share one lattice");
                *slot = integrate_profile(&correct_profile(&bundle, p));
            }
        });
    Ok(out)
}

/// `mask` plus every pixel 8-adjacent to it within the same view.
fn with_ring(mask: &[bool], nu: usize, nv: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for (view, src) in mask.chunks(nu * nv).enumerate() {
        let dst = &mut out[view * nu * nv..(view + 1) * nu * nv];
        for (i, _) in src.iter().enumerate().filter(|(_, &m)| m) {
            let (u, v) = (i % nu, i / nu);
            for vv in v.saturating_sub(1)..=(v + 1).min(nv - 1) {
                for uu in u.saturating_sub(1)..=(u + 1).min(nu - 1) {
                    dst[vv * nu + uu] = true;
                }
            }
        }
    }
    out
}
