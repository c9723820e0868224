//! Rigid alignment of the prior scan to the uncorrected scan.
//!
//! Both volumes are reduced to their bone structures with balanced histogram
//! thresholding, then a penalised L1 mismatch between the bone-only volumes
//! is minimised over six rigid parameters by a particle swarm with periodic
//! randomisation and crossover, followed by a local pattern search.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transform::{nearest_index, RigidTransform};
use crate::volume::{BinaryMask3D, Volume3D};

pub const HISTOGRAM_BINS: usize = 256;

/// Default search half-widths: translation in mm, rotation in degrees.
pub const MAX_TRANSLATION: f64 = 30.0;
pub const MAX_ROTATION_DEG: f64 = 15.0;

/// Upper quantile used as the histogram ceiling for bone extraction; values
/// above it saturate in the last bin.
pub const BONE_HISTOGRAM_QUANTILE: f64 = 0.995;

/// Balanced histogram thresholding.
///
/// Starting from the first and last occupied bins with the centre at their
/// midpoint, the heavier side (left `[start, centre)`, right
/// `[centre, end]`) loses its outermost bin and the centre follows the
/// midpoint; equal weights trim the right side. Trimming stops when the
/// window closes or holds no mass, and the final centre is returned.
pub fn bht_threshold(hist: &[u64]) -> Result<usize> {
    let (Some(mut start), Some(mut end)) = (hist.iter().position(|&c| c > 0), hist.iter().rposition(|&c| c > 0))
    else {
        return Err(Error::EmptyHistogram);
    };
    let mut centre = (start + end) / 2;
    let mut left: u64 = hist[start..centre].iter().sum();
    let mut right: u64 = hist[centre..=end].iter().sum();
    while start < end && (left > 0 || right > 0) {
        if left > right {
            left -= hist[start];
            start += 1;
        } else {
            right -= hist[end];
            end -= 1;
        }
        let next = (start + end) / 2;
        if next < centre {
            left -= hist[next];
            right += hist[next];
        } else if next > centre {
            left += hist[centre];
            right -= hist[centre];
        }
        centre = next;
    }
    Ok(centre)
}

/// Histogram of `values` over `[lo, hi]`, values beyond the range saturate
/// in the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        h[bin_of(v, bins, lo, hi)] += 1;
    }
    h
}

#[inline]
fn bin_of(v: f64, bins: usize, lo: f64, hi: f64) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    if t < 0.0 {
        0
    } else {
        (t as usize).min(bins - 1)
    }
}

pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let k = ((v.len() - 1) as f64 * q).round() as usize;
    let (_, x, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *x
}

/// Two-class split of `values`: the smallest value that lands above the
/// balanced-histogram threshold. Returns the threshold in value units
/// (voxels strictly greater belong to the dense class).
pub fn bht_split(values: &[f64], ceiling_quantile: Option<f64>) -> Result<f64> {
    let (lo, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        return Err(Error::EmptyHistogram);
    }
    if !(max > lo) {
        return Err(Error::ConstantVolume(lo));
    }
    let hi = match ceiling_quantile {
        Some(q) => {
            let c = quantile(values, q);
            if c > lo {
                c
            } else {
                max
            }
        }
        None => max,
    };
    let t = bht_threshold(&histogram(values, HISTOGRAM_BINS, lo, hi))?;
    // upper edge of the threshold bin
    Ok(lo + (t + 1) as f64 / HISTOGRAM_BINS as f64 * (hi - lo))
}

/// Voxels above the balanced-histogram threshold of `vol`.
pub fn extract_bone_mask(vol: &Volume3D) -> Result<BinaryMask3D> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        return Err(Error::ConstantVolume(lo));
    }
    let values = vol.data();
    let top = {
        let c = quantile(values, BONE_HISTOGRAM_QUANTILE);
        if c > lo {
            c
        } else {
            hi
        }
    };
    let t = bht_threshold(&histogram(values, HISTOGRAM_BINS, lo, top))?;
    Ok(BinaryMask3D::new(
        *vol.grid(),
        values.iter().map(|&v| bin_of(v, HISTOGRAM_BINS, lo, top) > t).collect(),
    )
    .expect("mask matches volume grid"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    /// Weight (≥ 1) on voxels whose bone-mask membership disagrees.
    pub penalty_factor: f64,
    /// Evaluate every `stride`-th voxel along each axis.
    pub stride: usize,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        ObjectiveParams {
            penalty_factor: 2.0,
            stride: 2,
        }
    }
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_factor >= 1.0 && self.penalty_factor.is_finite()) {
            return Err(Error::invalid("penalty factor", format!("{} must be >= 1", self.penalty_factor)));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride", "must be >= 1"));
        }
        Ok(())
    }
}

/// Penalised L1 mismatch between a fixed volume and a rigidly moved one.
///
/// `Σ_i p_i · |fixed_i − T_θ(moving)_i|` over the fixed grid (sampled with
/// the stride), with `p_i = 1` when both voxels agree on mask membership and
/// `penalty_factor` otherwise. The moving mask follows θ by nearest
/// neighbour, the moving volume by trilinear interpolation; the pivot is the
/// fixed grid's centre.
#[derive(Debug, Clone)]
pub struct RegistrationObjective<'a> {
    fixed: &'a Volume3D,
    fixed_mask: &'a BinaryMask3D,
    moving: &'a Volume3D,
    moving_mask: &'a BinaryMask3D,
    params: ObjectiveParams,
    fixed_box: Option<([usize; 3], [usize; 3])>,
    moving_box: Option<([f64; 3], [f64; 3])>,
}

fn support(vol: &Volume3D, mask: &BinaryMask3D) -> Option<([usize; 3], [usize; 3])> {
    let g = vol.grid();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, (&v, &m)) in vol.data().iter().zip(mask.data()).enumerate() {
        if v != 0.0 || m {
            let c = g.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
            any = true;
        }
    }
    any.then_some((lo, hi))
}

impl<'a> RegistrationObjective<'a> {
    pub fn new(
        fixed: &'a Volume3D,
        fixed_mask: &'a BinaryMask3D,
        moving: &'a Volume3D,
        moving_mask: &'a BinaryMask3D,
        params: ObjectiveParams,
    ) -> Result<Self> {
        params.validate()?;
        fixed.grid().ensure_same(fixed_mask.grid(), "fixed mask")?;
        moving.grid().ensure_same(moving_mask.grid(), "moving mask")?;
        // Outside these boxes both volumes are zero and both masks false,
        // so skipping them leaves the sum unchanged.
        let moving_box = support(moving, moving_mask).map(|(lo, hi)| {
            (
                lo.map(|x| x as f64 - 1.0),
                hi.map(|x| x as f64 + 1.0),
            )
        });
        Ok(RegistrationObjective {
            fixed,
            fixed_mask,
            moving,
            moving_mask,
            params,
            fixed_box: support(fixed, fixed_mask),
            moving_box,
        })
    }

    pub fn with_stride(&self, stride: usize) -> Self {
        let mut o = self.clone();
        o.params.stride = stride.max(1);
        o
    }

    pub fn params(&self) -> ObjectiveParams {
        self.params
    }

    pub fn evaluate(&self, theta: &RigidTransform) -> f64 {
        let fg = self.fixed.grid();
        let mg = self.moving.grid();
        let centre = fg.world_center();
        let pull = theta.inverse().index_affine(fg, mg, centre);
        let stride = self.params.stride;

        let mut boxes: Vec<([usize; 3], [usize; 3])> = Vec::with_capacity(2);
        if let Some(b) = self.fixed_box {
            boxes.push(b);
        }
        if let Some((lo, hi)) = self.moving_box {
            let push = theta.index_affine(mg, fg, centre);
            let mut blo = [f64::INFINITY; 3];
            let mut bhi = [f64::NEG_INFINITY; 3];
            for corner in 0..8 {
                let c = [0, 1, 2].map(|a| if corner >> a & 1 == 0 { lo[a] } else { hi[a] });
                let p = push.apply(c[0], c[1], c[2]);
                for a in 0..3 {
                    blo[a] = blo[a].min(p[a]);
                    bhi[a] = bhi[a].max(p[a]);
                }
            }
            let clamp_lo = |a: usize| blo[a].floor().max(0.0) as usize;
            let clamp_hi = |a: usize| (bhi[a].ceil().min((fg.dims[a] - 1) as f64)).max(-1.0);
            if (0..3).all(|a| clamp_hi(a) >= 0.0 && (clamp_lo(a) as f64) <= clamp_hi(a)) {
                boxes.push(([0, 1, 2].map(clamp_lo), [0, 1, 2].map(|a| clamp_hi(a) as usize)));
            }
        }

        let c = self.params.penalty_factor;
        let fixed = self.fixed.data();
        let fmask = self.fixed_mask.data();
        let first = boxes.first().copied();
        let mut total = 0.0;
        for (n, &(lo, hi)) in boxes.iter().enumerate() {
            let start = lo.map(|x| x.div_ceil(stride) * stride);
            for k in (start[2]..=hi[2]).step_by(stride) {
                for j in (start[1]..=hi[1]).step_by(stride) {
                    for i in (start[0]..=hi[0]).step_by(stride) {
                        if n == 1 {
                            if let Some((flo, fhi)) = first {
                                let inside = [i, j, k].iter().enumerate().all(|(a, &x)| x >= flo[a] && x <= fhi[a]);
                                if inside {
                                    continue;
                                }
                            }
                        }
                        let idx = fg.index(i, j, k);
                        let f = pull.apply(i as f64, j as f64, k as f64);
                        let moved = self.moving.sample_index(f[0], f[1], f[2]);
                        let moved_bone = nearest_index(mg, f).is_some_and(|[a, b, cc]| self.moving_mask.get(a, b, cc));
                        let w = if fmask[idx] == moved_bone { 1.0 } else { c };
                        total += w * (fixed[idx] - moved).abs();
                    }
                }
            }
        }
        total
    }
}

/// Plain form of the objective for callers holding volumes and masks.
pub fn objective(
    theta: &RigidTransform,
    f_unc: &Volume3D,
    unc_mask: &BinaryMask3D,
    f_pri: &Volume3D,
    pri_mask: &BinaryMask3D,
    params: ObjectiveParams,
) -> Result<f64> {
    Ok(RegistrationObjective::new(f_unc, unc_mask, f_pri, pri_mask, params)?.evaluate(theta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmConfig {
    pub n_particles: usize,
    pub n_generations: usize,
    /// Lower bounds `[tx, ty, tz, rx, ry, rz]` (mm, rad).
    pub lower: [f64; 6],
    pub upper: [f64; 6],
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        let r = MAX_ROTATION_DEG.to_radians();
        SwarmConfig {
            n_particles: 64,
            n_generations: 300,
            lower: [-MAX_TRANSLATION, -MAX_TRANSLATION, -MAX_TRANSLATION, -r, -r, -r],
            upper: [MAX_TRANSLATION, MAX_TRANSLATION, MAX_TRANSLATION, r, r, r],
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            seed: 0,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 10 || self.n_particles % 2 != 0 {
            return Err(Error::invalid(
                "swarm",
                format!("{} particles; need an even count >= 10", self.n_particles),
            ));
        }
        for d in 0..6 {
            if !(self.lower[d].is_finite() && self.upper[d].is_finite() && self.lower[d] <= self.upper[d]) {
                return Err(Error::invalid("swarm", format!("bad bounds for parameter {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwarmResult {
    pub best: [f64; 6],
    pub value: f64,
    /// Global-best value after initialisation and after every generation.
    pub history: Vec<f64>,
}

struct Swarm {
    pos: Vec<[f64; 6]>,
    vel: Vec<[f64; 6]>,
    fit: Vec<f64>,
    pbest: Vec<[f64; 6]>,
    pbest_fit: Vec<f64>,
    gbest: [f64; 6],
    gbest_fit: f64,
}

impl Swarm {
    fn record(&mut self, i: usize) {
        if self.fit[i] < self.pbest_fit[i] {
            self.pbest_fit[i] = self.fit[i];
            self.pbest[i] = self.pos[i];
        }
        if self.fit[i] < self.gbest_fit {
            self.gbest_fit = self.fit[i];
            self.gbest = self.pos[i];
        }
    }
}

fn evaluate_all<F>(f: &F, positions: &[[f64; 6]], which: &[usize]) -> Vec<f64>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    which.par_iter().map(|&i| f(&positions[i])).collect()
}

/// Re-draws one parameter, a translation or a rotation with equal odds.
fn perturb_one(rng: &mut ChaCha8Rng, x: &mut [f64; 6], cfg: &SwarmConfig) {
    let group = if rng.random_bool(0.5) { 0 } else { 3 };
    let d = group + rng.random_range(0..3);
    x[d] = draw(rng, cfg.lower[d], cfg.upper[d]);
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Hybrid particle swarm minimisation over six bounded parameters.
///
/// Each generation performs the constriction-coefficient velocity update,
/// then re-draws one random parameter of a random half of the particles.
/// Every third generation the worst half is split: its first half (the very
/// worst) is re-initialised, three fifths (rounded up) of the rest get the
/// single-parameter re-draw and the others are blended towards the global
/// best with a uniform weight. The global best is never discarded. All
/// random draws come from one seeded stream consumed on the calling thread,
/// so parallel fitness evaluation cannot change the result.
pub fn hybrid_pso_minimize<F>(f: F, cfg: &SwarmConfig) -> Result<SwarmResult>
where
    F: Fn(&[f64; 6]) -> f64 + Sync,
{
    cfg.validate()?;
    let n = cfg.n_particles;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width: [f64; 6] = std::array::from_fn(|d| cfg.upper[d] - cfg.lower[d]);

    let pos: Vec<[f64; 6]> = (0..n)
        .map(|_| std::array::from_fn(|d| draw(&mut rng, cfg.lower[d], cfg.upper[d])))
        .collect();
    let vel: Vec<[f64; 6]> = (0..n)
        .map(|_| std::array::from_fn(|d| 0.1 * width[d] * rng.random_range(-1.0..=1.0)))
        .collect();
    let all: Vec<usize> = (0..n).collect();
    let fit = evaluate_all(&f, &pos, &all);
    let mut s = Swarm {
        pbest: pos.clone(),
        pbest_fit: fit.clone(),
        pos,
        vel,
        fit,
        gbest: [0.0; 6],
        gbest_fit: f64::INFINITY,
    };
    for i in 0..n {
        s.record(i);
    }
    let mut history = vec![s.gbest_fit];

    for generation in 1..=cfg.n_generations {
        for i in 0..n {
            for d in 0..6 {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let v = cfg.inertia * s.vel[i][d]
                    + cfg.cognitive * r1 * (s.pbest[i][d] - s.pos[i][d])
                    + cfg.social * r2 * (s.gbest[d] - s.pos[i][d]);
                let v = v.clamp(-width[d], width[d]);
                let x = s.pos[i][d] + v;
                if x < cfg.lower[d] || x > cfg.upper[d] {
                    s.pos[i][d] = x.clamp(cfg.lower[d], cfg.upper[d]);
                    s.vel[i][d] = 0.0;
                } else {
                    s.pos[i][d] = x;
                    s.vel[i][d] = v;
                }
            }
        }
        let mut order = all.clone();
        order.shuffle(&mut rng);
        for &i in &order[..n / 2] {
            perturb_one(&mut rng, &mut s.pos[i], cfg);
        }
        s.fit = evaluate_all(&f, &s.pos, &all);
        for i in 0..n {
            s.record(i);
        }

        if generation % 3 == 0 {
            let mut ranked = all.clone();
            ranked.sort_by(|&a, &b| s.fit[b].total_cmp(&s.fit[a]).then(a.cmp(&b)));
            let worst = &ranked[..n / 2];
            let (reinit, rest) = worst.split_at(worst.len() / 2);
            let n_perturb = (3 * rest.len()).div_ceil(5);
            for &i in reinit {
                s.pos[i] = std::array::from_fn(|d| draw(&mut rng, cfg.lower[d], cfg.upper[d]));
                s.vel[i] = std::array::from_fn(|d| 0.1 * width[d] * rng.random_range(-1.0..=1.0));
            }
            for &i in &rest[..n_perturb] {
                perturb_one(&mut rng, &mut s.pos[i], cfg);
            }
            for &i in &rest[n_perturb..] {
                let lambda: f64 = rng.random();
                for d in 0..6 {
                    s.pos[i][d] = lambda * s.pos[i][d] + (1.0 - lambda) * s.gbest[d];
                }
            }
            let touched: Vec<usize> = worst.to_vec();
            let values = evaluate_all(&f, &s.pos, &touched);
            for (&i, v) in touched.iter().zip(values) {
                s.fit[i] = v;
                s.record(i);
            }
        }
        history.push(s.gbest_fit);
    }

    Ok(SwarmResult {
        best: s.gbest,
        value: s.gbest_fit,
        history,
    })
}

/// Compass search from `start`: try ± each step, keep improvements, halve
/// all steps when a sweep finds none, stop below `min_steps` or after
/// `max_evals` evaluations.
pub fn pattern_search<F>(f: F, start: [f64; 6], steps: [f64; 6], min_steps: [f64; 6], max_evals: usize) -> ([f64; 6], f64)
where
    F: Fn(&[f64; 6]) -> f64,
{
    let mut x = start;
    let mut fx = f(&x);
    let mut steps = steps;
    let mut evals = 1;
    while evals < max_evals && (0..6).any(|d| steps[d] >= min_steps[d]) {
        let mut improved = false;
        for d in 0..6 {
            if steps[d] < min_steps[d] {
                continue;
            }
            for sign in [1.0, -1.0] {
                let mut y = x;
                y[d] += sign * steps[d];
                let fy = f(&y);
                evals += 1;
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            for s in steps.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    (x, fx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub swarm: SwarmConfig,
    pub penalty_factor: f64,
    /// Voxel stride of the swarm phase; the polish pass uses every voxel.
    pub stride: usize,
    pub polish: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            swarm: SwarmConfig::default(),
            penalty_factor: 2.0,
            stride: 2,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Motion that carries the prior onto the uncorrected volume:
    /// `resample_rigid(prior, transform, unc.grid())` is the aligned prior.
    pub transform: RigidTransform,
    /// Objective at `transform` (stride 1 when polished).
    pub objective: f64,
    pub swarm: SwarmResult,
}

/// Aligns `prior` to `unc` on their bone structures.
pub fn register(unc: &Volume3D, prior: &Volume3D, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    let unc_mask = extract_bone_mask(unc)?;
    let pri_mask = extract_bone_mask(prior)?;
    let f_unc = unc.masked(&unc_mask)?;
    let f_pri = prior.masked(&pri_mask)?;
    let params = ObjectiveParams {
        penalty_factor: cfg.penalty_factor,
        stride: cfg.stride,
    };
    let obj = RegistrationObjective::new(&f_unc, &unc_mask, &f_pri, &pri_mask, params)?;
    let swarm = hybrid_pso_minimize(|p| obj.evaluate(&RigidTransform::from_params(p)), &cfg.swarm)?;
    let (best, value) = if cfg.polish {
        let fine = obj.with_stride(1);
        let g = unc.grid();
        let t = g.min_spacing();
        let r = 1f64.to_radians();
        pattern_search(
            |p| fine.evaluate(&RigidTransform::from_params(p)),
            swarm.best,
            [t, t, t, r, r, r],
            [0.01 * t, 0.01 * t, 0.01 * t, 0.01 * r, 0.01 * r, 0.01 * r],
            3000,
        )
    } else {
        (swarm.best, swarm.value)
    };
    Ok(RegistrationResult {
        transform: RigidTransform::from_params(&best),
        objective: value,
        swarm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    /// Brute-force balance point: scanning every cut, the first index where
    /// the mass strictly left of it reaches half the total. For symmetric
    /// histograms with empty middles this is the middle of the gap.
    fn symmetric_centre(h: &[u64]) -> usize {
        let s = h.iter().position(|&c| c > 0).unwrap();
        let e = h.iter().rposition(|&c| c > 0).unwrap();
        (s + e) / 2
    }

    #[test]
    fn bht_two_spikes() {
        let h = [10, 0, 0, 0, 10];
        assert_eq!(bht_threshold(&h).unwrap(), 2);
        assert_eq!(bht_threshold(&h).unwrap(), symmetric_centre(&h));
    }

    #[test]
    fn bht_single_bin() {
        for i in 0..8 {
            let mut h = [0u64; 8];
            h[i] = 42;
            assert_eq!(bht_threshold(&h).unwrap(), i);
        }
    }

    #[test]
    fn bht_empty_is_error() {
        assert!(matches!(bht_threshold(&[0, 0, 0]), Err(Error::EmptyHistogram)));
        assert!(matches!(bht_threshold(&[]), Err(Error::EmptyHistogram)));
    }

    #[test]
    fn bht_between_two_modes() {
        let mut h = [0u64; 64];
        for (i, c) in h.iter_mut().enumerate() {
            let g = |m: f64| (1000.0 * (-((i as f64 - m) / 3.0).powi(2)).exp()).round() as u64;
            *c = g(10.0) + g(40.0);
        }
        let t = bht_threshold(&h).unwrap();
        assert!(t > 10 && t < 40, "{t}");
        // sweep: the between-mode interval is where the histogram is (near) empty
        assert!(h[t] < h[10] / 100);
    }

    #[test]
    fn bone_mask_on_two_valued_volume() {
        let g = Grid::centered([10, 10, 10], [1.0; 3]).unwrap();
        let v = Volume3D::from_fn(g, |p| if p.x() > 1.0 && p.y() < 0.0 { 0.06 } else { 0.02 });
        let m = extract_bone_mask(&v).unwrap();
        for (&x, &b) in v.data().iter().zip(m.data()) {
            assert_eq!(b, x == 0.06);
        }
        assert!(matches!(extract_bone_mask(&Volume3D::filled(g, 0.3)), Err(Error::ConstantVolume(_))));
    }

    fn blob_pair() -> (Volume3D, BinaryMask3D) {
        let g = Grid::centered([24, 24, 16], [1.0; 3]).unwrap();
        let v = Volume3D::from_fn(g, |p| {
            let a = (p.x() - 3.0).powi(2) / 20.0 + p.y().powi(2) / 8.0 + (p.z() + 1.0).powi(2) / 12.0;
            let b = (p.x() + 5.0).powi(2) / 6.0 + (p.y() - 4.0).powi(2) / 10.0 + p.z().powi(2) / 6.0;
            if a < 1.0 || b < 1.0 {
                0.05 + 0.001 * p.x()
            } else {
                0.0
            }
        });
        let m = BinaryMask3D::above(&v, 0.0);
        (v, m)
    }

    #[test]
    fn objective_zero_at_identity() {
        let (v, m) = blob_pair();
        let o = objective(&RigidTransform::IDENTITY, &v, &m, &v, &m, ObjectiveParams { penalty_factor: 3.0, stride: 1 }).unwrap();
        assert_eq!(o, 0.0);
        let moved = RigidTransform::new([1.3, 0.0, 0.0], [0.0, 0.0, 0.1]);
        let o = objective(&moved, &v, &m, &v, &m, ObjectiveParams { penalty_factor: 3.0, stride: 1 }).unwrap();
        assert!(o > 0.0);
    }

    #[test]
    fn objective_single_voxel_hand_value() {
        let g = Grid::centered([1, 1, 1], [1.0; 3]).unwrap();
        let unc = Volume3D::filled(g, 1.0);
        let pri = Volume3D::filled(g, 0.4);
        let unc_mask = BinaryMask3D::new(g, vec![true]).unwrap();
        let pri_mask = BinaryMask3D::new(g, vec![false]).unwrap();
        let params = ObjectiveParams {
            penalty_factor: 2.0,
            stride: 1,
        };
        let o = objective(&RigidTransform::IDENTITY, &unc, &unc_mask, &pri, &pri_mask, params).unwrap();
        assert!((o - 1.2).abs() < 1e-12);
    }

    /// Culling by support boxes must not change the value: compare against a
    /// straightforward sum over every voxel.
    #[test]
    fn objective_matches_full_scan() {
        let (v, m) = blob_pair();
        let g = *v.grid();
        let shifted = crate::transform::resample_rigid(&v, &RigidTransform::new([2.0, -1.0, 0.5], [0.05, 0.0, -0.1]), &g);
        let sm = BinaryMask3D::above(&shifted, 0.0);
        let params = ObjectiveParams {
            penalty_factor: 2.5,
            stride: 1,
        };
        for theta in [
            RigidTransform::IDENTITY,
            RigidTransform::new([-2.0, 1.0, -0.5], [0.0, 0.02, 0.1]),
            RigidTransform::new([9.0, 9.0, 0.0], [0.3, 0.0, 0.0]),
        ] {
            let fast = objective(&theta, &v, &m, &shifted, &sm, params).unwrap();
            let centre = g.world_center();
            let mut slow = 0.0;
            for k in 0..g.dims[2] {
                for j in 0..g.dims[1] {
                    for i in 0..g.dims[0] {
                        let c = g.voxel_center(i, j, k);
                        let q = theta.inverse().apply(c, centre);
                        let val = shifted.sample_trilinear(q);
                        let mb = sm.sample_nearest(q);
                        let w = if m.get(i, j, k) == mb { 1.0 } else { 2.5 };
                        slow += w * (v.get(i, j, k) - val).abs();
                    }
                }
            }
            assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0), "{fast} vs {slow}");
        }
    }

    #[test]
    fn objective_is_homogeneous() {
        let (v, m) = blob_pair();
        let theta = RigidTransform::new([0.7, -0.4, 0.2], [0.0, 0.05, 0.02]);
        let p = ObjectiveParams::default();
        let a = objective(&theta, &v, &m, &v, &m, p).unwrap();
        let v3 = &v * 3.0;
        let b = objective(&theta, &v3, &m, &v3, &m, p).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-9 * b);
    }

    #[test]
    fn swarm_finds_sphere_minimum() {
        let cfg = SwarmConfig {
            lower: [-5.0; 6],
            upper: [5.0; 6],
            n_generations: 200,
            seed: 3,
            ..SwarmConfig::default()
        };
        let sphere = |x: &[f64; 6]| x.iter().map(|v| v * v).sum::<f64>();
        let r = hybrid_pso_minimize(sphere, &cfg).unwrap();
        // the re-draws keep the swarm exploring; it only has to find the basin
        assert!(r.value < 0.05, "{}", r.value);
        assert_eq!(r.history.len(), 201);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        let (x, v) = pattern_search(sphere, r.best, [0.5; 6], [1e-5; 6], 10_000);
        assert!(v < 1e-9, "{v}");
        assert!(x.iter().all(|c| c.abs() < 1e-4));
    }

    #[test]
    fn swarm_on_constant_objective() {
        let cfg = SwarmConfig {
            n_generations: 10,
            ..SwarmConfig::default()
        };
        let r = hybrid_pso_minimize(|_| 4.5, &cfg).unwrap();
        assert_eq!(r.value, 4.5);
        for d in 0..6 {
            assert!(r.best[d] >= cfg.lower[d] && r.best[d] <= cfg.upper[d]);
        }
    }

    #[test]
    fn swarm_rejects_bad_config() {
        let mut cfg = SwarmConfig {
            n_particles: 11,
            ..SwarmConfig::default()
        };
        assert!(hybrid_pso_minimize(|_| 0.0, &cfg).is_err());
        cfg.n_particles = 8;
        assert!(hybrid_pso_minimize(|_| 0.0, &cfg).is_err());
    }

    #[test]
    fn swarm_is_deterministic_across_thread_counts() {
        let cfg = SwarmConfig {
            n_generations: 30,
            seed: 11,
            ..SwarmConfig::default()
        };
        let f = |x: &[f64; 6]| x.iter().enumerate().map(|(i, v)| (v - i as f64).abs()).sum::<f64>();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| hybrid_pso_minimize(f, &cfg).unwrap());
        let b = four.install(|| hybrid_pso_minimize(f, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn pattern_search_polishes_quadratic() {
        let target = [0.3, -1.2, 2.0, 0.01, -0.02, 0.03];
        let f = |x: &[f64; 6]| x.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let (x, v) = pattern_search(f, [0.0; 6], [1.0; 6], [1e-4; 6], 10_000);
        assert!(v < 1e-3);
        for d in 0..6 {
            assert!((x[d] - target[d]).abs() < 1e-3);
        }
    }
}
