//! Voxel phantoms and polychromatic cone-beam acquisition.
//!
//! Phantoms are labelled grids of four materials. Acquisition follows each
//! ray through the label field, accumulates per-material path lengths and
//! attenuates a discrete spectrum, so dense paths harden the beam and the
//! log-transformed data stop being linear in path length. Optional Poisson
//! counting noise uses one counter-based random stream per ray.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConeBeamGeometry, Sinogram};
use crate::projector::{check_step, RayLattice};
use crate::transform::nearest_index;
use crate::vec3::Vec3;
use crate::volume::{BinaryMask3D, Grid, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Material {
    Air = 0,
    Soft = 1,
    Bone = 2,
    Metal = 3,
}

impl Material {
    pub const ALL: [Material; 4] = [Material::Air, Material::Soft, Material::Bone, Material::Metal];

    pub fn name(self) -> &'static str {
        match self {
            Material::Air => "air",
            Material::Soft => "soft",
            Material::Bone => "bone",
            Material::Metal => "metal",
        }
    }

    pub fn parse(label: &str) -> Result<Material> {
        Material::ALL
            .into_iter()
            .find(|m| m.name() == label)
            .ok_or_else(|| Error::UnknownMaterial(label.to_string()))
    }

    pub fn from_index(i: u8) -> Option<Material> {
        Material::ALL.get(i as usize).copied()
    }
}

/// Discrete tube spectrum and per-material attenuation at each energy bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpectrumModel {
    pub energies_kev: Vec<f64>,
    pub weights: Vec<f64>,
    /// μ (mm⁻¹) per material, one entry per energy bin.
    pub mu: MaterialTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialTable {
    pub air: Vec<f64>,
    pub soft: Vec<f64>,
    pub bone: Vec<f64>,
    pub metal: Vec<f64>,
}

impl MaterialTable {
    pub fn get(&self, m: Material) -> &[f64] {
        match m {
            Material::Air => &self.air,
            Material::Soft => &self.soft,
            Material::Bone => &self.bone,
            Material::Metal => &self.metal,
        }
    }
}

impl Default for MaterialSpectrumModel {
    /// Three bins at 50/70/90 keV. Soft tissue is water-like, bone is
    /// cancellous-to-cortical, metal is steel (~25× bone at the lowest bin).
    fn default() -> Self {
        MaterialSpectrumModel {
            energies_kev: vec![50.0, 70.0, 90.0],
            weights: vec![0.3, 0.5, 0.2],
            mu: MaterialTable {
                air: vec![0.0, 0.0, 0.0],
                soft: vec![0.0227, 0.0193, 0.0176],
                bone: vec![0.060, 0.040, 0.032],
                metal: vec![1.54, 0.66, 0.37],
            },
        }
    }
}

impl MaterialSpectrumModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.energies_kev.len();
        if n == 0 || self.weights.len() != n {
            return Err(Error::invalid("spectrum", "need one weight per energy bin"));
        }
        if self.energies_kev.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("spectrum", "energies must be strictly increasing"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("spectrum", "weights must be >= 0"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("spectrum", format!("weights sum to {total}, not 1")));
        }
        for m in Material::ALL {
            let mu = self.mu.get(m);
            if mu.len() != n {
                return Err(Error::invalid("spectrum", format!("{} needs {n} μ values", m.name())));
            }
            if mu.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid("spectrum", format!("{} μ must be finite and >= 0", m.name())));
            }
            if mu.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::invalid(
                    "spectrum",
                    format!("{} μ must not increase with energy", m.name()),
                ));
            }
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.energies_kev.len()
    }

    pub fn bin_of(&self, energy_kev: f64) -> Result<usize> {
        self.energies_kev
            .iter()
            .position(|&e| e == energy_kev)
            .ok_or_else(|| {
                Error::invalid(
                    "reference energy",
                    format!("{energy_kev} keV is not one of {:?}", self.energies_kev),
                )
            })
    }

    pub fn mu_at(&self, m: Material, bin: usize) -> f64 {
        self.mu.get(m)[bin]
    }

    /// Single-bin model at one of this model's energies.
    pub fn monochromatic(&self, bin: usize) -> MaterialSpectrumModel {
        let pick = |v: &Vec<f64>| vec![v[bin]];
        MaterialSpectrumModel {
            energies_kev: vec![self.energies_kev[bin]],
            weights: vec![1.0],
            mu: MaterialTable {
                air: pick(&self.mu.air),
                soft: pick(&self.mu.soft),
                bone: pick(&self.mu.bone),
                metal: pick(&self.mu.metal),
            },
        }
    }

    /// Detected fraction `Σ_k w_k · exp(−Σ_m μ_m(E_k) · l_m)` for path lengths
    /// per material (mm).
    pub fn transmission(&self, lengths: &[f64; 4]) -> f64 {
        (0..self.n_bins())
            .map(|k| {
                let att: f64 = Material::ALL
                    .iter()
                    .zip(lengths)
                    .map(|(&m, &l)| self.mu_at(m, k) * l)
                    .sum();
                self.weights[k] * (-att).exp()
            })
            .sum()
    }

    /// Noise-free projection value `−ln F`.
    pub fn projection_value(&self, lengths: &[f64; 4]) -> f64 {
        -self.transmission(lengths).ln()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: MaterialSpectrumModel = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spectrum model serializes")
    }
}

/// Geometric primitive of a phantom, positions and sizes in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Ellipsoid {
        center: [f64; 3],
        semi_axes: [f64; 3],
    },
    /// Finite cylinder around an arbitrary axis direction.
    Cylinder {
        center: [f64; 3],
        axis: [f64; 3],
        radius: f64,
        half_length: f64,
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
    },
}

impl Shape {
    pub fn contains(&self, p: Vec3) -> bool {
        match self {
            Shape::Ellipsoid { center, semi_axes } => {
                let d = p - Vec3(*center);
                (0..3).map(|a| (d[a] / semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
            }
            Shape::Cylinder {
                center,
                axis,
                radius,
                half_length,
            } => {
                let a = Vec3(*axis).normalized();
                let d = p - Vec3(*center);
                let along = d.dot(a);
                along.abs() <= *half_length && (d - a * along).norm() <= *radius
            }
            Shape::Box { center, half_size } => {
                let d = p - Vec3(*center);
                (0..3).all(|a| d[a].abs() <= half_size[a])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub material: String,
    #[serde(flatten)]
    pub shape: Shape,
}

impl Primitive {
    pub fn new(material: Material, shape: Shape) -> Self {
        Primitive {
            material: material.name().to_string(),
            shape,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid: Grid,
    #[serde(default, rename = "primitive")]
    pub primitives: Vec<Primitive>,
}

impl PhantomSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("phantom spec serializes")
    }

    /// Lumbar-like section: soft-tissue body, three vertebrae (body, pedicles,
    /// lamina, spinous and transverse processes) and, optionally, two pedicle
    /// screws in the middle vertebra.
    pub fn spine(grid: Grid, with_screws: bool) -> Self {
        let mut prims = vec![Primitive::new(
            Material::Soft,
            Shape::Ellipsoid {
                center: [0.0, 0.0, 0.0],
                semi_axes: [58.0, 44.0, 90.0],
            },
        )];
        let boxed = |c: [f64; 3], h: [f64; 3]| {
            Primitive::new(
                Material::Bone,
                Shape::Box {
                    center: c,
                    half_size: h,
                },
            )
        };
        for z0 in [-40.0, 0.0, 40.0] {
            prims.push(Primitive::new(
                Material::Bone,
                Shape::Cylinder {
                    center: [0.0, 12.0, z0],
                    axis: [0.0, 0.0, 1.0],
                    radius: 15.0,
                    half_length: 13.0,
                },
            ));
            for side in [-1.0, 1.0] {
                prims.push(boxed([side * 9.0, -6.0, z0 + 2.0], [3.5, 7.0, 5.0]));
                prims.push(boxed([side * 18.0, -12.0, z0 + 2.0], [6.0, 3.0, 4.0]));
            }
            prims.push(boxed([0.0, -16.0, z0 + 2.0], [12.0, 3.5, 6.0]));
            prims.push(boxed([0.0, -27.0, z0 - 3.0], [3.0, 8.0, 5.0]));
        }
        if with_screws {
            let tilt = 5f64.to_radians();
            let half = 14.0;
            for side in [-1.0, 1.0] {
                let axis = [-side * tilt.sin(), tilt.cos(), 0.0];
                let entry = [side * 9.0, -13.0, 2.0];
                prims.push(Primitive::new(
                    Material::Metal,
                    Shape::Cylinder {
                        center: [entry[0] + axis[0] * half, entry[1] + axis[1] * half, 2.0],
                        axis,
                        radius: 3.0,
                        half_length: half,
                    },
                ));
            }
        }
        PhantomSpec {
            grid,
            primitives: prims,
        }
    }
}

/// Material index per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(grid: Grid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::ShapeMismatch("label count differs from grid".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| Material::from_index(l).is_none()) {
            return Err(Error::UnknownMaterial(format!("label index {bad}")));
        }
        Ok(LabelVolume { grid, labels })
    }

    pub fn mask_of(&self, m: Material) -> BinaryMask3D {
        BinaryMask3D::new(self.grid, self.labels.iter().map(|&l| l == m as u8).collect())
            .expect("labels match their grid")
    }

    /// Copy with every voxel of material `m` replaced by `with`.
    pub fn replace(&self, m: Material, with: Material) -> LabelVolume {
        LabelVolume {
            grid: self.grid,
            labels: self
                .labels
                .iter()
                .map(|&l| if l == m as u8 { with as u8 } else { l })
                .collect(),
        }
    }

    pub fn attenuation(&self, model: &MaterialSpectrumModel, bin: usize) -> Volume3D {
        let lut: Vec<f64> = Material::ALL.iter().map(|&m| model.mu_at(m, bin)).collect();
        Volume3D::new(self.grid, self.labels.iter().map(|&l| lut[l as usize]).collect())
            .expect("labels match their grid")
    }
}

/// Rasterizes `spec` at voxel centres (later primitives overwrite earlier
/// ones) and returns the μ volume at `ref_energy_kev` with its labels.
pub fn build_phantom(
    spec: &PhantomSpec,
    model: &MaterialSpectrumModel,
    ref_energy_kev: f64,
) -> Result<(Volume3D, LabelVolume)> {
    spec.grid.validate()?;
    model.validate()?;
    let bin = model.bin_of(ref_energy_kev)?;
    let resolved: Vec<(Material, &Shape)> = spec
        .primitives
        .iter()
        .map(|p| Ok((Material::parse(&p.material)?, &p.shape)))
        .collect::<Result<_>>()?;

    let grid = spec.grid;
    let mut labels = vec![Material::Air as u8; grid.len()];
    let mut hits = vec![0usize; resolved.len()];
    for (idx, slot) in labels.iter_mut().enumerate() {
        let [i, j, k] = grid.coords(idx);
        let p = grid.voxel_center(i, j, k);
        for (n, (m, shape)) in resolved.iter().enumerate() {
            if shape.contains(p) {
                *slot = *m as u8;
                hits[n] += 1;
            }
        }
    }
    if let Some(n) = hits.iter().position(|&h| h == 0) {
        return Err(Error::invalid(
            "phantom",
            format!("primitive {n} does not cover any voxel centre"),
        ));
    }
    let labels = LabelVolume { grid, labels };
    Ok((labels.attenuation(model, bin), labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionOptions {
    /// Ray sampling step, mm.
    pub step: f64,
    /// Unattenuated photon count per detector bin; `None` is noise free.
    pub photons: Option<f64>,
    pub seed: u64,
    /// Average four sub-rays per bin (in the intensity domain).
    pub supersample: bool,
}

impl AcquisitionOptions {
    pub fn noiseless(step: f64) -> Self {
        AcquisitionOptions {
            step,
            photons: None,
            seed: 0,
            supersample: false,
        }
    }
}

/// Path length (mm) through each material along one lattice, using the
/// nearest label at every sample.
pub fn material_path_lengths(labels: &LabelVolume, lattice: &RayLattice) -> [f64; 4] {
    let mut counts = [0usize; 4];
    let g = &labels.grid;
    lattice.for_each_index(g, |x, y, z| {
        if let Some([i, j, k]) = nearest_index(g, [x, y, z]) {
            counts[labels.labels[g.index(i, j, k)] as usize] += 1;
        }
    });
    counts.map(|c| c as f64 * lattice.step)
}

/// Polychromatic acquisition of a labelled phantom.
pub fn simulate_polychromatic(
    labels: &LabelVolume,
    model: &MaterialSpectrumModel,
    geom: &ConeBeamGeometry,
    opts: &AcquisitionOptions,
) -> Result<Sinogram> {
    model.validate()?;
    geom.validate()?;
    check_step(opts.step)?;
    if let Some(n0) = opts.photons {
        if !(n0 >= 1.0 && n0.is_finite()) {
            return Err(Error::invalid("photons", format!("{n0} must be >= 1")));
        }
    }
    let offsets: &[(f64, f64)] = if opts.supersample {
        &[(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)]
    } else {
        &[(0.0, 0.0)]
    };
    let nu = geom.nu();
    let nv = geom.nv();
    let mut sino = Sinogram::zeros(geom.clone());
    sino.data_mut()
        .par_chunks_mut(nu)
        .enumerate()
        .for_each(|(row, out)| {
            let view = row / nv;
            let v = row % nv;
            let source = geom.source(view);
            for (u, slot) in out.iter_mut().enumerate() {
                let mut fraction = 0.0;
                for &(du, dv) in offsets {
                    let det = geom.detector_point(view, u as f64 + du, v as f64 + dv);
                    let lattice = RayLattice::through(&labels.grid, source, det, opts.step);
                    fraction += model.transmission(&material_path_lengths(labels, &lattice));
                }
                fraction /= offsets.len() as f64;
                if let Some(n0) = opts.photons {
                    let ray = (row * nu + u) as u64;
                    fraction = poisson_fraction(fraction, n0, opts.seed, ray);
                }
                *slot = -fraction.ln();
            }
        });
    Ok(sino)
}

/// Counting-noise draw for one ray; each ray owns its own random stream so
/// the outcome is independent of evaluation order.
fn poisson_fraction(fraction: f64, n0: f64, seed: u64, ray: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ray);
    let lambda = n0 * fraction;
    let n = if lambda > 0.0 {
        Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(0.0)
    } else {
        0.0
    };
    n.max(1.0) / n0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid() -> Grid {
        Grid::centered([20, 20, 10], [1.0; 3]).unwrap()
    }

    #[test]
    fn default_model_is_valid() {
        let m = MaterialSpectrumModel::default();
        m.validate().unwrap();
        let ratio = m.mu_at(Material::Metal, 0) / m.mu_at(Material::Bone, 0);
        assert!((10.0..=30.0).contains(&ratio));
    }

    #[test]
    fn empty_spec_is_air() {
        let spec = PhantomSpec {
            grid: small_grid(),
            primitives: vec![],
        };
        let (v, l) = build_phantom(&spec, &MaterialSpectrumModel::default(), 70.0).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(l.labels.iter().all(|&x| x == 0));
    }

    #[test]
    fn single_ellipsoid_voxel() {
        let m = MaterialSpectrumModel::default();
        let spec = PhantomSpec {
            grid: small_grid(),
            primitives: vec![Primitive::new(
                Material::Soft,
                Shape::Ellipsoid {
                    center: [0.5, 0.5, 0.5],
                    semi_axes: [0.6, 0.6, 0.6],
                },
            )],
        };
        let (v, l) = build_phantom(&spec, &m, 70.0).unwrap();
        assert_eq!(v.get(10, 10, 5), m.mu_at(Material::Soft, 1));
        assert_eq!(l.labels.iter().filter(|&&x| x == 1).count(), 1);
    }

    #[test]
    fn later_primitives_win() {
        let spec = PhantomSpec {
            grid: small_grid(),
            primitives: vec![
                Primitive::new(
                    Material::Bone,
                    Shape::Box {
                        center: [0.0; 3],
                        half_size: [5.0, 5.0, 3.0],
                    },
                ),
                Primitive::new(
                    Material::Metal,
                    Shape::Cylinder {
                        center: [0.0; 3],
                        axis: [1.0, 0.0, 0.0],
                        radius: 1.0,
                        half_length: 3.0,
                    },
                ),
            ],
        };
        let (_, l) = build_phantom(&spec, &MaterialSpectrumModel::default(), 50.0).unwrap();
        let g = l.grid;
        let centre = g.index(10, 10, 5);
        let p = g.voxel_center(10, 10, 5);
        assert!(p.norm() < 1.0);
        assert_eq!(l.labels[centre], Material::Metal as u8);
        assert_eq!(l.labels[g.index(14, 14, 5)], Material::Bone as u8);
    }

    #[test]
    fn unknown_label_and_bad_energy() {
        let mut spec = PhantomSpec::spine(small_grid(), false);
        let m = MaterialSpectrumModel::default();
        assert!(build_phantom(&spec, &m, 60.0).is_err());
        spec.primitives[0].material = "titanium".into();
        assert!(matches!(build_phantom(&spec, &m, 70.0), Err(Error::UnknownMaterial(_))));
    }

    #[test]
    fn primitive_outside_grid_is_rejected() {
        let spec = PhantomSpec {
            grid: small_grid(),
            primitives: vec![Primitive::new(
                Material::Soft,
                Shape::Ellipsoid {
                    center: [500.0, 0.0, 0.0],
                    semi_axes: [1.0, 1.0, 1.0],
                },
            )],
        };
        assert!(build_phantom(&spec, &MaterialSpectrumModel::default(), 70.0).is_err());
    }

    #[test]
    fn two_bin_scalar_value() {
        let m = MaterialSpectrumModel {
            energies_kev: vec![40.0, 80.0],
            weights: vec![0.5, 0.5],
            mu: MaterialTable {
                air: vec![0.0, 0.0],
                soft: vec![0.2, 0.1],
                bone: vec![0.0, 0.0],
                metal: vec![0.0, 0.0],
            },
        };
        let p = m.projection_value(&[0.0, 10.0, 0.0, 0.0]);
        let oracle = -(0.5 * (-2.0f64).exp() + 0.5 * (-1.0f64).exp()).ln();
        assert!((p - oracle).abs() < 1e-15);
        assert!((p - 1.379885).abs() < 1e-6);
    }

    #[test]
    fn hardening_bounds_and_sublinearity() {
        let m = MaterialSpectrumModel::default();
        for lengths in [[0.0, 100.0, 0.0, 0.0], [0.0, 80.0, 30.0, 0.0], [0.0, 60.0, 20.0, 6.0]] {
            let p = m.projection_value(&lengths);
            let lo = m.monochromatic(m.n_bins() - 1).projection_value(&lengths);
            let hi = m.monochromatic(0).projection_value(&lengths);
            assert!(lo <= p && p <= hi, "{lo} {p} {hi}");
            let doubled = lengths.map(|l| 2.0 * l);
            assert!(m.projection_value(&doubled) < 2.0 * p);
        }
    }

    #[test]
    fn toml_round_trip() {
        let spec = PhantomSpec::spine(small_grid(), true);
        assert_eq!(PhantomSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let m = MaterialSpectrumModel::default();
        assert_eq!(MaterialSpectrumModel::from_toml(&m.to_toml()).unwrap(), m);
        let bad = "energies_kev = [50.0]\nweights = [0.5]\n[mu]\nair=[0.0]\nsoft=[0.1]\nbone=[0.1]\nmetal=[1.0]\n";
        assert!(MaterialSpectrumModel::from_toml(bad).is_err());
    }
}
