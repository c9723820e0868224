//! End-to-end orchestration: configuration, stage execution with on-disk
//! artifacts, resumption, reporting and slice export.
//!
//! # Configuration grammar
//!
//! A TOML document; every key is optional and falls back to the default
//! shown by [`PipelineConfig::default`]. Relative paths are resolved against
//! the directory holding the config file.
//!
//! ```toml
//! seed = 7
//! threads = 0                  # 0: all cores
//!
//! [inputs]                     # default: artifacts of `simulate` in output.dir
//! prior_volume = "prior.hdr"
//! unc_sinogram = "unc_sino.hdr"
//! unc_volume = "unc_recon.hdr" # reconstructed from the sinogram when absent
//! truth_volume = "truth_mu.hdr"
//! truth_metal = "truth_metal.hdr"
//!
//! [geometry]
//! sad = 647.7
//! sdd = 1147.7
//! det_bins = [256, 128]
//! det_size = [393.432, 290.224]
//! n_views = 180
//!
//! [grid]
//! dims = [128, 128, 128]
//! spacing = [1.0, 1.0, 1.0]
//!
//! [simulation]
//! phantom = "phantom.toml"     # default: built-in spine with two screws
//! spectrum = "spectrum.toml"   # default: three-bin steel/bone/soft model
//! reference_energy_kev = 70.0
//! photons = 1e6                # absent: noise free
//! supersample = false
//! perturbation = [4.0, -3.0, 2.0, 2.0, -1.5, 3.0]  # mm, mm, mm, deg, deg, deg
//!
//! [registration]
//! n_particles = 64
//! n_generations = 300
//! max_translation = 30.0
//! max_rotation_deg = 15.0
//! penalty_factor = 2.0
//! stride = 2
//! polish = true
//!
//! [metal]
//! eps = 2.0
//! min_pts = 10
//! rho = 0.66
//! expected_clusters = 2
//!
//! [correction]
//! h = 10.0
//! prior_trust = 0.7
//! step = 0.5
//!
//! [inpaint]
//! tolerance = 1e-6
//! max_iterations = 10000
//!
//! [output]
//! dir = "out"
//! reinsert_metal = false
//! window = "shepp-logan"
//! band_radius = 20.0
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::correction::{build_inpainting_guide, CorrectionParams};
use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, RampWindow};
use crate::geometry::{ConeBeamGeometry, MetalShadowMask, Sinogram};
use crate::inpaint::{inpaint_sinogram, seam_discontinuity, seam_excess, SolverParams};
use crate::io;
use crate::metal::{check_cluster_count, default_rho, metal_only_volume, metal_shadow, segment_metal, DbscanParams};
use crate::metrics::{ArtifactBandSpec, EvaluationReport};
use crate::projector::{check_step, default_step};
use crate::registration::{register, ObjectiveParams, RegistrationConfig, SwarmConfig, MAX_ROTATION_DEG, MAX_TRANSLATION};
use crate::simulation::{
    build_phantom, simulate_polychromatic, AcquisitionOptions, Material, MaterialSpectrumModel, PhantomSpec,
};
use crate::transform::{resample_rigid, RigidTransform};
use crate::volume::{BinaryMask3D, Grid, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub inputs: InputsConfig,
    pub geometry: GeometryConfig,
    pub grid: GridConfig,
    pub simulation: SimulationConfig,
    pub registration: RegistrationBlock,
    pub metal: MetalBlock,
    pub correction: CorrectionBlock,
    pub inpaint: SolverParams,
    pub output: OutputConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            threads: 0,
            inputs: InputsConfig::default(),
            geometry: GeometryConfig::default(),
            grid: GridConfig::default(),
            simulation: SimulationConfig::default(),
            registration: RegistrationBlock::default(),
            metal: MetalBlock::default(),
            correction: CorrectionBlock::default(),
            inpaint: SolverParams::default(),
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_volume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unc_sinogram: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unc_volume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_volume: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth_metal: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub sad: f64,
    pub sdd: f64,
    pub det_bins: [usize; 2],
    pub det_size: [f64; 2],
    pub n_views: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            sad: 647.7,
            sdd: 1147.7,
            det_bins: [256, 128],
            det_size: [393.432, 290.224],
            n_views: 180,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ConeBeamGeometry> {
        ConeBeamGeometry::uniform(self.sad, self.sdd, self.det_bins, self.det_size, self.n_views)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dims: [128, 128, 128],
            spacing: [1.0; 3],
        }
    }
}

impl GridConfig {
    /// Grid centred on the isocenter.
    pub fn build(&self) -> Result<Grid> {
        Grid::centered(self.dims, self.spacing)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<PathBuf>,
    pub reference_energy_kev: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub photons: Option<f64>,
    pub supersample: bool,
    /// Rigid motion applied to the prior scan: mm, mm, mm, deg, deg, deg.
    pub perturbation: [f64; 6],
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            phantom: None,
            spectrum: None,
            reference_energy_kev: 70.0,
            photons: None,
            supersample: false,
            perturbation: [4.0, -3.0, 2.0, 2.0, -1.5, 3.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationBlock {
    pub n_particles: usize,
    pub n_generations: usize,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub penalty_factor: f64,
    pub stride: usize,
    pub polish: bool,
}

impl Default for RegistrationBlock {
    fn default() -> Self {
        let s = SwarmConfig::default();
        let r = RegistrationConfig::default();
        RegistrationBlock {
            n_particles: s.n_particles,
            n_generations: s.n_generations,
            max_translation: MAX_TRANSLATION,
            max_rotation_deg: MAX_ROTATION_DEG,
            inertia: s.inertia,
            cognitive: s.cognitive,
            social: s.social,
            penalty_factor: r.penalty_factor,
            stride: r.stride,
            polish: r.polish,
        }
    }
}

impl RegistrationBlock {
    pub fn build(&self, seed: u64) -> RegistrationConfig {
        let t = self.max_translation;
        let r = self.max_rotation_deg.to_radians();
        RegistrationConfig {
            swarm: SwarmConfig {
                n_particles: self.n_particles,
                n_generations: self.n_generations,
                lower: [-t, -t, -t, -r, -r, -r],
                upper: [t, t, t, r, r, r],
                inertia: self.inertia,
                cognitive: self.cognitive,
                social: self.social,
                seed,
            },
            penalty_factor: self.penalty_factor,
            stride: self.stride,
            polish: self.polish,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetalBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub min_pts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_clusters: Option<usize>,
}

impl Default for MetalBlock {
    fn default() -> Self {
        MetalBlock {
            eps: None,
            min_pts: 10,
            rho: None,
            expected_clusters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionBlock {
    pub h: f64,
    pub prior_trust: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

impl Default for CorrectionBlock {
    fn default() -> Self {
        CorrectionBlock {
            h: 10.0,
            prior_trust: 0.7,
            step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub reinsert_metal: bool,
    pub window: RampWindow,
    pub band_radius: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            reinsert_metal: false,
            window: RampWindow::default(),
            band_radius: 20.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.inputs.prior_volume,
            &mut self.inputs.unc_sinogram,
            &mut self.inputs.unc_volume,
            &mut self.inputs.truth_volume,
            &mut self.inputs.truth_metal,
            &mut self.simulation.phantom,
            &mut self.simulation.spectrum,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with grid-dependent defaults filled in.
    pub fn resolved(&self) -> Result<Self> {
        let grid = self.grid.build()?;
        self.validate(&grid)?;
        let mut c = self.clone();
        c.metal.eps.get_or_insert(DbscanParams::for_grid(&grid).eps);
        c.correction.step.get_or_insert(default_step(&grid));
        Ok(c)
    }

    /// Checks every parameter block, so that a bad value fails before any
    /// stage has run.
    fn validate(&self, grid: &Grid) -> Result<()> {
        let reg = self.registration.build(self.seed);
        reg.swarm.validate()?;
        ObjectiveParams {
            penalty_factor: reg.penalty_factor,
            stride: reg.stride,
        }
        .validate()?;
        self.dbscan(grid).validate()?;
        CorrectionParams {
            rho: self.metal.rho.unwrap_or(1.0),
            h: self.correction.h,
            prior_trust: self.correction.prior_trust,
        }
        .validate()?;
        if let Some(step) = self.correction.step {
            check_step(step)?;
        }
        if !(self.inpaint.tolerance > 0.0) || self.inpaint.max_iterations == 0 {
            return Err(Error::invalid("inpaint", "tolerance and max_iterations must be > 0"));
        }
        Ok(())
    }

    fn step(&self, grid: &Grid) -> f64 {
        self.correction.step.unwrap_or_else(|| default_step(grid))
    }

    fn dbscan(&self, grid: &Grid) -> DbscanParams {
        DbscanParams {
            eps: self.metal.eps.unwrap_or_else(|| DbscanParams::for_grid(grid).eps),
            min_pts: self.metal.min_pts,
        }
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output.dir.join(name)
    }

    fn input_or_artifact(&self, input: &Option<PathBuf>, name: &str) -> PathBuf {
        input.clone().unwrap_or_else(|| self.artifact(name))
    }
}

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const TRUTH_MU: &str = "truth_mu.hdr";
    pub const TRUTH_LABELS: &str = "truth_labels.hdr";
    pub const TRUTH_METAL: &str = "truth_metal.hdr";
    pub const UNC_SINO: &str = "unc_sino.hdr";
    pub const PRIOR_SINO: &str = "prior_sino.hdr";
    pub const PRIOR: &str = "prior.hdr";
    pub const PERTURBATION: &str = "perturbation.txt";
    pub const UNC_RECON: &str = "unc_recon.hdr";
    pub const TRANSFORM: &str = "transform.txt";
    pub const ALIGNED_PRIOR: &str = "aligned_prior.hdr";
    pub const METAL_MASK: &str = "metal_mask.hdr";
    pub const METAL_INFO: &str = "metal.txt";
    pub const METAL_ONLY: &str = "metal_only.hdr";
    pub const SHADOW: &str = "shadow.hdr";
    pub const CORRECTED_SINO: &str = "corrected_sino.hdr";
    pub const INPAINTED_SINO: &str = "inpainted_sino.hdr";
    pub const FINAL: &str = "final.hdr";
    pub const REPORT: &str = "report.txt";
}

/// `key: value` lines.
fn write_kv(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}: {v}");
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_kv<T: FromStr>(path: &Path, key: &str) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: String| Error::Format {
        kind: "key-value",
        path: path.to_path_buf(),
        reason,
    };
    let value = text
        .lines()
        .filter_map(|l| l.split_once(':'))
        .find(|(k, _)| k.trim() == key)
        .map(|(_, v)| v.trim())
        .ok_or_else(|| bad(format!("missing `{key}`")))?;
    value.parse().map_err(|_| bad(format!("bad `{key}` value `{value}`")))
}

fn params_text(p: [f64; 6]) -> String {
    p.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    write_kv(path, &[("params", params_text(t.params()))])
}

pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    let s: String = read_kv(path, "params")?;
    let v: Vec<f64> = s.split_whitespace().map(|x| x.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(
        |_| Error::Format {
            kind: "transform",
            path: path.to_path_buf(),
            reason: "bad number".into(),
        },
    )?;
    let p: [f64; 6] = v.try_into().map_err(|_| Error::Format {
        kind: "transform",
        path: path.to_path_buf(),
        reason: "need six parameters".into(),
    })?;
    Ok(RigidTransform::from_params(&p))
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn load_model(cfg: &PipelineConfig) -> Result<MaterialSpectrumModel> {
    match &cfg.simulation.spectrum {
        Some(p) => MaterialSpectrumModel::from_toml(&fs::read_to_string(p)?),
        None => Ok(MaterialSpectrumModel::default()),
    }
}

fn load_phantom(cfg: &PipelineConfig, grid: Grid) -> Result<PhantomSpec> {
    match &cfg.simulation.phantom {
        Some(p) => PhantomSpec::from_toml(&fs::read_to_string(p)?),
        None => Ok(PhantomSpec::spine(grid, true)),
    }
}

/// Paired synthetic data: a polychromatic scan with implants, a metal-free
/// prior scan reconstructed and moved by a known rigid perturbation, and
/// ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedCase {
    pub truth: Volume3D,
    pub truth_metal: BinaryMask3D,
    pub unc_sino: Sinogram,
    pub prior: Volume3D,
    /// Motion applied to the prior; registration should recover its inverse.
    pub perturbation: RigidTransform,
}

/// Simulates a case and writes it to the output directory.
///
/// The prior phantom is the same specification with every metal primitive
/// removed (bone or soft tissue remains where the implants would go).
pub fn simulate_case(cfg: &PipelineConfig) -> Result<SimulatedCase> {
    stage("simulate", simulate_inner(cfg))
}

fn simulate_inner(cfg: &PipelineConfig) -> Result<SimulatedCase> {
    let grid = cfg.grid.build()?;
    let geom = cfg.geometry.build()?;
    let model = load_model(cfg)?;
    let spec = load_phantom(cfg, grid)?;
    let (truth, labels) = build_phantom(&spec, &model, cfg.simulation.reference_energy_kev)?;
    let prior_spec = PhantomSpec {
        grid: spec.grid,
        primitives: spec
            .primitives
            .iter()
            .filter(|p| !matches!(Material::parse(&p.material), Ok(Material::Metal)))
            .cloned()
            .collect(),
    };
    let (_, prior_labels) = build_phantom(&prior_spec, &model, cfg.simulation.reference_energy_kev)?;
    let opts = AcquisitionOptions {
        step: default_step(&spec.grid),
        photons: cfg.simulation.photons,
        seed: cfg.seed,
        supersample: cfg.simulation.supersample,
    };
    let unc_sino = simulate_polychromatic(&labels, &model, &geom, &opts)?;
    let prior_sino = simulate_polychromatic(
        &prior_labels,
        &model,
        &geom,
        &AcquisitionOptions {
            seed: cfg.seed.wrapping_add(1),
            ..opts
        },
    )?;
    let prior_recon = fdk_reconstruct(&prior_sino, &grid, cfg.output.window)?;
    let p = cfg.simulation.perturbation;
    let perturbation = RigidTransform::new([p[0], p[1], p[2]], [p[3], p[4], p[5]].map(f64::to_radians));
    let prior = resample_rigid(&prior_recon, &perturbation, &grid);
    let truth_metal = labels.mask_of(Material::Metal);

    fs::create_dir_all(&cfg.output.dir)?;
    io::write_volume(&cfg.artifact(artifacts::TRUTH_MU), &truth)?;
    io::write_labels(&cfg.artifact(artifacts::TRUTH_LABELS), &labels.grid, &labels.labels)?;
    io::write_mask(&cfg.artifact(artifacts::TRUTH_METAL), &truth_metal)?;
    io::write_sinogram(&cfg.artifact(artifacts::UNC_SINO), &unc_sino)?;
    io::write_sinogram(&cfg.artifact(artifacts::PRIOR_SINO), &prior_sino)?;
    io::write_volume(&cfg.artifact(artifacts::PRIOR), &prior)?;
    write_transform(&cfg.artifact(artifacts::PERTURBATION), &perturbation)?;
    Ok(SimulatedCase {
        truth,
        truth_metal,
        unc_sino,
        prior,
        perturbation,
    })
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Reconstruct,
    Register,
    SegmentMetal,
    Correct,
    Inpaint,
    Final,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Reconstruct,
        Stage::Register,
        Stage::SegmentMetal,
        Stage::Correct,
        Stage::Inpaint,
        Stage::Final,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Reconstruct => "reconstruct",
            Stage::Register => "register",
            Stage::SegmentMetal => "segment-metal",
            Stage::Correct => "correct",
            Stage::Inpaint => "inpaint",
            Stage::Final => "final",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct MarOutcome {
    pub volume: Volume3D,
    pub report: String,
    pub evaluation: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub uncorrected: EvaluationReport,
    pub corrected: EvaluationReport,
    /// Largest jump across the shadow border of the inpainted data,
    /// relative to each view's dynamic range.
    pub seam: f64,
    /// The same jump minus the guide's own difference across the border.
    pub seam_excess: f64,
}

impl Evaluation {
    /// Relative reduction of the artifact-band RMSE.
    pub fn band_reduction(&self) -> f64 {
        1.0 - self.corrected.rmse_band / self.uncorrected.rmse_band
    }

    /// Relative change of the RMSE away from metal (positive is worse).
    pub fn outside_change(&self) -> f64 {
        self.corrected.rmse_outside_band / self.uncorrected.rmse_outside_band - 1.0
    }
}

/// Runs every stage.
pub fn run_mar(cfg: &PipelineConfig) -> Result<MarOutcome> {
    run_mar_from(cfg, Stage::Reconstruct)
}

/// Runs the stages from `from` onwards, loading the artifacts of earlier
/// stages from the output directory.
pub fn run_mar_from(cfg: &PipelineConfig, from: Stage) -> Result<MarOutcome> {
    Ok(run_stages(cfg, from, Stage::Evaluate)?.expect("evaluation stage yields an outcome"))
}

/// Runs stages `from..=until`; earlier artifacts are loaded from disk, later
/// stages are skipped. An outcome is returned only when `until` is the
/// evaluation stage.
pub fn run_stages(cfg: &PipelineConfig, from: Stage, until: Stage) -> Result<Option<MarOutcome>> {
    if until < from {
        return Err(Error::Config(format!("stage `{}` comes before `{}`", until.name(), from.name())));
    }
    let cfg = cfg.resolved()?;
    let grid = cfg.grid.build()?;
    fs::create_dir_all(&cfg.output.dir)?;
    let run = |s: Stage| s >= from;
    let a = |n: &str| cfg.artifact(n);

    let unc_sino = stage(
        "load",
        io::read_sinogram(&cfg.input_or_artifact(&cfg.inputs.unc_sinogram, artifacts::UNC_SINO)),
    )?;
    let geom = unc_sino.geometry().clone();
    let step = cfg.step(&grid);

    // uncorrected reconstruction
    let unc = if let Some(p) = &cfg.inputs.unc_volume {
        stage("load", io::read_volume(p))?
    } else if run(Stage::Reconstruct) {
        stage(
            "reconstruct",
            (|| {
                let v = fdk_reconstruct(&unc_sino, &grid, cfg.output.window)?;
                io::write_volume(&a(artifacts::UNC_RECON), &v)?;
                Ok(v)
            })(),
        )?
    } else {
        stage("load", io::read_volume(&a(artifacts::UNC_RECON)))?
    };
    if until == Stage::Reconstruct {
        return Ok(None);
    }

    // registration
    let (aligned, transform) = if run(Stage::Register) {
        stage(
            "register",
            (|| {
                let prior = io::read_volume(&cfg.input_or_artifact(&cfg.inputs.prior_volume, artifacts::PRIOR))?;
                let r = register(&unc, &prior, &cfg.registration.build(cfg.seed))?;
                let aligned = resample_rigid(&prior, &r.transform, unc.grid());
                io::write_volume(&a(artifacts::ALIGNED_PRIOR), &aligned)?;
                write_kv(
                    &a(artifacts::TRANSFORM),
                    &[
                        ("params", params_text(r.transform.params())),
                        ("objective", format!("{:?}", r.objective)),
                        ("swarm_objective", format!("{:?}", r.swarm.value)),
                    ],
                )?;
                Ok((aligned, r.transform))
            })(),
        )?
    } else if until > Stage::SegmentMetal {
        stage(
            "load",
            io::read_volume(&a(artifacts::ALIGNED_PRIOR)).and_then(|v| Ok((v, read_transform(&a(artifacts::TRANSFORM))?))),
        )?
    } else {
        // metal localisation alone does not need the prior
        (Volume3D::zeros(grid), RigidTransform::new([0.0; 3], [0.0; 3]))
    };
    if until == Stage::Register {
        return Ok(None);
    }

    // metal localisation
    let (metal_mask, metal_vol, shadow, rho, clusters) = if run(Stage::SegmentMetal) {
        stage(
            "segment-metal",
            (|| {
                let seg = segment_metal(&unc, &cfg.dbscan(&grid))?;
                if let Some(n) = cfg.metal.expected_clusters {
                    check_cluster_count(&seg, n)?;
                }
                let rho = match cfg.metal.rho {
                    Some(r) => r,
                    None => default_rho(&unc, &seg)?,
                };
                let metal_vol = metal_only_volume(&grid, &seg.mask, rho)?;
                let shadow = metal_shadow(&metal_vol, &geom, step)?;
                io::write_mask(&a(artifacts::METAL_MASK), &seg.mask)?;
                io::write_volume(&a(artifacts::METAL_ONLY), &metal_vol)?;
                io::write_shadow(&a(artifacts::SHADOW), &shadow)?;
                write_kv(
                    &a(artifacts::METAL_INFO),
                    &[
                        ("rho", format!("{rho:?}")),
                        ("clusters", seg.clusters.to_string()),
                        ("dense_threshold", format!("{:?}", seg.dense_threshold)),
                        ("metal_threshold", format!("{:?}", seg.metal_threshold)),
                    ],
                )?;
                Ok((seg.mask, metal_vol, shadow, rho, seg.clusters))
            })(),
        )?
    } else {
        stage(
            "load",
            (|| {
                let info = a(artifacts::METAL_INFO);
                Ok((
                    io::read_mask(&a(artifacts::METAL_MASK))?,
                    io::read_volume(&a(artifacts::METAL_ONLY))?,
                    io::read_shadow(&a(artifacts::SHADOW))?,
                    read_kv::<f64>(&info, "rho")?,
                    read_kv::<usize>(&info, "clusters")?,
                ))
            })(),
        )?
    };
    if until == Stage::SegmentMetal {
        return Ok(None);
    }

    let params = CorrectionParams {
        rho,
        h: cfg.correction.h,
        prior_trust: cfg.correction.prior_trust,
    };
    let corrected = if run(Stage::Correct) {
        stage(
            "correct",
            (|| {
                let c = build_inpainting_guide(&unc_sino, &unc, &aligned, &metal_vol, &shadow, step, &params)?;
                io::write_sinogram(&a(artifacts::CORRECTED_SINO), &c)?;
                Ok(c)
            })(),
        )?
    } else {
        stage("load", io::read_sinogram(&a(artifacts::CORRECTED_SINO)))?
    };
    if until == Stage::Correct {
        return Ok(None);
    }

    let inpainted = if run(Stage::Inpaint) {
        stage(
            "inpaint",
            (|| {
                let s = inpaint_sinogram(&unc_sino, &corrected, &shadow, cfg.inpaint)?;
                io::write_sinogram(&a(artifacts::INPAINTED_SINO), &s)?;
                Ok(s)
            })(),
        )?
    } else {
        stage("load", io::read_sinogram(&a(artifacts::INPAINTED_SINO)))?
    };
    if until == Stage::Inpaint {
        return Ok(None);
    }

    let volume = if run(Stage::Final) {
        stage(
            "final",
            (|| {
                let mut v = fdk_reconstruct(&inpainted, &grid, cfg.output.window)?;
                if cfg.output.reinsert_metal {
                    for (x, &m) in v.data_mut().iter_mut().zip(metal_mask.data()) {
                        if m {
                            *x = rho;
                        }
                    }
                }
                io::write_volume(&a(artifacts::FINAL), &v)?;
                Ok(v)
            })(),
        )?
    } else {
        stage("load", io::read_volume(&a(artifacts::FINAL)))?
    };
    if until == Stage::Final {
        return Ok(None);
    }

    let evaluation = stage(
        "evaluate",
        evaluate_against_truth(&cfg, &unc, &volume, &metal_mask, &unc_sino, &corrected, &inpainted, &shadow),
    )?;

    let mut report = String::new();
    let _ = writeln!(report, "# raymar report");
    let _ = writeln!(report, "resumed_from: {}", from.name());
    let _ = writeln!(report, "transform: {}", params_text(transform.params()));
    let _ = writeln!(report, "clusters: {clusters}");
    let _ = writeln!(report, "rho: {rho:?}");
    let _ = writeln!(report, "shadow_pixels: {}", shadow.count());
    if let Some(e) = &evaluation {
        for (prefix, r) in [("uncorrected", &e.uncorrected), ("corrected", &e.corrected)] {
            for line in r.to_text().lines() {
                let _ = writeln!(report, "{prefix}_{line}");
            }
        }
        let _ = writeln!(report, "band_rmse_reduction: {:.6}", e.band_reduction());
        let _ = writeln!(report, "outside_band_rmse_change: {:.6}", e.outside_change());
        let _ = writeln!(report, "seam_discontinuity: {:.6}", e.seam);
        let _ = writeln!(report, "seam_excess: {:.6}", e.seam_excess);
    }
    let _ = writeln!(report, "\n# resolved config\n{}", cfg.to_toml());
    fs::write(a(artifacts::REPORT), &report)?;
    Ok(Some(MarOutcome {
        volume,
        report,
        evaluation,
    }))
}

fn evaluate_against_truth(
    cfg: &PipelineConfig,
    unc: &Volume3D,
    corrected: &Volume3D,
    metal_mask: &BinaryMask3D,
    unc_sino: &Sinogram,
    guide: &Sinogram,
    inpainted: &Sinogram,
    shadow: &MetalShadowMask,
) -> Result<Option<Evaluation>> {
    let truth_path = cfg.input_or_artifact(&cfg.inputs.truth_volume, artifacts::TRUTH_MU);
    if !truth_path.exists() {
        return Ok(None);
    }
    let truth = io::read_volume(&truth_path)?;
    let metal_path = cfg.input_or_artifact(&cfg.inputs.truth_metal, artifacts::TRUTH_METAL);
    let truth_metal = if metal_path.exists() {
        io::read_mask(&metal_path)?
    } else {
        metal_mask.clone()
    };
    let band = ArtifactBandSpec {
        radius: cfg.output.band_radius,
    };
    Ok(Some(Evaluation {
        uncorrected: EvaluationReport::compute(unc, &truth, &truth_metal, &band, Some(metal_mask))?,
        corrected: EvaluationReport::compute(corrected, &truth, &truth_metal, &band, Some(metal_mask))?,
        seam: seam_discontinuity(unc_sino, inpainted, shadow)?,
        seam_excess: seam_excess(unc_sino, guide, inpainted, shadow)?,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    /// Fixed z: rows follow y, columns follow x.
    Transverse,
    /// Fixed y: rows follow z, columns follow x.
    Coronal,
    /// Fixed x: rows follow z, columns follow y.
    Sagittal,
}

impl FromStr for SliceAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transverse" | "axial" | "z" => Ok(SliceAxis::Transverse),
            "coronal" | "y" => Ok(SliceAxis::Coronal),
            "sagittal" | "x" => Ok(SliceAxis::Sagittal),
            _ => Err(Error::Config(format!("unknown slice axis `{s}`"))),
        }
    }
}

/// 8-bit image of one slice with linear windowing: `lo` maps to 0 and `hi`
/// to 255, values outside are clamped. Returns `(width, height, pixels)`.
pub fn slice_image(vol: &Volume3D, axis: SliceAxis, index: usize, window: [f64; 2]) -> Result<(usize, usize, Vec<u8>)> {
    let [lo, hi] = window;
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("window", format!("[{lo}, {hi}] needs lo < hi")));
    }
    let [nx, ny, nz] = vol.grid().dims;
    let (limit, w, h) = match axis {
        SliceAxis::Transverse => (nz, nx, ny),
        SliceAxis::Coronal => (ny, nx, nz),
        SliceAxis::Sagittal => (nx, ny, nz),
    };
    if index >= limit {
        return Err(Error::OutOfBounds(format!("slice {index} of {limit}")));
    }
    let mut px = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let v = match axis {
                SliceAxis::Transverse => vol.get(c, r, index),
                SliceAxis::Coronal => vol.get(c, index, r),
                SliceAxis::Sagittal => vol.get(index, c, r),
            };
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            px.push((t * 255.0).round() as u8);
        }
    }
    Ok((w, h, px))
}

/// Writes binary PGM images `<prefix>_<axis>_<index>.pgm` into `dir`.
pub fn export_slices(
    vol: &Volume3D,
    axis: SliceAxis,
    indices: &[usize],
    window: [f64; 2],
    dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let tag = match axis {
        SliceAxis::Transverse => "transverse",
        SliceAxis::Coronal => "coronal",
        SliceAxis::Sagittal => "sagittal",
    };
    indices
        .iter()
        .map(|&i| {
            let (w, h, px) = slice_image(vol, axis, i, window)?;
            let path = dir.join(format!("{prefix}_{tag}_{i:04}.pgm"));
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&px);
            fs::write(&path, bytes)?;
            Ok(path)
        })
        .collect()
}
