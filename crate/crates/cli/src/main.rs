//! `raymar` — command-line front end of the metal artifact reduction
//! pipeline. Every stage is a subcommand working on the artifacts in the
//! output directory; `mar` runs them all.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use raymar::fdk::{fdk_reconstruct, RampWindow};
use raymar::io;
use raymar::pipeline::{export_slices, run_stages, simulate_case, PipelineConfig, SliceAxis, Stage};
use raymar::Error;

#[derive(Parser, Debug)]
#[command(name = "raymar", version, about = "Prior-scan metal artifact reduction for cone-beam CT")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides `threads`).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a phantom case: implant scan, moved prior scan and ground truth.
    Simulate {
        /// Incident photons per detector bin (overrides `simulation.photons`).
        #[arg(long)]
        photons: Option<f64>,
    },
    /// FDK reconstruction of the uncorrected sinogram, or of any sinogram.
    Reconstruct {
        /// Reconstruct this sinogram instead of running the pipeline stage.
        #[arg(long)]
        sinogram: Option<PathBuf>,
        /// Destination of the stand-alone reconstruction.
        #[arg(long, requires = "sinogram")]
        volume: Option<PathBuf>,
        /// ram-lak or shepp-logan (overrides `output.window`).
        #[arg(long)]
        window: Option<String>,
    },
    /// Align the prior volume to the uncorrected reconstruction.
    Register,
    /// Segment implants and compute their detector shadow.
    SegmentMetal {
        /// Metal attenuation in mm⁻¹ (overrides `metal.rho`).
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Correct every ray in the metal shadow.
    Correct,
    /// Blend the corrected rays into the measured projections.
    Inpaint,
    /// Reconstruct the final volume and report metrics against ground truth.
    Evaluate,
    /// Run the whole pipeline.
    Mar {
        /// Reuse artifacts of the stages before this one.
        #[arg(long, default_value = "reconstruct")]
        resume_from: String,
        /// Paste the metal segmentation back at ρ.
        #[arg(long)]
        reinsert_metal: bool,
    },
    /// Write 8-bit PGM slices of a volume.
    Export {
        #[arg(long)]
        volume: PathBuf,
        /// transverse, coronal or sagittal.
        #[arg(long, default_value = "transverse")]
        axis: String,
        /// Slice indices; default the middle slice.
        #[arg(long, value_delimiter = ',')]
        indices: Vec<usize>,
        /// Display window `lo,hi` in mm⁻¹.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 0.05])]
        window: Vec<f64>,
        #[arg(long, default_value = "slice")]
        prefix: String,
    },
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn stage_only(cfg: &PipelineConfig, stage: Stage) -> anyhow::Result<()> {
    run_stages(cfg, stage, stage)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Simulate { photons } => {
            if photons.is_some() {
                cfg.simulation.photons = photons;
            }
            let case = simulate_case(&cfg)?;
            println!(
                "simulated {} rays, {} metal voxels into {}",
                case.unc_sino.data().len(),
                case.truth_metal.count(),
                cfg.output.dir.display()
            );
        }
        Command::Reconstruct { sinogram, volume, window } => {
            if let Some(w) = window {
                cfg.output.window = w.parse::<RampWindow>()?;
            }
            match sinogram {
                Some(s) => {
                    let sino = io::read_sinogram(&s)?;
                    let v = fdk_reconstruct(&sino, &cfg.grid.build()?, cfg.output.window)?;
                    let dst = volume.unwrap_or_else(|| s.with_extension("recon.hdr"));
                    io::write_volume(&dst, &v)?;
                    println!("wrote {}", dst.display());
                }
                None => stage_only(&cfg, Stage::Reconstruct)?,
            }
        }
        Command::Register => stage_only(&cfg, Stage::Register)?,
        Command::SegmentMetal { rho } => {
            if rho.is_some() {
                cfg.metal.rho = rho;
            }
            stage_only(&cfg, Stage::SegmentMetal)?;
        }
        Command::Correct => stage_only(&cfg, Stage::Correct)?,
        Command::Inpaint => stage_only(&cfg, Stage::Inpaint)?,
        Command::Evaluate => {
            let out = run_stages(&cfg, Stage::Final, Stage::Evaluate)?.expect("evaluation yields an outcome");
            print!("{}", out.report);
        }
        Command::Mar {
            resume_from,
            reinsert_metal,
        } => {
            cfg.output.reinsert_metal |= reinsert_metal;
            let from: Stage = resume_from.parse()?;
            let out = run_stages(&cfg, from, Stage::Evaluate)?.expect("evaluation yields an outcome");
            print!("{}", out.report);
        }
        Command::Export {
            volume,
            axis,
            indices,
            window,
            prefix,
        } => {
            let vol = io::read_volume(&volume)?;
            let axis: SliceAxis = axis.parse()?;
            let dims = vol.grid().dims;
            let indices = if indices.is_empty() {
                let n = match axis {
                    SliceAxis::Transverse => dims[2],
                    SliceAxis::Coronal => dims[1],
                    SliceAxis::Sagittal => dims[0],
                };
                vec![n / 2]
            } else {
                indices
            };
            for p in export_slices(&vol, axis, &indices, [window[0], window[1]], &cfg.output.dir, &prefix)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

/// Exit status per error class.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::root) {
        Some(Error::Config(_) | Error::Invalid { .. }) => 2,
        Some(Error::Io(_) | Error::Format { .. }) => 3,
        Some(Error::NoMetalFound) => 4,
        Some(Error::NotConverged { .. } | Error::UnanchoredRegion) => 5,
        Some(_) => 1,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
