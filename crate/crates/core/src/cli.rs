//! Command definitions and runners for the `drape` binary.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or
//! processing error, 4 numerical divergence. Configs are JSON and carry
//! every seed and weight explicitly; a config file is a complete record
//! of a run.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use glam::DVec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FusionConfig, FusionError};
use crate::image::{write_pfm, write_ppm, AttrKind, Owner};
use crate::mesh::{load_obj, save_obj};
use crate::pipeline::{self, PipelineError};
use crate::raster::{
    build_camera_rig, rasterize_template, render_attribute, rgb_encode_normals,
    rgb_encode_positions, PositionBounds,
};
use crate::synth::{
    generate_dataset, suggest_bounds, BodyRig, DatasetManifest, DeformationModel, GarmentSpec,
    PoseSampling, SynthError,
};
use crate::transfer::{train, TrainingConfig, TransferNet, TransferNetConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Maps pipeline errors, routing fusion divergence to its own exit code.
fn run_err(e: PipelineError) -> CliError {
    match e {
        PipelineError::Fusion(FusionError::Diverged { .. }) => CliError::Divergence(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "drape",
    about = "Skinning-free garment deformation via attribute-image transfer and multimodal fusion"
)]
pub struct Cli {
    /// Worker threads. Every stage currently runs on the deterministic
    /// single-threaded path; values above 1 are accepted and capped.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON config.
    SynthGen(SynthGenArgs),
    /// Render one attribute image of a deformed mesh over the template
    /// projection.
    Render(RenderArgs),
    /// Train a transfer network on a dataset manifest.
    Train(TrainArgs),
    /// Run both trained networks on one sample's images.
    Transfer(TransferArgs),
    /// Recover a deformed mesh from position and normal images.
    Fuse(FuseArgs),
    /// Evaluate predicted meshes against ground truth.
    Eval(EvalArgs),
    /// Full run: synth-gen, train x2, transfer, fuse, eval.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub deformed: PathBuf,
    /// `front` or `back`.
    #[arg(long)]
    pub view: String,
    /// `position` or `normal`.
    #[arg(long)]
    pub attr: String,
    /// JSON file with {"min": [x,y,z], "max": [x,y,z]}; required for
    /// position renders.
    #[arg(long)]
    pub bounds: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write an 8-bit PPM preview next to the PFM.
    #[arg(long, default_value_t = false)]
    pub ppm: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset manifest JSON.
    #[arg(long)]
    pub data: PathBuf,
    /// `position` or `normal`.
    #[arg(long)]
    pub modality: String,
    /// Checkpoint base path (writes .bin/.json/.net.json/.history.json).
    #[arg(long)]
    pub ckpt_out: PathBuf,
    /// Resume parameters from an existing checkpoint base.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long)]
    pub ckpt_pos: PathBuf,
    #[arg(long)]
    pub ckpt_norm: PathBuf,
    /// Directory holding template_{attr}_{view}.pfm and
    /// silhouette_{view}.pgm (a dataset root qualifies).
    #[arg(long)]
    pub template_imgs: PathBuf,
    /// Directory holding body_{attr}_{view}.pfm (a dataset sample
    /// directory qualifies).
    #[arg(long)]
    pub body_imgs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Directory with position images (pred_/garment_/bare naming).
    #[arg(long)]
    pub pos_imgs: PathBuf,
    /// Directory with normal images.
    #[arg(long)]
    pub norm_imgs: PathBuf,
    #[arg(long)]
    pub template: PathBuf,
    /// Posed body mesh in the same root-normalized space as the images.
    #[arg(long)]
    pub body: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub body_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Bounds in a synth config: the literal string "auto" computes the
/// enclosing box of all generated geometry inflated by 10%.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundsSpec {
    Named(String),
    Explicit { min: [f64; 3], max: [f64; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthGenConfig {
    pub schema_version: u32,
    pub resolution: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rig: BodyRig,
    pub garment: GarmentSpec,
    pub model: DeformationModel,
    pub sampling: PoseSampling,
    pub bounds: BoundsSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCliConfig {
    pub schema_version: u32,
    pub net: TransferNetConfig,
    pub train: TrainingConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuseCliConfig {
    pub schema_version: u32,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub fusion: FusionConfig,
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Resolves bounds and generates the dataset; shared with the pipeline.
pub fn run_synth_gen(
    config: &SynthGenConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, PipelineError> {
    let bounds = resolve_bounds(config)?;
    let template = crate::synth::make_garment_template(
        &config.garment,
        &config.rig,
        config.model.collision_margin,
    )?;
    let cameras = build_camera_rig(&template.mesh, config.resolution)?;
    let manifest = generate_dataset(
        out_dir,
        config.n_train,
        config.n_test,
        &config.model,
        &config.rig,
        &config.garment,
        &config.sampling,
        &cameras,
        &bounds,
    )?;
    Ok(manifest)
}

fn resolve_bounds(config: &SynthGenConfig) -> Result<PositionBounds, PipelineError> {
    match &config.bounds {
        BoundsSpec::Explicit { min, max } => Ok(PositionBounds::new(
            DVec3::from_array(*min),
            DVec3::from_array(*max),
        )?),
        BoundsSpec::Named(name) if name == "auto" => Ok(suggest_bounds(
            &config.rig,
            &config.garment,
            &config.model,
            &config.sampling,
            config.n_train,
            config.n_test,
        )?),
        BoundsSpec::Named(other) => Err(PipelineError::Synth(SynthError::Io {
            path: format!("bounds spec `{other}` (expected \"auto\" or an object)"),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "bad bounds"),
        })),
    }
}

pub fn cmd_synth_gen(args: &SynthGenArgs) -> Result<(), CliError> {
    let config: SynthGenConfig = read_config(&args.config)?;
    if config.schema_version != 1 {
        return Err(config_err(format!(
            "unsupported schema_version {}",
            config.schema_version
        )));
    }
    if let BoundsSpec::Named(name) = &config.bounds {
        if name != "auto" {
            return Err(config_err(format!(
                "bounds must be \"auto\" or an explicit box, got `{name}`"
            )));
        }
    }
    run_synth_gen(&config, &args.out).map_err(run_err)?;
    Ok(())
}

pub fn cmd_render(args: &RenderArgs) -> Result<(), CliError> {
    let kind = match args.attr.as_str() {
        "position" => AttrKind::Position,
        "normal" => AttrKind::Normal,
        other => return Err(config_err(format!("unknown attribute `{other}`"))),
    };
    if args.view != crate::raster::FRONT && args.view != crate::raster::BACK {
        return Err(config_err(format!("unknown view `{}`", args.view)));
    }
    let template = load_obj(&args.template).map_err(config_err)?;
    let deformed = load_obj(&args.deformed).map_err(config_err)?;
    if deformed.vertices.len() != template.vertices.len() {
        return Err(config_err(format!(
            "deformed mesh has {} vertices, template has {}",
            deformed.vertices.len(),
            template.vertices.len()
        )));
    }
    let rig = build_camera_rig(&template, args.resolution).map_err(data_err)?;
    let (raster, _) = rasterize_template(&template, &rig, &args.view).map_err(data_err)?;
    let attrs = match kind {
        AttrKind::Position => {
            let bounds_path = args
                .bounds
                .as_ref()
                .ok_or_else(|| config_err("position renders require --bounds"))?;
            let bounds: PositionBounds = read_config(bounds_path)?;
            rgb_encode_positions(&deformed.vertices, &bounds).map_err(data_err)?
        }
        AttrKind::Normal => rgb_encode_normals(&crate::mesh::vertex_normals(&deformed)),
    };
    let img = render_attribute(&raster, &template.faces, &attrs, kind, Owner::Garment)
        .map_err(data_err)?;
    write_pfm(&img, &args.out).map_err(data_err)?;
    if args.ppm {
        write_ppm(&img, args.out.with_extension("ppm")).map_err(data_err)?;
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let config: TrainCliConfig = read_config(&args.config)?;
    let modality = match args.modality.as_str() {
        "position" => AttrKind::Position,
        "normal" => AttrKind::Normal,
        other => return Err(config_err(format!("unknown modality `{other}`"))),
    };
    let (manifest, dataset_dir) = pipeline::load_manifest(&args.data).map_err(config_err)?;
    let samples = pipeline::load_training_set(
        &dataset_dir,
        &manifest,
        modality,
        &manifest.train,
        config.net.patch_size,
    )
    .map_err(run_err)?;
    let mut net = TransferNet::new(config.net.clone(), config.train.seed).map_err(config_err)?;
    if let Some(resume) = &args.resume {
        net.load(resume).map_err(config_err)?;
    }
    let mut train_cfg = config.train.clone();
    train_cfg.modality = modality;
    let report = train(&mut net, &samples, &train_cfg).map_err(data_err)?;
    pipeline::save_net(&net, &args.ckpt_out).map_err(run_err)?;
    pipeline::write_json(&args.ckpt_out.with_extension("history.json"), &report)
        .map_err(run_err)?;
    Ok(())
}

pub fn cmd_transfer(args: &TransferArgs) -> Result<(), CliError> {
    let net_pos = pipeline::load_net(&args.ckpt_pos).map_err(config_err)?;
    let net_norm = pipeline::load_net(&args.ckpt_norm).map_err(config_err)?;
    std::fs::create_dir_all(&args.out).map_err(data_err)?;
    for (net, kind) in [(&net_pos, AttrKind::Position), (&net_norm, AttrKind::Normal)] {
        for view in [crate::raster::FRONT, crate::raster::BACK] {
            let mask_path = args.template_imgs.join(format!("silhouette_{view}.pgm"));
            let mask = crate::image::read_pgm(&mask_path, view)
                .map_err(|e| config_err(format!("{}: {e}", mask_path.display())))?;
            let tmpl = read_image_any(
                &args.template_imgs,
                &[
                    format!("template_{kind}_{view}.pfm"),
                    format!("{kind}_{view}.pfm"),
                ],
                view,
                kind,
                Owner::Garment,
            )?;
            let body = read_image_any(
                &args.body_imgs,
                &[format!("body_{kind}_{view}.pfm")],
                view,
                kind,
                Owner::Body,
            )?;
            let pred = net.forward_transfer(&tmpl, &body, &mask).map_err(data_err)?;
            write_pfm(&pred, args.out.join(format!("pred_{kind}_{view}.pfm")))
                .map_err(data_err)?;
        }
    }
    Ok(())
}

fn read_image_any(
    dir: &Path,
    names: &[String],
    view: &str,
    kind: AttrKind,
    owner: Owner,
) -> Result<crate::image::AttributeImage, CliError> {
    for name in names {
        let path = dir.join(name);
        if path.exists() {
            return crate::image::read_pfm(&path, view, kind, owner)
                .map_err(|e| data_err(format!("{}: {e}", path.display())));
        }
    }
    Err(config_err(format!(
        "none of {names:?} found under {}",
        dir.display()
    )))
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<(), CliError> {
    let config: FuseCliConfig = read_config(&args.config)?;
    let bounds = PositionBounds::new(
        DVec3::from_array(config.bounds_min),
        DVec3::from_array(config.bounds_max),
    )
    .map_err(config_err)?;
    let template = load_obj(&args.template).map_err(config_err)?;
    let body = load_obj(&args.body).map_err(config_err)?;
    std::fs::create_dir_all(&args.out).map_err(data_err)?;
    let out = pipeline::fuse_from_dirs(
        &args.pos_imgs,
        &args.norm_imgs,
        &template,
        &body,
        &bounds,
        &config.fusion,
    )
    .map_err(run_err)?;
    save_obj(&out.mesh, args.out.join("deformed.obj")).map_err(data_err)?;
    pipeline::write_json(&args.out.join("trace.json"), &out.trace).map_err(run_err)?;
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let report = pipeline::evaluate_dirs(&args.pred_dir, &args.gt_dir, &args.body_dir)
        .map_err(run_err)?;
    pipeline::write_json(&args.report, &report).map_err(run_err)?;
    Ok(())
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<(), CliError> {
    let config: pipeline::PipelineConfig = read_config(&args.config)?;
    if config.schema_version != 1 {
        return Err(config_err(format!(
            "unsupported schema_version {}",
            config.schema_version
        )));
    }
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.out_dir));
    pipeline::run_pipeline(&config, &out_dir).map_err(run_err)?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(config_err("--threads must be at least 1"));
    }
    match &cli.command {
        Command::SynthGen(args) => cmd_synth_gen(args),
        Command::Render(args) => cmd_render(args),
        Command::Train(args) => cmd_train(args),
        Command::Transfer(args) => cmd_transfer(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Pipeline(args) => cmd_pipeline(args),
    }
}
