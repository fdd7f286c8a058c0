//! Batch orchestration: assembling training sets from dataset manifests,
//! running transfer inference, fusing frames, and evaluating directories
//! of meshes. The CLI and the runnable examples are thin wrappers over
//! these functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glam::DMat3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{fuse, FusionConfig, FusionError, FusionOutput};
use crate::geom::build_bvh;
use crate::image::{read_pfm, read_pgm, write_pfm, AttrKind, AttributeImage, Owner, Silhouette};
use crate::mesh::{apply_root_normalization, edge_set, load_obj, save_obj, RootTransform, TriMesh};
use crate::metrics::{collision_rate, hausdorff, rmse, sted};
use crate::raster::{PositionBounds, BACK, FRONT};
use crate::synth::{DatasetManifest, SampleRecord};
use crate::tensor::{Tape, Tensor};
use crate::transfer::{
    image_patches, image_tensor, tensor_to_image, train, TrainReport, TrainSample,
    TrainingConfig, TransferNet, TransferNetConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing image `{key}` in sample {id}")]
    MissingImage { key: String, id: usize },
    #[error("no image named any of {tried:?} under {dir}")]
    ImageNotFound { tried: Vec<String>, dir: String },
    #[error("directory {dir} has {got} meshes, expected {expected}")]
    FrameCountMismatch {
        dir: String,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Transfer(#[from] crate::transfer::TransferError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metric(#[from] crate::metrics::MetricError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Checkpoint(#[from] crate::tensor::CheckpointError),
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn root_of(record: &SampleRecord) -> RootTransform {
    RootTransform {
        rotation: DMat3::from_cols_array_2d(&record.root_rotation),
        translation: glam::DVec3::from_array(record.root_translation),
    }
}

/// Loads the per-view training samples of one split for one modality.
/// Each (pose, view) pair becomes one sample: garment template image and
/// posed body image in, ground-truth garment image as the target, masked
/// by the template silhouette.
pub fn load_training_set(
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    modality: AttrKind,
    records: &[SampleRecord],
    patch: usize,
) -> Result<Vec<TrainSample>, PipelineError> {
    let mut masks: BTreeMap<String, Silhouette> = BTreeMap::new();
    for view in [FRONT, BACK] {
        let rel = &manifest.silhouettes[view];
        masks.insert(view.to_string(), read_pgm(dataset_dir.join(rel), view)?);
    }
    let mut samples = Vec::with_capacity(records.len() * 2);
    for record in records {
        for view in [FRONT, BACK] {
            let tmpl_key = format!("{modality}_{view}");
            let tmpl_rel = manifest
                .template_images
                .get(&tmpl_key)
                .ok_or_else(|| PipelineError::MissingImage {
                    key: tmpl_key.clone(),
                    id: record.id,
                })?;
            let body_key = format!("body_{modality}_{view}");
            let target_key = format!("garment_{modality}_{view}");
            let body_rel =
                record
                    .images
                    .get(&body_key)
                    .ok_or_else(|| PipelineError::MissingImage {
                        key: body_key.clone(),
                        id: record.id,
                    })?;
            let target_rel =
                record
                    .images
                    .get(&target_key)
                    .ok_or_else(|| PipelineError::MissingImage {
                        key: target_key.clone(),
                        id: record.id,
                    })?;
            let template_img =
                read_pfm(dataset_dir.join(tmpl_rel), view, modality, Owner::Garment)?;
            let body_img = read_pfm(dataset_dir.join(body_rel), view, modality, Owner::Body)?;
            let target_img =
                read_pfm(dataset_dir.join(target_rel), view, modality, Owner::Garment)?;
            samples.push(TrainSample::new(
                &template_img,
                &body_img,
                &target_img,
                &masks[view],
                patch,
            ));
        }
    }
    Ok(samples)
}

/// Trained-network bundle on disk: checkpoint plus an architecture
/// sidecar `<base>.net.json`.
pub fn save_net(net: &TransferNet, base: &Path) -> Result<(), PipelineError> {
    net.save(base)?;
    let sidecar = base.with_extension("net.json");
    write_json(&sidecar, &net.cfg)
}

pub fn load_net(base: &Path) -> Result<TransferNet, PipelineError> {
    let sidecar = base.with_extension("net.json");
    let cfg: TransferNetConfig = read_json(&sidecar)?;
    let mut net = TransferNet::new(cfg, 0)?;
    net.load(base)?;
    Ok(net)
}

/// Runs both transfer networks on one sample's template/body images and
/// writes the four predicted images (position/normal x front/back) as
/// `pred_{kind}_{view}.pfm` under `out_dir`.
pub fn transfer_sample(
    net_pos: &TransferNet,
    net_norm: &TransferNet,
    dataset_dir: &Path,
    manifest: &DatasetManifest,
    record: &SampleRecord,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();
    for (net, kind) in [(net_pos, AttrKind::Position), (net_norm, AttrKind::Normal)] {
        for view in [FRONT, BACK] {
            let mask = read_pgm(dataset_dir.join(&manifest.silhouettes[view]), view)?;
            let tmpl = read_pfm(
                dataset_dir.join(&manifest.template_images[&format!("{kind}_{view}")]),
                view,
                kind,
                Owner::Garment,
            )?;
            let body = read_pfm(
                dataset_dir.join(&record.images[&format!("body_{kind}_{view}")]),
                view,
                kind,
                Owner::Body,
            )?;
            let pred = net.forward_transfer(&tmpl, &body, &mask)?;
            let path = out_dir.join(format!("pred_{kind}_{view}.pfm"));
            write_pfm(&pred, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Batched inference without the per-call parameter rebinding overhead:
/// runs one network over many (template, body) image pairs.
pub fn predict_images(
    net: &TransferNet,
    pairs: &[(AttributeImage, AttributeImage, Silhouette)],
) -> Result<Vec<AttributeImage>, PipelineError> {
    let mut out = Vec::with_capacity(pairs.len());
    for (tmpl, body, mask) in pairs {
        let mut tape = Tape::new();
        let bound = tape.params(&net.params);
        let gp = tape.input(image_patches(tmpl, net.cfg.patch_size));
        let bp = tape.input(image_patches(body, net.cfg.patch_size));
        let gi = tape.input(image_tensor(tmpl));
        let id = net.forward_on_tape(&mut tape, &bound, gp, bp, gi, None)?;
        out.push(tensor_to_image(
            tape.value(id),
            mask,
            &tmpl.view,
            tmpl.kind,
            tmpl.owner,
        ));
    }
    Ok(out)
}

/// Searches a directory for `{prefix}{kind}_{view}.pfm`, trying the
/// prediction prefix first, then the dataset ground-truth prefix, then a
/// bare name.
pub fn find_attribute_image(
    dir: &Path,
    kind: AttrKind,
    view: &str,
) -> Result<AttributeImage, PipelineError> {
    let names = [
        format!("pred_{kind}_{view}.pfm"),
        format!("garment_{kind}_{view}.pfm"),
        format!("{kind}_{view}.pfm"),
    ];
    for name in &names {
        let path = dir.join(name);
        if path.exists() {
            return Ok(read_pfm(path, view, kind, Owner::Garment)?);
        }
    }
    Err(PipelineError::ImageNotFound {
        tried: names.to_vec(),
        dir: dir.display().to_string(),
    })
}

/// Fuses one frame from image directories. Returns the fusion output;
/// the caller decides where meshes and traces go.
pub fn fuse_from_dirs(
    pos_dir: &Path,
    norm_dir: &Path,
    template: &TriMesh,
    body: &TriMesh,
    bounds: &PositionBounds,
    cfg: &FusionConfig,
) -> Result<FusionOutput, PipelineError> {
    let pos_imgs = vec![
        find_attribute_image(pos_dir, AttrKind::Position, FRONT)?,
        find_attribute_image(pos_dir, AttrKind::Position, BACK)?,
    ];
    let norm_imgs = vec![
        find_attribute_image(norm_dir, AttrKind::Normal, FRONT)?,
        find_attribute_image(norm_dir, AttrKind::Normal, BACK)?,
    ];
    Ok(fuse(&pos_imgs, &norm_imgs, template, body, bounds, cfg)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEval {
    pub name: String,
    pub rmse_mm: f64,
    pub hausdorff_mm: f64,
    pub collision_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub frames: Vec<FrameEval>,
    pub sted: f64,
    pub sted_spatial: f64,
    pub sted_temporal: f64,
    pub rmse_mean_mm: f64,
    pub hausdorff_max_mm: f64,
    pub collision_mean: f64,
}

fn sorted_objs(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "obj"))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Evaluates a directory of predicted meshes against ground truth, with
/// per-frame bodies for the collision diagnostic. Frames are matched by
/// sorted file name.
pub fn evaluate_dirs(
    pred_dir: &Path,
    gt_dir: &Path,
    body_dir: &Path,
) -> Result<EvalReport, PipelineError> {
    let preds = sorted_objs(pred_dir)?;
    let gts = sorted_objs(gt_dir)?;
    let bodies = sorted_objs(body_dir)?;
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(PipelineError::FrameCountMismatch {
            dir: pred_dir.display().to_string(),
            got: preds.len(),
            expected: gts.len(),
        });
    }
    if bodies.len() != preds.len() {
        return Err(PipelineError::FrameCountMismatch {
            dir: body_dir.display().to_string(),
            got: bodies.len(),
            expected: preds.len(),
        });
    }
    let mut pred_meshes = Vec::with_capacity(preds.len());
    let mut gt_meshes = Vec::with_capacity(gts.len());
    let mut frames = Vec::with_capacity(preds.len());
    for ((pred_path, gt_path), body_path) in preds.iter().zip(&gts).zip(&bodies) {
        let pred = load_obj(pred_path)?;
        let gt = load_obj(gt_path)?;
        let body = load_obj(body_path)?;
        let bvh = build_bvh(&body)?;
        frames.push(FrameEval {
            name: pred_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            rmse_mm: rmse(&pred, &gt)?,
            hausdorff_mm: hausdorff(&pred, &gt)?,
            collision_fraction: collision_rate(&pred, &bvh),
        });
        pred_meshes.push(pred);
        gt_meshes.push(gt);
    }
    let edges = edge_set(&gt_meshes[0]);
    let (sted_total, sted_spatial, sted_temporal) = sted(&pred_meshes, &gt_meshes, &edges)?;
    let rmse_mean = frames.iter().map(|f| f.rmse_mm).sum::<f64>() / frames.len() as f64;
    let hausdorff_max = frames.iter().map(|f| f.hausdorff_mm).fold(0.0, f64::max);
    let collision_mean =
        frames.iter().map(|f| f.collision_fraction).sum::<f64>() / frames.len() as f64;
    Ok(EvalReport {
        schema_version: 1,
        frames,
        sted: sted_total,
        sted_spatial,
        sted_temporal,
        rmse_mean_mm: rmse_mean,
        hausdorff_max_mm: hausdorff_max,
        collision_mean,
    })
}

/// Complete pipeline configuration: every stage's settings plus explicit
/// seeds, so a config file is a full record of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub out_dir: String,
    pub synth: crate::cli::SynthGenConfig,
    pub net_position: TransferNetConfig,
    pub net_normal: TransferNetConfig,
    pub train_position: TrainingConfig,
    pub train_normal: TrainingConfig,
    pub fusion: FusionConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub schema_version: u32,
    pub dataset_dir: String,
    pub ckpt_position: String,
    pub ckpt_normal: String,
    pub final_train_loss_position: f32,
    pub final_train_loss_normal: f32,
    pub report: EvalReport,
    pub elapsed_seconds: f64,
}

/// End-to-end run: synth-gen, train both networks, transfer the test
/// split, fuse every test frame, evaluate. Returns the summary that is
/// also written to `<out_dir>/summary.json`.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<PipelineSummary, PipelineError> {
    let started = std::time::Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    // Stage 1: dataset.
    let dataset_dir = out_dir.join("dataset");
    let manifest = crate::cli::run_synth_gen(&config.synth, &dataset_dir)?;

    // Stage 2: train both modalities.
    let mut report_pos = TrainReport {
        loss_history: vec![],
        iterations: 0,
    };
    let mut report_norm = report_pos.clone();
    let ckpt_pos = out_dir.join("ckpt_position");
    let ckpt_norm = out_dir.join("ckpt_normal");
    for (net_cfg, train_cfg, base, report_slot, modality) in [
        (
            &config.net_position,
            &config.train_position,
            &ckpt_pos,
            &mut report_pos,
            AttrKind::Position,
        ),
        (
            &config.net_normal,
            &config.train_normal,
            &ckpt_norm,
            &mut report_norm,
            AttrKind::Normal,
        ),
    ] {
        let samples = load_training_set(
            &dataset_dir,
            &manifest,
            modality,
            &manifest.train,
            net_cfg.patch_size,
        )?;
        let mut net = TransferNet::new(net_cfg.clone(), train_cfg.seed)?;
        let mut cfg = train_cfg.clone();
        cfg.modality = modality;
        *report_slot = train(&mut net, &samples, &cfg)?;
        save_net(&net, base)?;
        write_json(&base.with_extension("history.json"), report_slot)?;
    }
    let net_pos = load_net(&ckpt_pos)?;
    let net_norm = load_net(&ckpt_norm)?;

    // Stage 3 + 4: transfer and fuse every test frame.
    let template = load_obj(dataset_dir.join(&manifest.template_mesh))?;
    let fused_dir = out_dir.join("fused");
    let gt_dir = out_dir.join("gt");
    let body_dir = out_dir.join("bodies");
    for dir in [&fused_dir, &gt_dir, &body_dir] {
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    for record in &manifest.test {
        let pred_dir = out_dir.join(format!("pred/{:04}", record.id));
        transfer_sample(&net_pos, &net_norm, &dataset_dir, &manifest, record, &pred_dir)?;

        let root = root_of(record);
        let body_world = load_obj(dataset_dir.join(&record.body_mesh))?;
        let body_local = apply_root_normalization(&body_world, &root);
        let fused = fuse_from_dirs(
            &pred_dir,
            &pred_dir,
            &template,
            &body_local,
            &manifest.bounds,
            &config.fusion,
        )?;
        // Back to world space for evaluation against the stored GT.
        let world = TriMesh::new(
            fused.mesh.vertices.iter().map(|&v| root.apply(v)).collect(),
            fused.mesh.faces.clone(),
            format!("fused_{:04}", record.id),
        );
        save_obj(&world, fused_dir.join(format!("{:04}.obj", record.id)))?;
        write_json(
            &fused_dir.join(format!("{:04}.trace.json", record.id)),
            &fused.trace,
        )?;
        std::fs::copy(
            dataset_dir.join(&record.gt_mesh),
            gt_dir.join(format!("{:04}.obj", record.id)),
        )
        .map_err(|source| PipelineError::Io {
            path: record.gt_mesh.clone(),
            source,
        })?;
        std::fs::copy(
            dataset_dir.join(&record.body_mesh),
            body_dir.join(format!("{:04}.obj", record.id)),
        )
        .map_err(|source| PipelineError::Io {
            path: record.body_mesh.clone(),
            source,
        })?;
    }

    // Stage 5: evaluate.
    let report = evaluate_dirs(&fused_dir, &gt_dir, &body_dir)?;
    let summary = PipelineSummary {
        schema_version: 1,
        dataset_dir: dataset_dir.display().to_string(),
        ckpt_position: ckpt_pos.display().to_string(),
        ckpt_normal: ckpt_norm.display().to_string(),
        final_train_loss_position: report_pos.loss_history.last().copied().unwrap_or(0.0),
        final_train_loss_normal: report_norm.loss_history.last().copied().unwrap_or(0.0),
        report,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Exposes manifest loading for binaries and examples.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf), PipelineError> {
    let manifest = DatasetManifest::load(path)?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((manifest, dir))
}

/// Quick helper for examples/tests: the mean parameter magnitude, a cheap
/// fingerprint that training actually changed the network.
pub fn param_fingerprint(tensors: &[&Tensor]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in tensors {
        for v in &t.data {
            sum += v.abs() as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}
