//! Trains the position-image transfer network on a small synthetic set
//! and prints the loss curve. The normal network trains identically with
//! `--modality normal` data; the two never share parameters.
//!
//! Run with: cargo run --release --example train_transfer

use drape::image::AttrKind;
use drape::pipeline::load_training_set;
use drape::raster::build_camera_rig;
use drape::synth::{
    default_rig, generate_dataset, make_garment_template, suggest_bounds, DeformationModel,
    GarmentSpec, GarmentTopology, PoseSampling,
};
use drape::transfer::{train, TrainingConfig, TransferNet, TransferNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("drape_train_example");

    let rig = default_rig();
    let spec = GarmentSpec {
        topology: GarmentTopology::Tube,
        rings: 16,
        segments: 24,
        radius: 110.0,
        width: 0.0,
        y_start: 60.0,
        y_end: 420.0,
    };
    let model = DeformationModel {
        amplitude: 12.0,
        wave_count: 6.0,
        phase_coupling: 2.0,
        collision_margin: 4.0,
        seed: 9,
    };
    let sampling = PoseSampling {
        max_bend: 0.35,
        max_root_yaw: 0.2,
        max_root_shift: 20.0,
    };
    let bounds = suggest_bounds(&rig, &spec, &model, &sampling, 4, 1)?;
    let template = make_garment_template(&spec, &rig, model.collision_margin)?;
    let cameras = build_camera_rig(&template.mesh, 64)?;
    let manifest = generate_dataset(
        &out_dir, 4, 1, &model, &rig, &spec, &sampling, &cameras, &bounds,
    )?;

    let net_cfg = TransferNetConfig {
        image_size: 64,
        patch_size: 16,
        token_dim: 32,
        heads: 2,
        blocks: 2,
        mlp_ratio: 2,
        decoder_channels: vec![24, 16, 12, 8],
        decoder_res_blocks: 1,
        residual_output: true,
    };
    let train_cfg = TrainingConfig {
        learning_rate: 1e-4,
        iterations: 400,
        batch_size: 2,
        seed: 3,
        modality: AttrKind::Position,
    };

    let samples = load_training_set(
        &out_dir,
        &manifest,
        AttrKind::Position,
        &manifest.train,
        net_cfg.patch_size,
    )?;
    println!(
        "training on {} samples ({} poses x 2 views), {} parameters",
        samples.len(),
        manifest.train.len(),
        TransferNet::new(net_cfg.clone(), 0)?.param_count()
    );

    let mut net = TransferNet::new(net_cfg, train_cfg.seed)?;
    let report = train(&mut net, &samples, &train_cfg)?;
    let first = report.loss_history[0];
    let last = *report.loss_history.last().unwrap();
    for (i, loss) in report.loss_history.iter().enumerate() {
        if i % 50 == 0 {
            println!("iter {i:4}  masked L1 {loss:.6}");
        }
    }
    println!("loss {first:.6} -> {last:.6} ({:.1}% of initial)", 100.0 * last / first);

    let ckpt = out_dir.join("ckpt_position");
    net.save(&ckpt)?;
    println!("checkpoint at {}.bin / .json", ckpt.display());
    Ok(())
}
