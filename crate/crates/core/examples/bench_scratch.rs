use drape::image::AttrKind;
use drape::pipeline::load_training_set;
use drape::raster::build_camera_rig;
use drape::synth::*;
use drape::transfer::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let res: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(128);
    let iters: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let out_dir = std::env::temp_dir().join("drape_overfit_bench");
    let rig = default_rig();
    let spec = GarmentSpec {
        topology: GarmentTopology::Tube,
        rings: 24, segments: 48, radius: 150.0, width: 0.0, y_start: 40.0, y_end: 500.0,
    };
    let amp: f64 = std::env::args().nth(7).map(|s| s.parse().unwrap()).unwrap_or(15.0);
    let waves: f64 = std::env::args().nth(8).map(|s| s.parse().unwrap()).unwrap_or(8.0);
    let model = DeformationModel { amplitude: amp, wave_count: waves, phase_coupling: 2.0, collision_margin: 4.0, seed: 31 };
    let sampling = PoseSampling { max_bend: 0.45, max_root_yaw: 0.3, max_root_shift: 25.0 };
    let bounds = suggest_bounds(&rig, &spec, &model, &sampling, 4, 1)?;
    let template = make_garment_template(&spec, &rig, model.collision_margin)?;
    let cams = build_camera_rig(&template.mesh, res)?;
    let manifest = generate_dataset(&out_dir, 4, 1, &model, &rig, &spec, &sampling, &cams, &bounds)?;

    let dim: usize = std::env::args().nth(5).map(|s| s.parse().unwrap()).unwrap_or(64);
    let net_cfg = TransferNetConfig {
        image_size: res, patch_size: 16, token_dim: dim, heads: 4, blocks: 4,
        mlp_ratio: 2, decoder_channels: vec![48, 32, 16, 8], decoder_res_blocks: 1,
        residual_output: true,
    };
    for modality in [AttrKind::Position, AttrKind::Normal] {
        let samples = load_training_set(&out_dir, &manifest, modality, &manifest.train, 16)?;
        assert_eq!(samples.len(), 8);
        let lr: f32 = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
        let batch: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(2);
        let tcfg = TrainingConfig { learning_rate: lr, iterations: iters, batch_size: batch, seed: 5, modality };
        let net_seed: u64 = std::env::args().nth(6).map(|s| s.parse().unwrap()).unwrap_or(17);
        let mut net = TransferNet::new(net_cfg.clone(), net_seed).unwrap();
        let t0 = std::time::Instant::now();
        let report = train(&mut net, &samples, &tcfg)?;
        // Full-set loss at the trained (tail-averaged) parameters.
        let full_cfg = TrainingConfig { learning_rate: 0.0, iterations: 1, batch_size: samples.len(), seed: 999, modality };
        let mut probe_net = TransferNet::new(net_cfg.clone(), 0).unwrap();
        for s in 0..net.params.len() { *probe_net.params.get_mut(s) = net.params.get(s).clone(); }
        let full_report = train(&mut probe_net, &samples, &full_cfg)?;
        let full_final = full_report.loss_history[0];
        let first = report.loss_history[0];
        println!("  final full-set loss: {:.5} = {:.1}% of initial-batch {:.5}", full_final, 100.0*full_final/first, first);
        let epoch = (8 / batch).max(1);
        let avg = |upto: usize| -> f32 {
            let lo = upto.saturating_sub(epoch);
            report.loss_history[lo..upto].iter().sum::<f32>() / (upto - lo) as f32
        };
        let probe: Vec<String> = [500usize, 1000, 1500, iters].iter().filter(|&&i| i <= iters)
            .map(|&i| format!("{i}:{:.1}%", 100.0 * avg(i) / first)).collect();
        println!("{modality}: initial {first:.5} -> {} in {:.0}s", probe.join(" "), t0.elapsed().as_secs_f64());
    }
    Ok(())
}
