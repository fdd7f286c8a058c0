//! Computes the evaluation metrics (RMSE, Hausdorff, STED, collision
//! rate) on a toy clip: a wrinkled tube versus a rigid-only baseline.
//!
//! Run with: cargo run --release --example evaluate_metrics

use drape::geom::build_bvh;
use drape::mesh::edge_set;
use drape::metrics::{collision_rate, hausdorff, rmse, sted};
use drape::synth::{
    default_rig, gt_deform, make_body, make_garment_template, DeformationModel, GarmentSpec,
    GarmentTopology,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
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
        seed: 2,
    };
    let template = make_garment_template(&spec, &rig, model.collision_margin)?;
    let flat = DeformationModel {
        amplitude: 0.0,
        ..model
    };

    // A short clip of poses; ground truth has wrinkles, the "prediction"
    // only follows the rigid warp.
    let poses: Vec<[f64; 2]> = (0..5)
        .map(|i| {
            let t = i as f64 / 5.0;
            [0.3 * (t * 6.28).sin(), -0.2 * (t * 6.28).cos()]
        })
        .collect();
    let mut gt_clip = Vec::new();
    let mut pred_clip = Vec::new();
    let mut bodies = Vec::new();
    for pose in &poses {
        gt_clip.push(gt_deform(&template, &model, &rig, pose)?);
        pred_clip.push(gt_deform(&template, &flat, &rig, pose)?);
        bodies.push(make_body(&rig, pose)?);
    }

    let edges = edge_set(&template.mesh);
    println!("frame   rmse_mm   hausdorff_mm   collision");
    for (i, ((pred, gt), body)) in pred_clip.iter().zip(&gt_clip).zip(&bodies).enumerate() {
        let bvh = build_bvh(body)?;
        println!(
            "{i:5}   {:7.2}   {:12.2}   {:9.4}",
            rmse(pred, gt)?,
            hausdorff(pred, gt)?,
            collision_rate(pred, &bvh)
        );
    }
    let (total, spatial, temporal) = sted(&pred_clip, &gt_clip, &edges)?;
    println!("clip STED {total:.4} (spatial {spatial:.4}, temporal {temporal:.4})");
    Ok(())
}
