//! Ground-truth-image fusion round trip: renders position and normal
//! images of a wrinkled tube garment, then recovers the deformed mesh
//! from those images alone with the two-stage fusion, printing the RMSE
//! after initialization, stage 1, and stage 2.
//!
//! Run with: cargo run --release --example fuse_from_images

use drape::fusion::{fuse, FusionConfig};
use drape::image::{AttrKind, Owner};
use drape::mesh::{save_obj, vertex_normals};
use drape::metrics::rmse;
use drape::raster::{
    build_camera_rig, rasterize_template, render_attribute, rgb_encode_normals,
    rgb_encode_positions, PositionBounds, BACK, FRONT,
};
use drape::synth::{
    default_rig, gt_deform, make_body, make_garment_template, DeformationModel, GarmentSpec,
    GarmentTopology,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("drape_fuse_example");
    std::fs::create_dir_all(&out_dir)?;

    let rig = default_rig();
    let spec = GarmentSpec {
        topology: GarmentTopology::Tube,
        rings: 32,
        segments: 64,
        radius: 110.0,
        width: 0.0,
        y_start: 60.0,
        y_end: 420.0,
    };
    let model = DeformationModel {
        amplitude: 15.0,
        wave_count: 8.0,
        phase_coupling: 2.0,
        collision_margin: 4.0,
        seed: 1,
    };
    let template = make_garment_template(&spec, &rig, model.collision_margin)?;
    let pose = [0.3, -0.25];
    let gt = gt_deform(&template, &model, &rig, &pose)?;
    let body = make_body(&rig, &pose)?;

    // Render the ground-truth attribute images over the fixed template
    // projection.
    let bounds = PositionBounds::enclosing(&[&template.mesh, &gt, &body], 0.1)?;
    let cams = build_camera_rig(&template.mesh, 256)?;
    let pos_rgb = rgb_encode_positions(&gt.vertices, &bounds)?;
    let nrm_rgb = rgb_encode_normals(&vertex_normals(&gt));
    let mut pos_imgs = Vec::new();
    let mut nrm_imgs = Vec::new();
    for view in [FRONT, BACK] {
        let (raster, _) = rasterize_template(&template.mesh, &cams, view)?;
        pos_imgs.push(render_attribute(
            &raster,
            &template.mesh.faces,
            &pos_rgb,
            AttrKind::Position,
            Owner::Garment,
        )?);
        nrm_imgs.push(render_attribute(
            &raster,
            &template.mesh.faces,
            &nrm_rgb,
            AttrKind::Normal,
            Owner::Garment,
        )?);
    }

    let cfg = FusionConfig::default();
    let started = std::time::Instant::now();
    let out = fuse(&pos_imgs, &nrm_imgs, &template.mesh, &body, &bounds, &cfg)?;
    let elapsed = started.elapsed().as_secs_f64();

    let diag = template.mesh.bbox_diagonal();
    println!("template bbox diagonal: {diag:.1} mm");
    println!("init   RMSE {:7.3} mm", rmse(&out.init_mesh, &gt)?);
    println!("stage1 RMSE {:7.3} mm", rmse(&out.stage1_mesh, &gt)?);
    println!(
        "stage2 RMSE {:7.3} mm  ({:.2}% of diagonal, {elapsed:.1}s)",
        rmse(&out.mesh, &gt)?,
        100.0 * rmse(&out.mesh, &gt)? / diag
    );

    save_obj(&gt, out_dir.join("ground_truth.obj"))?;
    save_obj(&out.mesh, out_dir.join("fused.obj"))?;
    println!("meshes at {}", out_dir.display());
    Ok(())
}
