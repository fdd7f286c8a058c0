//! Renders position and normal attribute images of a posed synthetic
//! garment over its fixed template projection, and writes PFM data files
//! plus PPM previews.
//!
//! Run with: cargo run --release --example render_attribute_images

use drape::image::{write_pfm, write_pgm, write_ppm, AttrKind, Owner};
use drape::mesh::vertex_normals;
use drape::raster::{
    build_camera_rig, rasterize_template, render_attribute, rgb_encode_normals,
    rgb_encode_positions, PositionBounds, BACK, FRONT,
};
use drape::synth::{default_rig, gt_deform, make_garment_template, DeformationModel, GarmentSpec, GarmentTopology};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out_dir = std::env::temp_dir().join("drape_render_example");
    std::fs::create_dir_all(&out_dir)?;

    let rig = default_rig();
    let spec = GarmentSpec {
        topology: GarmentTopology::Tube,
        rings: 24,
        segments: 48,
        radius: 110.0,
        width: 0.0,
        y_start: 60.0,
        y_end: 420.0,
    };
    let model = DeformationModel {
        amplitude: 14.0,
        wave_count: 7.0,
        phase_coupling: 2.0,
        collision_margin: 4.0,
        seed: 5,
    };
    let template = make_garment_template(&spec, &rig, model.collision_margin)?;
    let pose = [0.35, -0.2];
    let deformed = gt_deform(&template, &model, &rig, &pose)?;

    let bounds = PositionBounds::enclosing(&[&template.mesh, &deformed], 0.1)?;
    let rig_cams = build_camera_rig(&template.mesh, 256)?;

    let pos_rgb = rgb_encode_positions(&deformed.vertices, &bounds)?;
    let nrm_rgb = rgb_encode_normals(&vertex_normals(&deformed));

    for view in [FRONT, BACK] {
        let (raster, silhouette) = rasterize_template(&template.mesh, &rig_cams, view)?;
        write_pgm(&silhouette, out_dir.join(format!("silhouette_{view}.pgm")))?;
        for (kind, rgb) in [(AttrKind::Position, &pos_rgb), (AttrKind::Normal, &nrm_rgb)] {
            let img = render_attribute(&raster, &template.mesh.faces, rgb, kind, Owner::Garment)?;
            write_pfm(&img, out_dir.join(format!("garment_{kind}_{view}.pfm")))?;
            write_ppm(&img, out_dir.join(format!("garment_{kind}_{view}.ppm")))?;
            println!(
                "{view:5} {kind:8}  {} covered pixels",
                silhouette.coverage_count()
            );
        }
    }
    println!("wrote images to {}", out_dir.display());
    Ok(())
}
