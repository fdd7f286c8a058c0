//! Fixed-template perspective rasterization.
//!
//! The garment template is projected once per view; the resulting
//! per-pixel (face, barycentric, depth) table is constant across
//! deformations, so rendering vertex attributes into an image is a
//! precomputed linear map, and its adjoint gives exact gradients.

use glam::{DMat3, DVec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{AttrKind, AttributeImage, Owner, Silhouette};
use crate::mesh::TriMesh;

pub const FRONT: &str = "front";
pub const BACK: &str = "back";

/// Default square image resolution in pixels.
pub const DEFAULT_RESOLUTION: usize = 256;

/// Fraction of the image left empty on each side by the auto-framing.
const FRAME_MARGIN: f64 = 0.05;

/// Vertical field of view used by both cameras, degrees. Kept narrow so
/// the two views are close to orthographic and together see almost the
/// whole surface.
const CAMERA_FOV_DEG: f64 = 8.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("template has a degenerate bounding box (extent {extent})")]
    DegenerateTemplate { extent: f64 },
    #[error("unknown view `{0}` (expected `front` or `back`)")]
    UnknownView(String),
    #[error("attribute count {attrs} does not match vertex count {vertices}")]
    AttrCountMismatch { attrs: usize, vertices: usize },
    #[error("position of vertex {vertex} is outside bounds on axis {axis}: {value} not in [{lo}, {hi}]")]
    OutOfBounds {
        vertex: usize,
        axis: char,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("bounds are degenerate on axis {axis}: max {max} <= min {min}")]
    DegenerateBounds { axis: char, min: f64, max: f64 },
    #[error("gradient image size {got} does not match raster size {expected}")]
    GradSizeMismatch { got: usize, expected: usize },
}

/// One perspective camera: rigid camera-to-world pose plus field of view.
/// The camera looks along its local -z axis, +y is up, and depth is the
/// positive distance along the viewing direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fov_y_deg: f64,
    pub rotation: DMat3,
    pub position: DVec3,
    pub resolution: usize,
}

impl Camera {
    /// World point to (pixel x, pixel y, depth). Pixel coordinates are
    /// continuous with the image spanning [0, res] on both axes.
    pub fn project(&self, p: DVec3) -> (f64, f64, f64) {
        let local = self.rotation.transpose() * (p - self.position);
        let depth = -local.z;
        let half_tan = (self.fov_y_deg.to_radians() / 2.0).tan();
        let ndc_x = local.x / (depth * half_tan);
        let ndc_y = local.y / (depth * half_tan);
        let res = self.resolution as f64;
        let px = (ndc_x + 1.0) / 2.0 * res;
        let py = (1.0 - ndc_y) / 2.0 * res;
        (px, py, depth)
    }
}

/// Front and back cameras aimed at the template centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub front: Camera,
    pub back: Camera,
}

impl CameraRig {
    pub fn view(&self, label: &str) -> Result<&Camera, RasterError> {
        match label {
            FRONT => Ok(&self.front),
            BACK => Ok(&self.back),
            other => Err(RasterError::UnknownView(other.to_string())),
        }
    }

    pub fn views(&self) -> [(&'static str, &Camera); 2] {
        [(FRONT, &self.front), (BACK, &self.back)]
    }
}

/// Positions the front camera on +z looking -z and the back camera on -z
/// looking +z, both y-up and aimed at the template centroid, at a distance
/// where the template's bounding sphere fills the image with a 5% margin
/// on each side.
pub fn build_camera_rig(template: &TriMesh, resolution: usize) -> Result<CameraRig, RasterError> {
    let centroid = template.centroid();
    let radius = template
        .vertices
        .iter()
        .map(|v| (*v - centroid).length())
        .fold(0.0f64, f64::max);
    if radius <= 0.0 {
        return Err(RasterError::DegenerateTemplate { extent: radius });
    }
    let half_tan = (CAMERA_FOV_DEG.to_radians() / 2.0).tan();
    // The sphere silhouette must span the central (1 - 2*margin) of NDC.
    let sphere_half_angle = ((1.0 - 2.0 * FRAME_MARGIN) * half_tan).atan();
    let distance = radius / sphere_half_angle.sin();

    let front = Camera {
        fov_y_deg: CAMERA_FOV_DEG,
        rotation: DMat3::IDENTITY,
        position: centroid + DVec3::Z * distance,
        resolution,
    };
    // Looking along +z with +y up; the basis stays right-handed.
    let back_rotation = DMat3::from_cols(-DVec3::X, DVec3::Y, -DVec3::Z);
    let back = Camera {
        fov_y_deg: CAMERA_FOV_DEG,
        rotation: back_rotation,
        position: centroid - DVec3::Z * distance,
        resolution,
    };
    Ok(CameraRig { front, back })
}

/// Per-pixel rasterization record: covering face (if any),
/// perspective-correct barycentric weights, and depth in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterPixel {
    pub face: u32,
    pub bary: [f64; 3],
    pub depth: f64,
}

/// The fixed template projection for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Option<RasterPixel>>,
    pub view: String,
}

impl RasterMap {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Option<&RasterPixel> {
        self.pixels[y * self.width + x].as_ref()
    }

    pub fn silhouette(&self) -> Silhouette {
        Silhouette {
            width: self.width,
            height: self.height,
            mask: self.pixels.iter().map(|p| p.is_some()).collect(),
            view: self.view.clone(),
        }
    }
}

/// Per-vertex visibility in one view.
#[derive(Debug, Clone)]
pub struct VertexVisibility {
    pub visible: bool,
    /// Projected pixel coordinates (valid whenever the projection lies in
    /// front of the camera, even for hidden vertices).
    pub pixel: [f64; 2],
    pub depth: f64,
    /// Slack in the depth test: raster depth + epsilon - vertex depth.
    /// Larger means more confidently visible.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct VisibilityTable {
    pub view: String,
    pub entries: Vec<VertexVisibility>,
}

impl VisibilityTable {
    pub fn visible_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.visible)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn visible_fraction(&self) -> f64 {
        self.visible_indices().len() as f64 / self.entries.len().max(1) as f64
    }
}

/// Axis-aligned box used by the position RGB encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionBounds {
    pub min: DVec3,
    pub max: DVec3,
}

impl PositionBounds {
    pub fn new(min: DVec3, max: DVec3) -> Result<Self, RasterError> {
        for (axis, (lo, hi)) in [
            ('x', (min.x, max.x)),
            ('y', (min.y, max.y)),
            ('z', (min.z, max.z)),
        ] {
            if hi <= lo {
                return Err(RasterError::DegenerateBounds { axis, min: lo, max: hi });
            }
        }
        Ok(Self { min, max })
    }

    /// Union bounding box of all given meshes, inflated by `inflate`
    /// (fraction of each axis extent) on every side.
    pub fn enclosing(meshes: &[&TriMesh], inflate: f64) -> Result<Self, RasterError> {
        let mut min = DVec3::splat(f64::INFINITY);
        let mut max = DVec3::splat(f64::NEG_INFINITY);
        for mesh in meshes {
            let (lo, hi) = mesh.bounding_box();
            min = min.min(lo);
            max = max.max(hi);
        }
        let pad = (max - min) * inflate;
        Self::new(min - pad, max + pad)
    }

    pub fn contains(&self, p: DVec3) -> bool {
        p.cmpge(self.min).all() && p.cmple(self.max).all()
    }
}

/// Rasterizes a mesh into the per-pixel coverage table for one view.
/// The nearest face covering each pixel center wins; depth ties within
/// 1e-9 go to the smaller face index. Barycentrics are perspective
/// correct.
pub fn rasterize_template(
    template: &TriMesh,
    rig: &CameraRig,
    view: &str,
) -> Result<(RasterMap, Silhouette), RasterError> {
    let camera = rig.view(view)?;
    let res = camera.resolution;
    let projected: Vec<(f64, f64, f64)> = template
        .vertices
        .iter()
        .map(|&v| camera.project(v))
        .collect();

    let mut pixels: Vec<Option<RasterPixel>> = vec![None; res * res];
    for (fi, face) in template.faces.iter().enumerate() {
        let (a, b, c) = (
            projected[face[0]],
            projected[face[1]],
            projected[face[2]],
        );
        if a.2 <= 0.0 || b.2 <= 0.0 || c.2 <= 0.0 {
            continue;
        }
        let min_x = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let max_x = (a.0.max(b.0).max(c.0).ceil() as usize).min(res);
        let min_y = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let max_y = (a.1.max(b.1).max(c.1).ceil() as usize).min(res);
        if min_x >= max_x || min_y >= max_y {
            continue;
        }
        // Signed double area in screen space.
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area.abs() < 1e-12 {
            continue;
        }
        for py in min_y..max_y {
            let cy = py as f64 + 0.5;
            for px in min_x..max_x {
                let cx = px as f64 + 0.5;
                let w0 = ((b.0 - cx) * (c.1 - cy) - (b.1 - cy) * (c.0 - cx)) / area;
                let w1 = ((c.0 - cx) * (a.1 - cy) - (c.1 - cy) * (a.0 - cx)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // Perspective correction: weights proportional to
                // screen-space weight over vertex depth.
                let q0 = w0 / a.2;
                let q1 = w1 / b.2;
                let q2 = w2 / c.2;
                let q = q0 + q1 + q2;
                let bary = [q0 / q, q1 / q, q2 / q];
                let depth = bary[0] * a.2 + bary[1] * b.2 + bary[2] * c.2;

                let slot = &mut pixels[py * res + px];
                let replace = match slot {
                    None => true,
                    Some(best) => {
                        depth < best.depth - 1e-9
                            || ((depth - best.depth).abs() <= 1e-9 && (fi as u32) < best.face)
                    }
                };
                if replace {
                    *slot = Some(RasterPixel {
                        face: fi as u32,
                        bary,
                        depth,
                    });
                }
            }
        }
    }

    let map = RasterMap {
        width: res,
        height: res,
        pixels,
        view: view.to_string(),
    };
    let silhouette = map.silhouette();
    Ok((map, silhouette))
}

/// Linearly rescales positions into [0, 1] via the bounds box. Fails on
/// any out-of-bounds coordinate so the encoding stays invertible.
pub fn rgb_encode_positions(
    positions: &[DVec3],
    bounds: &PositionBounds,
) -> Result<Vec<[f64; 3]>, RasterError> {
    let extent = bounds.max - bounds.min;
    positions
        .iter()
        .enumerate()
        .map(|(vi, p)| {
            for (axis, (value, lo, hi)) in [
                ('x', (p.x, bounds.min.x, bounds.max.x)),
                ('y', (p.y, bounds.min.y, bounds.max.y)),
                ('z', (p.z, bounds.min.z, bounds.max.z)),
            ] {
                if value < lo || value > hi {
                    return Err(RasterError::OutOfBounds {
                        vertex: vi,
                        axis,
                        value,
                        lo,
                        hi,
                    });
                }
            }
            let n = (*p - bounds.min) / extent;
            Ok([n.x, n.y, n.z])
        })
        .collect()
}

/// Inverse of [`rgb_encode_positions`].
pub fn rgb_decode_positions(rgb: &[[f64; 3]], bounds: &PositionBounds) -> Vec<DVec3> {
    let extent = bounds.max - bounds.min;
    rgb.iter()
        .map(|c| bounds.min + DVec3::new(c[0], c[1], c[2]) * extent)
        .collect()
}

pub fn rgb_decode_position(rgb: [f64; 3], bounds: &PositionBounds) -> DVec3 {
    bounds.min + DVec3::new(rgb[0], rgb[1], rgb[2]) * (bounds.max - bounds.min)
}

/// Maps unit normals into [0, 1]: rgb = (n + 1) / 2.
pub fn rgb_encode_normals(normals: &[DVec3]) -> Vec<[f64; 3]> {
    normals
        .iter()
        .map(|n| [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0])
        .collect()
}

/// Inverse of [`rgb_encode_normals`]; renormalizes to unit length and
/// falls back to +z for an exactly zero decoded vector.
pub fn rgb_decode_normals(rgb: &[[f64; 3]]) -> Vec<DVec3> {
    rgb.iter()
        .map(|c| {
            let n = DVec3::new(c[0] * 2.0 - 1.0, c[1] * 2.0 - 1.0, c[2] * 2.0 - 1.0);
            let len = n.length();
            if len == 0.0 {
                DVec3::Z
            } else {
                n / len
            }
        })
        .collect()
}

/// Renders per-vertex RGB attributes through the fixed raster map:
/// each covered pixel is the barycentric mix of its face's vertex
/// attributes, background is exactly zero. Linear in the attributes.
pub fn render_attribute(
    raster: &RasterMap,
    faces: &[[usize; 3]],
    attrs: &[[f64; 3]],
    kind: AttrKind,
    owner: Owner,
) -> Result<AttributeImage, RasterError> {
    let mut image = AttributeImage::zeros(raster.width, raster.height, raster.view.clone(), kind, owner);
    for y in 0..raster.height {
        for x in 0..raster.width {
            if let Some(px) = raster.at(x, y) {
                let face = faces[px.face as usize];
                if let Some(&max_v) = face.iter().max() {
                    if max_v >= attrs.len() {
                        return Err(RasterError::AttrCountMismatch {
                            attrs: attrs.len(),
                            vertices: max_v + 1,
                        });
                    }
                }
                let mut value = [0.0; 3];
                for (w, &vi) in px.bary.iter().zip(face.iter()) {
                    let a = attrs[vi];
                    for c in 0..3 {
                        value[c] += w * a[c];
                    }
                }
                image.set_pixel(x, y, value);
            }
        }
    }
    Ok(image)
}

/// Exact transpose of [`render_attribute`]: scatters a per-pixel gradient
/// back to per-vertex attribute gradients.
pub fn render_adjoint(
    raster: &RasterMap,
    faces: &[[usize; 3]],
    vertex_count: usize,
    pixel_grad: &[f64],
) -> Result<Vec<[f64; 3]>, RasterError> {
    let expected = raster.width * raster.height * 3;
    if pixel_grad.len() != expected {
        return Err(RasterError::GradSizeMismatch {
            got: pixel_grad.len(),
            expected,
        });
    }
    let mut grads = vec![[0.0; 3]; vertex_count];
    for y in 0..raster.height {
        for x in 0..raster.width {
            if let Some(px) = raster.at(x, y) {
                let face = faces[px.face as usize];
                let base = (y * raster.width + x) * 3;
                for (w, &vi) in px.bary.iter().zip(face.iter()) {
                    for c in 0..3 {
                        grads[vi][c] += w * pixel_grad[base + c];
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Depth-tested per-vertex visibility for one view. A vertex is visible
/// iff its projection lands inside the image and its depth is within
/// epsilon of the rasterized depth at the nearest covered pixel center of
/// its 2x2 bilinear neighborhood, with epsilon = 1e-3 x template
/// bounding-box diagonal. Using the bilinear neighborhood (rather than
/// only the single nearest center) keeps silhouette-boundary vertices,
/// whose nearest center can fall on background, classified as visible;
/// it also guarantees every visible vertex can be bilinearly sampled.
pub fn vertex_visibility(
    template: &TriMesh,
    raster: &RasterMap,
    rig: &CameraRig,
    view: &str,
) -> Result<VisibilityTable, RasterError> {
    let camera = rig.view(view)?;
    let eps = 1e-3 * template.bbox_diagonal();
    let res = raster.width as f64;
    let entries = template
        .vertices
        .iter()
        .map(|&v| {
            let (px, py, depth) = camera.project(v);
            let in_image = depth > 0.0 && px >= 0.0 && px < res && py >= 0.0 && py < res;
            if !in_image {
                return VertexVisibility {
                    visible: false,
                    pixel: [px, py],
                    depth,
                    margin: f64::NEG_INFINITY,
                };
            }
            // Same 2x2 neighborhood as bilinear sampling. The reference
            // depth is the foreground-renormalized bilinear interpolation
            // of the rasterized depths at the vertex's sub-pixel
            // projection: comparing against a single neighboring pixel
            // center would inject a depth error of pixel_size x surface
            // slope, which dwarfs epsilon on oblique garment regions.
            let fx = (px - 0.5).clamp(0.0, (raster.width - 1) as f64);
            let fy = (py - 0.5).clamp(0.0, (raster.height - 1) as f64);
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(raster.width - 1);
            let y1 = (y0 + 1).min(raster.height - 1);
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            let neighbors = [
                (x0, y0, (1.0 - tx) * (1.0 - ty)),
                (x1, y0, tx * (1.0 - ty)),
                (x0, y1, (1.0 - tx) * ty),
                (x1, y1, tx * ty),
            ];
            let mut depth_sum = 0.0;
            let mut weight_sum = 0.0;
            for (cx, cy, w) in neighbors {
                if let Some(r) = raster.at(cx, cy) {
                    depth_sum += w * r.depth;
                    weight_sum += w;
                }
            }
            // Local depth spread over the covered 3x3 window around the
            // projection: a slope-aware tolerance. At grazing angles a
            // single pixel spans a large depth range, so epsilon alone
            // would misclassify barely-visible vertices; true occluders
            // sit far beyond the local spread.
            let cx = (px.floor() as usize).min(raster.width - 1);
            let cy = (py.floor() as usize).min(raster.height - 1);
            let mut depth_min = f64::INFINITY;
            let mut depth_max = f64::NEG_INFINITY;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = cx as i64 + dx;
                    let ny = cy as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= raster.width as i64 || ny >= raster.height as i64
                    {
                        continue;
                    }
                    if let Some(r) = raster.at(nx as usize, ny as usize) {
                        depth_min = depth_min.min(r.depth);
                        depth_max = depth_max.max(r.depth);
                    }
                }
            }
            if weight_sum > 0.0 {
                let raster_depth = depth_sum / weight_sum;
                let tolerance = eps + (depth_max - depth_min);
                let margin = raster_depth + tolerance - depth;
                VertexVisibility {
                    visible: margin >= 0.0,
                    pixel: [px, py],
                    depth,
                    margin,
                }
            } else {
                VertexVisibility {
                    visible: false,
                    pixel: [px, py],
                    depth,
                    margin: f64::NEG_INFINITY,
                }
            }
        })
        .collect();
    Ok(VisibilityTable {
        view: view.to_string(),
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use glam::dvec3;

    fn unit_cube() -> TriMesh {
        let corners = [
            dvec3(0.0, 0.0, 0.0),
            dvec3(1.0, 0.0, 0.0),
            dvec3(1.0, 1.0, 0.0),
            dvec3(0.0, 1.0, 0.0),
            dvec3(0.0, 0.0, 1.0),
            dvec3(1.0, 0.0, 1.0),
            dvec3(1.0, 1.0, 1.0),
            dvec3(0.0, 1.0, 1.0),
        ];
        // Outward winding.
        let faces = vec![
            [4, 5, 6],
            [4, 6, 7], // +z (front)
            [1, 0, 3],
            [1, 3, 2], // -z (back)
            [5, 1, 2],
            [5, 2, 6], // +x
            [0, 4, 7],
            [0, 7, 3], // -x
            [7, 6, 2],
            [7, 2, 3], // +y
            [0, 1, 5],
            [0, 5, 4], // -y
        ];
        TriMesh::new(corners.to_vec(), faces, "cube")
    }

    fn big_triangle() -> TriMesh {
        TriMesh::new(
            vec![
                dvec3(-60.0, -50.0, 0.0),
                dvec3(60.0, -50.0, 0.0),
                dvec3(0.0, 70.0, 0.0),
            ],
            vec![[0, 1, 2]],
            "tri",
        )
    }

    #[test]
    fn rig_poses_mirror_about_centroid_plane() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 64).unwrap();
        let c = cube.centroid();
        let f = rig.front.position - c;
        let b = rig.back.position - c;
        assert!((f.x - b.x).abs() < 1e-12);
        assert!((f.y - b.y).abs() < 1e-12);
        assert!((f.z + b.z).abs() < 1e-12);
        assert!(f.z > 0.0);
    }

    #[test]
    fn rig_rejects_degenerate_template() {
        let point = TriMesh::new(vec![DVec3::ZERO, DVec3::ZERO, DVec3::ZERO], vec![[0, 1, 2]], "pt");
        assert!(build_camera_rig(&point, 64).is_err());
    }

    #[test]
    fn template_projects_into_central_region() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 256).unwrap();
        for (_, cam) in rig.views() {
            for &v in &cube.vertices {
                let (px, py, depth) = cam.project(v);
                assert!(depth > 0.0);
                assert!(px > 0.05 * 256.0 && px < 0.95 * 256.0, "px = {px}");
                assert!(py > 0.05 * 256.0 && py < 0.95 * 256.0, "py = {py}");
            }
        }
    }

    #[test]
    fn framing_is_scale_invariant() {
        let cube = unit_cube();
        let mut doubled = cube.clone();
        for v in &mut doubled.vertices {
            *v *= 2.0;
        }
        let rig1 = build_camera_rig(&cube, 128).unwrap();
        let rig2 = build_camera_rig(&doubled, 128).unwrap();
        let (_, s1) = rasterize_template(&cube, &rig1, FRONT).unwrap();
        let (_, s2) = rasterize_template(&doubled, &rig2, FRONT).unwrap();
        let f1 = s1.coverage_count() as f64 / (128.0 * 128.0);
        let f2 = s2.coverage_count() as f64 / (128.0 * 128.0);
        // Identical framing up to one pixel row of quantization noise.
        assert!((f1 - f2).abs() < 0.01, "{f1} vs {f2}");
    }

    #[test]
    fn center_pixel_covered_by_single_triangle() {
        let tri = big_triangle();
        let rig = build_camera_rig(&tri, 64).unwrap();
        let (map, sil) = rasterize_template(&tri, &rig, FRONT).unwrap();
        let p = map.at(32, 32).expect("center pixel must be covered");
        assert_eq!(p.face, 0);
        let sum: f64 = p.bary.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
        assert!(p.bary.iter().all(|w| *w >= -1e-6));
        assert!(sil.get(32, 32));
    }

    #[test]
    fn rasterization_matches_point_in_triangle_oracle() {
        // Independent check: barycentrics recomputed by solving the 2x2
        // linear system in screen space rather than via edge functions.
        let tri = big_triangle();
        let rig = build_camera_rig(&tri, 64).unwrap();
        let (map, _) = rasterize_template(&tri, &rig, FRONT).unwrap();
        let cam = &rig.front;
        let proj: Vec<(f64, f64, f64)> = tri.vertices.iter().map(|&v| cam.project(v)).collect();
        for y in 0..64 {
            for x in 0..64 {
                let cx = x as f64 + 0.5;
                let cy = y as f64 + 0.5;
                let (ax, ay, az) = proj[0];
                let (bx, by, bz) = proj[1];
                let (cx2, cy2, cz) = proj[2];
                let m00 = bx - ax;
                let m01 = cx2 - ax;
                let m10 = by - ay;
                let m11 = cy2 - ay;
                let det = m00 * m11 - m01 * m10;
                let rx = cx - ax;
                let ry = cy - ay;
                let u = (rx * m11 - ry * m01) / det;
                let v = (m00 * ry - m10 * rx) / det;
                let inside = u >= 0.0 && v >= 0.0 && u + v <= 1.0;
                let covered = map.at(x, y).is_some();
                // Skip pixels within a tiny band of the edges where the
                // two formulations may disagree by rounding.
                let edge_dist = u.abs().min(v.abs()).min((1.0 - u - v).abs());
                if edge_dist > 1e-9 {
                    assert_eq!(inside, covered, "pixel ({x},{y})");
                }
                if let Some(p) = map.at(x, y) {
                    // Perspective-correct the oracle weights.
                    let s0 = (1.0 - u - v) / az;
                    let s1 = u / bz;
                    let s2 = v / cz;
                    let s = s0 + s1 + s2;
                    let want = [s0 / s, s1 / s, s2 / s];
                    for (got, want) in p.bary.iter().zip(want) {
                        assert!((got - want).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_outside_projection_is_empty() {
        let tri = big_triangle();
        let rig = build_camera_rig(&tri, 64).unwrap();
        let (map, sil) = rasterize_template(&tri, &rig, FRONT).unwrap();
        assert!(map.at(0, 0).is_none());
        assert!(!sil.get(0, 0));
    }

    #[test]
    fn nearer_of_stacked_triangles_wins() {
        let mesh = TriMesh::new(
            vec![
                // Far triangle (z = 0), listed first.
                dvec3(-60.0, -50.0, 0.0),
                dvec3(60.0, -50.0, 0.0),
                dvec3(0.0, 70.0, 0.0),
                // Near triangle (z = 10), same silhouette.
                dvec3(-60.0, -50.0, 10.0),
                dvec3(60.0, -50.0, 10.0),
                dvec3(0.0, 70.0, 10.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
            "stack",
        );
        let rig = build_camera_rig(&mesh, 64).unwrap();
        let (map, _) = rasterize_template(&mesh, &rig, FRONT).unwrap();
        let mut shared = 0;
        for px in map.pixels.iter().flatten() {
            // Every covered pixel of the overlap must report face 1,
            // the nearer one for the front camera.
            assert_eq!(px.face, 1);
            shared += 1;
        }
        assert!(shared > 100);
    }

    #[test]
    fn raster_map_recomputation_is_bit_identical() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 128).unwrap();
        let (a, _) = rasterize_template(&cube, &rig, FRONT).unwrap();
        let (b, _) = rasterize_template(&cube, &rig, FRONT).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn position_encoding_examples() {
        let bounds = PositionBounds::new(DVec3::splat(-1.0), DVec3::splat(1.0)).unwrap();
        let rgb = rgb_encode_positions(&[DVec3::ZERO], &bounds).unwrap();
        assert_eq!(rgb[0], [0.5, 0.5, 0.5]);
        let rgb = rgb_encode_positions(&[DVec3::splat(1.0)], &bounds).unwrap();
        assert_eq!(rgb[0], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn position_encoding_rejects_out_of_bounds() {
        let bounds = PositionBounds::new(DVec3::splat(-1.0), DVec3::splat(1.0)).unwrap();
        let err = rgb_encode_positions(&[dvec3(0.0, 2.0, 0.0)], &bounds).unwrap_err();
        match err {
            RasterError::OutOfBounds { vertex, axis, .. } => {
                assert_eq!(vertex, 0);
                assert_eq!(axis, 'y');
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn position_round_trip() {
        let bounds = PositionBounds::new(dvec3(-3.0, 0.0, -7.0), dvec3(5.0, 2.0, 9.0)).unwrap();
        let mut state = 7u64;
        let mut points = Vec::new();
        for _ in 0..1000 {
            let mut coord = [0.0; 3];
            for c in &mut coord {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                *c = (state >> 11) as f64 / (1u64 << 53) as f64;
            }
            points.push(bounds.min + DVec3::from_array(coord) * (bounds.max - bounds.min));
        }
        let rgb = rgb_encode_positions(&points, &bounds).unwrap();
        let back = rgb_decode_positions(&rgb, &bounds);
        for (p, q) in points.iter().zip(&back) {
            assert!((*p - *q).length() < 1e-6);
        }
    }

    #[test]
    fn normal_encoding_examples() {
        let rgb = rgb_encode_normals(&[DVec3::Z]);
        assert_eq!(rgb[0], [0.5, 0.5, 1.0]);
        let rgb = rgb_encode_normals(&[-DVec3::X]);
        assert_eq!(rgb[0], [0.0, 0.5, 0.5]);
    }

    #[test]
    fn normal_round_trip() {
        let mut state = 99u64;
        let mut normals = Vec::new();
        while normals.len() < 1000 {
            let mut coord = [0.0; 3];
            for c in &mut coord {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                *c = (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
            }
            let v = DVec3::from_array(coord);
            if v.length() > 1e-3 {
                normals.push(v.normalize());
            }
        }
        let rgb = rgb_encode_normals(&normals);
        let back = rgb_decode_normals(&rgb);
        for (n, m) in normals.iter().zip(&back) {
            assert!((*n - *m).length() < 1e-6);
        }
    }

    #[test]
    fn constant_attribute_renders_constant() {
        let tri = big_triangle();
        let rig = build_camera_rig(&tri, 64).unwrap();
        let (map, sil) = rasterize_template(&tri, &rig, FRONT).unwrap();
        let attrs = vec![[0.25, 0.5, 0.75]; 3];
        let img = render_attribute(&map, &tri.faces, &attrs, AttrKind::Position, Owner::Garment)
            .unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let px = img.pixel(x, y);
                if sil.get(x, y) {
                    for (got, want) in px.iter().zip([0.25, 0.5, 0.75]) {
                        assert!((got - want).abs() < 1e-9);
                    }
                } else {
                    assert_eq!(px, [0.0; 3]);
                }
            }
        }
    }

    #[test]
    fn render_is_linear() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 64).unwrap();
        let (map, _) = rasterize_template(&cube, &rig, FRONT).unwrap();
        let mut state = 3u64;
        let mut rand_attr = |n: usize| {
            (0..n)
                .map(|_| {
                    let mut a = [0.0; 3];
                    for c in &mut a {
                        state = state
                            .wrapping_mul(6364136223846793005)
                            .wrapping_add(1442695040888963407);
                        *c = (state >> 11) as f64 / (1u64 << 53) as f64;
                    }
                    a
                })
                .collect::<Vec<_>>()
        };
        let xs = rand_attr(8);
        let ys = rand_attr(8);
        let (a, b) = (0.37, -1.21);
        let combo: Vec<[f64; 3]> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| [a * x[0] + b * y[0], a * x[1] + b * y[1], a * x[2] + b * y[2]])
            .collect();
        let img_x = render_attribute(&map, &cube.faces, &xs, AttrKind::Position, Owner::Garment)
            .unwrap();
        let img_y = render_attribute(&map, &cube.faces, &ys, AttrKind::Position, Owner::Garment)
            .unwrap();
        let img_c =
            render_attribute(&map, &cube.faces, &combo, AttrKind::Position, Owner::Garment)
                .unwrap();
        for i in 0..img_c.data.len() {
            let want = a * img_x.data[i] + b * img_y.data[i];
            assert!((img_c.data[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn adjoint_identity() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 32).unwrap();
        let (map, _) = rasterize_template(&cube, &rig, FRONT).unwrap();
        let mut state = 11u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for _ in 0..5 {
            let attrs: Vec<[f64; 3]> = (0..8).map(|_| [next(), next(), next()]).collect();
            let pixel_grad: Vec<f64> = (0..32 * 32 * 3).map(|_| next()).collect();
            let img =
                render_attribute(&map, &cube.faces, &attrs, AttrKind::Position, Owner::Garment)
                    .unwrap();
            let vgrad = render_adjoint(&map, &cube.faces, 8, &pixel_grad).unwrap();
            let lhs: f64 = img.data.iter().zip(&pixel_grad).map(|(a, b)| a * b).sum();
            let rhs: f64 = attrs
                .iter()
                .zip(&vgrad)
                .map(|(a, g)| a[0] * g[0] + a[1] * g[1] + a[2] * g[2])
                .sum();
            let denom = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!(
                ((lhs - rhs) / denom).abs() < 1e-5,
                "adjoint mismatch {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn adjoint_of_zero_grad_is_zero() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 32).unwrap();
        let (map, _) = rasterize_template(&cube, &rig, FRONT).unwrap();
        let grads = render_adjoint(&map, &cube.faces, 8, &vec![0.0; 32 * 32 * 3]).unwrap();
        assert!(grads.iter().all(|g| g == &[0.0; 3]));
    }

    #[test]
    fn adjoint_of_background_grad_is_zero() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 32).unwrap();
        let (map, sil) = rasterize_template(&cube, &rig, FRONT).unwrap();
        let mut grad = vec![0.0; 32 * 32 * 3];
        for y in 0..32 {
            for x in 0..32 {
                if !sil.get(x, y) {
                    for c in 0..3 {
                        grad[(y * 32 + x) * 3 + c] = 1.0;
                    }
                }
            }
        }
        let grads = render_adjoint(&map, &cube.faces, 8, &grad).unwrap();
        assert!(grads.iter().all(|g| g == &[0.0; 3]));
    }

    #[test]
    fn box_face_visibility() {
        let cube = unit_cube();
        let rig = build_camera_rig(&cube, 128).unwrap();
        let (map, _) = rasterize_template(&cube, &rig, FRONT).unwrap();
        let vis = vertex_visibility(&cube, &map, &rig, FRONT).unwrap();
        // Front face corners (z = 1) are visible from the front camera.
        for vi in [4, 5, 6, 7] {
            assert!(vis.entries[vi].visible, "front vertex {vi}");
        }
        // Back face corners (z = 0) are hidden behind the front face.
        for vi in [0, 1, 2, 3] {
            assert!(!vis.entries[vi].visible, "back vertex {vi}");
        }
    }

    #[test]
    fn visibility_matches_ray_cast_oracle() {
        // Two parallel sheets, the near one larger so it fully occludes
        // the far one from the front view.
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let grid = |n: usize, half: f64, z: f64, vertices: &mut Vec<DVec3>,
                        faces: &mut Vec<[usize; 3]>| {
            let base = vertices.len();
            for iy in 0..n {
                for ix in 0..n {
                    let fx = ix as f64 / (n - 1) as f64 * 2.0 - 1.0;
                    let fy = iy as f64 / (n - 1) as f64 * 2.0 - 1.0;
                    vertices.push(dvec3(fx * half, fy * half, z));
                }
            }
            for iy in 0..n - 1 {
                for ix in 0..n - 1 {
                    let a = base + iy * n + ix;
                    let b = a + 1;
                    let c = a + n;
                    let d = c + 1;
                    faces.push([a, b, d]);
                    faces.push([a, d, c]);
                }
            }
        };
        grid(16, 80.0, 20.0, &mut vertices, &mut faces); // near, larger
        grid(15, 40.0, -20.0, &mut vertices, &mut faces); // far, smaller
        let mesh = TriMesh::new(vertices, faces, "sheets");
        assert!(mesh.vertices.len() >= 450);

        let rig = build_camera_rig(&mesh, 256).unwrap();
        let (map, _) = rasterize_template(&mesh, &rig, FRONT).unwrap();
        let vis = vertex_visibility(&mesh, &map, &rig, FRONT).unwrap();

        // Brute-force ray cast from the camera to each vertex.
        let origin = rig.front.position;
        for (vi, &v) in mesh.vertices.iter().enumerate() {
            let dir = v - origin;
            let mut blocked = false;
            for face in &mesh.faces {
                if face.contains(&vi) {
                    continue;
                }
                let (a, b, c) = (
                    mesh.vertices[face[0]],
                    mesh.vertices[face[1]],
                    mesh.vertices[face[2]],
                );
                // Moller-Trumbore intersection.
                let e1 = b - a;
                let e2 = c - a;
                let p = dir.cross(e2);
                let det = e1.dot(p);
                if det.abs() < 1e-12 {
                    continue;
                }
                let inv = 1.0 / det;
                let s = origin - a;
                let u = s.dot(p) * inv;
                if !(0.0..=1.0).contains(&u) {
                    continue;
                }
                let q = s.cross(e1);
                let w = dir.dot(q) * inv;
                if w < 0.0 || u + w > 1.0 {
                    continue;
                }
                let t = e2.dot(q) * inv;
                if t > 1e-9 && t < 1.0 - 1e-6 {
                    blocked = true;
                    break;
                }
            }
            assert_eq!(
                vis.entries[vi].visible, !blocked,
                "vertex {vi} at {v:?} raster={} raycast_blocked={}",
                vis.entries[vi].visible, blocked
            );
        }
    }
}
