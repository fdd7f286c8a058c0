//! Two-stage multimodal fusion: vertex positions are initialized from the
//! transferred position images, smoothed under an edge-length objective,
//! then refined against the transferred normal images with edge, normal
//! consistency, displacement, and collision penalties.
//!
//! All loss terms are plain f64 functions with hand-derived analytic
//! gradients; the test suite checks every one of them against central
//! finite differences. The optimizer state keeps coordinates in meters
//! (inputs and outputs are millimeters) so the default learning rate and
//! loss weights are scale-appropriate for body-sized garments.

use glam::DVec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{build_bvh, signed_distance, surface_normal_at, GeomError, TriBVH};
use crate::image::{sample_image_bilinear, AttrKind, AttributeImage, ImageError, Silhouette};
use crate::mesh::{edge_set, EdgeSet, TriMesh};
use crate::raster::{
    build_camera_rig, rasterize_template, render_adjoint, rgb_decode_position, vertex_visibility,
    PositionBounds, RasterError, RasterMap, VisibilityTable, BACK, FRONT,
};

const MM_PER_M: f64 = 1000.0;

/// Smoothing width of the normal-rendering residual, in encoded image
/// units. The residual is sqrt(d^2 + eps^2) - eps: within eps of a plain
/// absolute difference, but with a gradient that vanishes as the residual
/// does, so Adam's normalized steps damp near convergence instead of
/// oscillating at learning-rate scale.
const CHARBONNIER_EPS: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("view `{view}` has no visible vertices")]
    NoVisibleVertices { view: String },
    #[error("stage {stage} diverged at step {step}: loss {loss:.6e} exceeds 10x initial {initial:.6e}")]
    Diverged {
        stage: u8,
        step: usize,
        loss: f64,
        initial: f64,
    },
    #[error("position image count/kind mismatch: expected front and back position images")]
    BadPositionImages,
    #[error("normal image count/kind mismatch: expected front and back normal images")]
    BadNormalImages,
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Loss weights and optimizer settings. Defaults: displacement 0.02,
/// edge and collision 100, normal consistency 0.01, learning rate 1e-3
/// on meter-scale coordinates, 100 steps per stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda_rv: f64,
    pub lambda_e: f64,
    pub lambda_rn: f64,
    pub lambda_c: f64,
    pub learning_rate: f64,
    pub steps_per_stage: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda_rv: 0.02,
            lambda_e: 100.0,
            lambda_rn: 0.01,
            lambda_c: 100.0,
            learning_rate: 1e-3,
            steps_per_stage: 100,
            seed: 0,
        }
    }
}

/// Per-step record of the stage-1 objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Step {
    pub step: usize,
    pub total: f64,
    pub edge: f64,
    pub reg_visible: f64,
}

/// Per-step record of the stage-2 objective (all five terms).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage2Step {
    pub step: usize,
    pub total: f64,
    pub normal_render: f64,
    pub normal_consistency: f64,
    pub edge: f64,
    pub reg_all: f64,
    pub collision: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FusionTrace {
    pub stage1: Vec<Stage1Step>,
    pub stage2: Vec<Stage2Step>,
}

/// Optimizer state: evolving vertex estimate plus anchors and visibility
/// classification from initialization. Coordinates in meters.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub positions: Vec<DVec3>,
    pub anchors: Vec<DVec3>,
    pub visible: Vec<bool>,
    adam: VertexAdam,
}

#[derive(Debug, Clone)]
struct VertexAdam {
    m: Vec<DVec3>,
    v: Vec<DVec3>,
    step: u64,
    lr: f64,
}

impl VertexAdam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![DVec3::ZERO; n],
            v: vec![DVec3::ZERO; n],
            step: 0,
            lr,
        }
    }

    fn step(&mut self, positions: &mut [DVec3], grads: &[DVec3]) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..positions.len() {
            let g = grads[i];
            self.m[i] = self.m[i] * BETA1 + g * (1.0 - BETA1);
            self.v[i] = self.v[i] * BETA2 + g * g * (1.0 - BETA2);
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let denom = DVec3::new(
                v_hat.x.sqrt() + EPS,
                v_hat.y.sqrt() + EPS,
                v_hat.z.sqrt() + EPS,
            );
            positions[i] -= self.lr * m_hat / denom;
        }
    }
}

// ---------------------------------------------------------------------
// Loss terms. Each returns (value, gradient w.r.t. positions).
// ---------------------------------------------------------------------

/// Mean squared deviation of edge lengths from their rest lengths.
pub fn loss_edge(positions: &[DVec3], edges: &EdgeSet) -> (f64, Vec<DVec3>) {
    let n = edges.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![DVec3::ZERO; positions.len()];
    for (e, &[i, j]) in edges.edges.iter().enumerate() {
        let d = positions[i] - positions[j];
        let len = d.length();
        let rest = edges.rest_lengths[e];
        let diff = len - rest;
        value += diff * diff;
        if len > 1e-12 {
            let g = d * (2.0 * diff / (len * n));
            grad[i] += g;
            grad[j] -= g;
        }
    }
    (value / n, grad)
}

/// Summed squared displacement from anchors over a vertex subset. The
/// plain (unnormalized) sum keeps the default displacement weight
/// meaningful: per-vertex it must balance the edge loss, which is a mean
/// over edges, so normalizing here would weaken the anchors by the
/// vertex count.
pub fn loss_reg(positions: &[DVec3], anchors: &[DVec3], subset: &[usize]) -> (f64, Vec<DVec3>) {
    let mut value = 0.0;
    let mut grad = vec![DVec3::ZERO; positions.len()];
    for &i in subset {
        let d = positions[i] - anchors[i];
        value += d.length_squared();
        grad[i] += d * 2.0;
    }
    (value, grad)
}

/// Area-weighted vertex normals plus what backward needs. Faces with
/// squared-cross-norm below `skip_cross_sq` are skipped; vertices with a
/// zero accumulated normal take the constant +z fallback (zero gradient).
struct NormalsForward {
    normals: Vec<DVec3>,
    accum: Vec<DVec3>,
    accum_len: Vec<f64>,
}

fn normals_forward(positions: &[DVec3], faces: &[[usize; 3]], skip_cross_sq: f64) -> NormalsForward {
    let mut accum = vec![DVec3::ZERO; positions.len()];
    for face in faces {
        let [a, b, c] = *face;
        let cross = (positions[b] - positions[a]).cross(positions[c] - positions[a]);
        if cross.length_squared() < skip_cross_sq {
            continue;
        }
        accum[a] += cross;
        accum[b] += cross;
        accum[c] += cross;
    }
    let mut normals = Vec::with_capacity(positions.len());
    let mut accum_len = Vec::with_capacity(positions.len());
    for g in &accum {
        let len = g.length();
        accum_len.push(len);
        normals.push(if len == 0.0 { DVec3::Z } else { *g / len });
    }
    NormalsForward {
        normals,
        accum,
        accum_len,
    }
}

/// Backpropagates per-vertex normal gradients to position gradients.
fn normals_backward(
    fwd: &NormalsForward,
    positions: &[DVec3],
    faces: &[[usize; 3]],
    skip_cross_sq: f64,
    normal_grad: &[DVec3],
    out: &mut [DVec3],
) {
    // d n / d g = (I - n n^T) / |g|
    let mut accum_grad = vec![DVec3::ZERO; positions.len()];
    for i in 0..positions.len() {
        if fwd.accum_len[i] == 0.0 {
            continue;
        }
        let n = fwd.normals[i];
        let g = normal_grad[i];
        accum_grad[i] = (g - n * n.dot(g)) / fwd.accum_len[i];
    }
    let _ = &fwd.accum;
    for face in faces {
        let [a, b, c] = *face;
        let u = positions[b] - positions[a];
        let w = positions[c] - positions[a];
        let cross = u.cross(w);
        if cross.length_squared() < skip_cross_sq {
            continue;
        }
        let cbar = accum_grad[a] + accum_grad[b] + accum_grad[c];
        if cbar == DVec3::ZERO {
            continue;
        }
        let du = w.cross(cbar);
        let dw = cbar.cross(u);
        out[a] -= du + dw;
        out[b] += du;
        out[c] += dw;
    }
}

/// One rendering target for the normal-rendering loss.
pub struct NormalRenderView<'a> {
    pub raster: &'a RasterMap,
    pub mask: &'a Silhouette,
    pub target: &'a AttributeImage,
}

/// Sum over views of the masked mean smoothed-L1 between the rendered
/// encoded vertex normals and the target normal images, with gradients
/// through the linear renderer and the normal computation.
pub fn loss_normal_render(
    positions: &[DVec3],
    faces: &[[usize; 3]],
    views: &[NormalRenderView<'_>],
    skip_cross_sq: f64,
) -> (f64, Vec<DVec3>) {
    let fwd = normals_forward(positions, faces, skip_cross_sq);
    let encoded: Vec<[f64; 3]> = fwd
        .normals
        .iter()
        .map(|n| [(n.x + 1.0) / 2.0, (n.y + 1.0) / 2.0, (n.z + 1.0) / 2.0])
        .collect();

    let mut value = 0.0;
    let mut normal_grad = vec![DVec3::ZERO; positions.len()];
    for view in views {
        let raster = view.raster;
        let masked = view.mask.coverage_count().max(1);
        let scale = 1.0 / (3 * masked) as f64;
        let mut pixel_grad = vec![0.0f64; raster.width * raster.height * 3];
        for y in 0..raster.height {
            for x in 0..raster.width {
                let Some(px) = raster.at(x, y) else { continue };
                if !view.mask.get(x, y) {
                    continue;
                }
                let face = faces[px.face as usize];
                let mut rendered = [0.0f64; 3];
                for (wgt, &vi) in px.bary.iter().zip(face.iter()) {
                    for c in 0..3 {
                        rendered[c] += wgt * encoded[vi][c];
                    }
                }
                let t = view.target.pixel(x, y);
                let base = (y * raster.width + x) * 3;
                for c in 0..3 {
                    let diff = rendered[c] - t[c];
                    let smooth = (diff * diff + CHARBONNIER_EPS * CHARBONNIER_EPS).sqrt();
                    value += (smooth - CHARBONNIER_EPS) * scale;
                    pixel_grad[base + c] = diff / smooth * scale;
                }
            }
        }
        let rgb_grad = render_adjoint(raster, faces, positions.len(), &pixel_grad)
            .expect("pixel grad shape matches raster");
        // d encoded / d normal = 1/2 per channel.
        for (g, rgb) in normal_grad.iter_mut().zip(rgb_grad) {
            *g += DVec3::new(rgb[0], rgb[1], rgb[2]) * 0.5;
        }
    }

    let mut grad = vec![DVec3::ZERO; positions.len()];
    normals_backward(&fwd, positions, faces, skip_cross_sq, &normal_grad, &mut grad);
    (value, grad)
}

/// Mean over edges of (1 - n_i . n_j) with n the vertex normals.
pub fn loss_normal_consistency(
    positions: &[DVec3],
    faces: &[[usize; 3]],
    edges: &EdgeSet,
    skip_cross_sq: f64,
) -> (f64, Vec<DVec3>) {
    let fwd = normals_forward(positions, faces, skip_cross_sq);
    let n = edges.len().max(1) as f64;
    let mut value = 0.0;
    let mut normal_grad = vec![DVec3::ZERO; positions.len()];
    for &[i, j] in &edges.edges {
        value += 1.0 - fwd.normals[i].dot(fwd.normals[j]);
        normal_grad[i] -= fwd.normals[j] / n;
        normal_grad[j] -= fwd.normals[i] / n;
    }
    let mut grad = vec![DVec3::ZERO; positions.len()];
    normals_backward(&fwd, positions, faces, skip_cross_sq, &normal_grad, &mut grad);
    (value / n, grad)
}

/// Mean penetration depth: (1/N) sum max(0, -sdf). The closest point is
/// held fixed within the step, so the gradient pushes penetrating
/// vertices along the pseudo-normal of their closest feature.
pub fn loss_collision(positions: &[DVec3], body: &TriBVH) -> (f64, Vec<DVec3>) {
    let n = positions.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![DVec3::ZERO; positions.len()];
    for (i, &p) in positions.iter().enumerate() {
        let hit = signed_distance(p, body);
        if hit.distance < 0.0 {
            value += -hit.distance;
            let dir = hit.gradient(p, surface_normal_at(body, &hit));
            grad[i] = -dir / n;
        }
    }
    (value / n, grad)
}

// ---------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------

/// Everything initialization needs for one view.
pub struct ViewInputs<'a> {
    pub position_image: &'a AttributeImage,
    pub mask: &'a Silhouette,
    pub visibility: &'a VisibilityTable,
}

/// Initial vertex estimate in mm: visible vertices sample the position
/// images at their projected template coordinates (the view with the
/// larger depth margin wins when both see the vertex); hidden vertices
/// interpolate between their nearest front- and back-visible neighbors in
/// template space, weighted inversely by distance.
pub fn init_positions(
    front: &ViewInputs<'_>,
    back: &ViewInputs<'_>,
    template: &TriMesh,
    bounds: &PositionBounds,
) -> Result<(Vec<DVec3>, Vec<bool>), FusionError> {
    let n = template.vertices.len();
    let front_visible = front.visibility.visible_indices();
    let back_visible = back.visibility.visible_indices();
    if front_visible.is_empty() {
        return Err(FusionError::NoVisibleVertices {
            view: FRONT.to_string(),
        });
    }
    if back_visible.is_empty() {
        return Err(FusionError::NoVisibleVertices {
            view: BACK.to_string(),
        });
    }

    let sample = |view: &ViewInputs<'_>, vi: usize| -> Result<DVec3, FusionError> {
        let e = &view.visibility.entries[vi];
        let rgb = sample_image_bilinear(view.position_image, view.mask, e.pixel[0], e.pixel[1])?;
        Ok(rgb_decode_position(rgb, bounds))
    };

    let mut positions = vec![DVec3::ZERO; n];
    let mut visible = vec![false; n];
    for vi in 0..n {
        let f = &front.visibility.entries[vi];
        let b = &back.visibility.entries[vi];
        match (f.visible, b.visible) {
            (true, true) => {
                visible[vi] = true;
                positions[vi] = if f.margin >= b.margin {
                    sample(front, vi)?
                } else {
                    sample(back, vi)?
                };
            }
            (true, false) => {
                visible[vi] = true;
                positions[vi] = sample(front, vi)?;
            }
            (false, true) => {
                visible[vi] = true;
                positions[vi] = sample(back, vi)?;
            }
            (false, false) => {}
        }
    }
    for vi in 0..n {
        if visible[vi] {
            continue;
        }
        let (a, da) = crate::geom::nearest_in_set(vi, &front_visible, template)?;
        let (b, db) = crate::geom::nearest_in_set(vi, &back_visible, template)?;
        let denom = da + db;
        let w = if denom > 0.0 { db / denom } else { 0.5 };
        positions[vi] = positions[a] * w + positions[b] * (1.0 - w);
    }
    Ok((positions, visible))
}

// ---------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------

/// Absolute slack in the divergence guard: a 10x-over-initial rule is
/// meaningless when the run starts at a numerically zero loss, so growth
/// below this floor is never treated as divergence.
const DIVERGENCE_FLOOR: f64 = 0.1;

fn guard_divergence(
    stage: u8,
    step: usize,
    loss: f64,
    initial: f64,
) -> Result<(), FusionError> {
    if !loss.is_finite() || loss > 10.0 * initial + DIVERGENCE_FLOOR {
        return Err(FusionError::Diverged {
            stage,
            step,
            loss,
            initial,
        });
    }
    Ok(())
}

/// Stage 1: smooth the initialization by minimizing
/// edge_loss + lambda_rv * displacement of visible vertices.
pub fn stage1_optimize(
    state: &mut FusionState,
    edges_m: &EdgeSet,
    cfg: &FusionConfig,
) -> Result<Vec<Stage1Step>, FusionError> {
    let subset: Vec<usize> = (0..state.positions.len())
        .filter(|&i| state.visible[i])
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps_per_stage);
    let mut initial_total = f64::INFINITY;
    for step in 0..cfg.steps_per_stage {
        let (edge, edge_grad) = loss_edge(&state.positions, edges_m);
        let (reg, reg_grad) = loss_reg(&state.positions, &state.anchors, &subset);
        let total = edge + cfg.lambda_rv * reg;
        if step == 0 {
            initial_total = total;
        }
        guard_divergence(1, step, total, initial_total)?;
        trace.push(Stage1Step {
            step,
            total,
            edge,
            reg_visible: reg,
        });
        let grads: Vec<DVec3> = edge_grad
            .iter()
            .zip(&reg_grad)
            .map(|(e, r)| *e + *r * cfg.lambda_rv)
            .collect();
        state.adam.step(&mut state.positions, &grads);
    }
    Ok(trace)
}

/// Inputs for one stage-2 view.
pub struct Stage2View<'a> {
    pub raster: &'a RasterMap,
    pub mask: &'a Silhouette,
    pub normal_target: &'a AttributeImage,
}

/// Stage 2: recover wrinkles by minimizing the full objective
/// normal_render + lambda_rn * consistency + lambda_e * edge
/// + lambda_rv * displacement(all) + lambda_c * collision.
/// Anchors must hold the stage-1 result.
pub fn stage2_optimize(
    state: &mut FusionState,
    faces: &[[usize; 3]],
    edges_m: &EdgeSet,
    views: &[Stage2View<'_>],
    body_m: &TriBVH,
    skip_cross_sq: f64,
    cfg: &FusionConfig,
) -> Result<Vec<Stage2Step>, FusionError> {
    // Polyak tail average: Adam at a fixed learning rate oscillates
    // around the optimum at learning-rate scale; averaging the last
    // steps cancels the zero-mean part of that oscillation.
    let tail = (cfg.steps_per_stage / 3).max(1);
    let mut tail_sum = vec![DVec3::ZERO; state.positions.len()];
    let mut tail_count = 0usize;
    let all: Vec<usize> = (0..state.positions.len()).collect();
    let render_views: Vec<NormalRenderView<'_>> = views
        .iter()
        .map(|v| NormalRenderView {
            raster: v.raster,
            mask: v.mask,
            target: v.normal_target,
        })
        .collect();
    let mut trace = Vec::with_capacity(cfg.steps_per_stage);
    let mut initial_total = f64::INFINITY;
    for step in 0..cfg.steps_per_stage {
        let (lr_val, lr_grad) =
            loss_normal_render(&state.positions, faces, &render_views, skip_cross_sq);
        let (lrn, lrn_grad) =
            loss_normal_consistency(&state.positions, faces, edges_m, skip_cross_sq);
        let (le, le_grad) = loss_edge(&state.positions, edges_m);
        let (lrv, lrv_grad) = loss_reg(&state.positions, &state.anchors, &all);
        let (lc, lc_grad) = loss_collision(&state.positions, body_m);
        let total = lr_val
            + cfg.lambda_rn * lrn
            + cfg.lambda_e * le
            + cfg.lambda_rv * lrv
            + cfg.lambda_c * lc;
        if step == 0 {
            initial_total = total;
        }
        guard_divergence(2, step, total, initial_total)?;
        trace.push(Stage2Step {
            step,
            total,
            normal_render: lr_val,
            normal_consistency: lrn,
            edge: le,
            reg_all: lrv,
            collision: lc,
        });
        let grads: Vec<DVec3> = (0..state.positions.len())
            .map(|i| {
                lr_grad[i]
                    + lrn_grad[i] * cfg.lambda_rn
                    + le_grad[i] * cfg.lambda_e
                    + lrv_grad[i] * cfg.lambda_rv
                    + lc_grad[i] * cfg.lambda_c
            })
            .collect();
        state.adam.step(&mut state.positions, &grads);
        if step + tail >= cfg.steps_per_stage {
            for (s, p) in tail_sum.iter_mut().zip(&state.positions) {
                *s += *p;
            }
            tail_count += 1;
        }
    }
    if tail_count > 0 {
        for (p, s) in state.positions.iter_mut().zip(&tail_sum) {
            *p = *s / tail_count as f64;
        }
    }
    Ok(trace)
}

/// Result of a complete fusion run.
pub struct FusionOutput {
    pub mesh: TriMesh,
    pub stage1_mesh: TriMesh,
    pub init_mesh: TriMesh,
    pub trace: FusionTrace,
}

/// End-to-end fusion: initialization from position images, stage-1
/// smoothing, stage-2 normal fusion. Images must be front/back pairs
/// rendered over `template`'s projection with `bounds`; `body` is the
/// posed body mesh in the same (root-normalized) space, in mm.
pub fn fuse(
    position_images: &[AttributeImage],
    normal_images: &[AttributeImage],
    template: &TriMesh,
    body: &TriMesh,
    bounds: &PositionBounds,
    cfg: &FusionConfig,
) -> Result<FusionOutput, FusionError> {
    let find = |imgs: &'_ [AttributeImage], kind: AttrKind, view: &str| -> Option<usize> {
        imgs.iter().position(|i| i.kind == kind && i.view == view)
    };
    let pf = find(position_images, AttrKind::Position, FRONT)
        .ok_or(FusionError::BadPositionImages)?;
    let pb = find(position_images, AttrKind::Position, BACK)
        .ok_or(FusionError::BadPositionImages)?;
    let nf = find(normal_images, AttrKind::Normal, FRONT).ok_or(FusionError::BadNormalImages)?;
    let nb = find(normal_images, AttrKind::Normal, BACK).ok_or(FusionError::BadNormalImages)?;

    let resolution = position_images[pf].width;
    let rig = build_camera_rig(template, resolution)?;
    let (raster_f, mask_f) = rasterize_template(template, &rig, FRONT)?;
    let (raster_b, mask_b) = rasterize_template(template, &rig, BACK)?;
    let vis_f = vertex_visibility(template, &raster_f, &rig, FRONT)?;
    let vis_b = vertex_visibility(template, &raster_b, &rig, BACK)?;

    let (init_mm, visible) = init_positions(
        &ViewInputs {
            position_image: &position_images[pf],
            mask: &mask_f,
            visibility: &vis_f,
        },
        &ViewInputs {
            position_image: &position_images[pb],
            mask: &mask_b,
            visibility: &vis_b,
        },
        template,
        bounds,
    )?;

    // Meter-scale working copies.
    let to_m = |v: &DVec3| *v / MM_PER_M;
    let positions_m: Vec<DVec3> = init_mm.iter().map(to_m).collect();
    let template_m = TriMesh::new(
        template.vertices.iter().map(to_m).collect(),
        template.faces.clone(),
        "template_m",
    );
    let edges_m = edge_set(&template_m);
    let body_m = TriMesh::new(
        body.vertices.iter().map(to_m).collect(),
        body.faces.clone(),
        "body_m",
    );
    let body_bvh = build_bvh(&body_m)?;
    // Degenerate-face cutoff, scaled from the mm-space normal rule:
    // cross norm 2e-9 mm^2 -> (2e-9 * 1e-6)^2 in squared meter units.
    let skip_cross_sq = (2.0 * crate::mesh::DEGENERATE_FACE_AREA * 1e-6).powi(2);

    let mut state = FusionState {
        anchors: positions_m.clone(),
        positions: positions_m,
        visible,
        adam: VertexAdam::new(template.vertices.len(), cfg.learning_rate),
    };

    let init_anchors = state.anchors.clone();
    let stage1 = stage1_optimize(&mut state, &edges_m, cfg)?;
    let stage1_mm: Vec<DVec3> = state.positions.iter().map(|v| *v * MM_PER_M).collect();

    // Stage 2 anchors: visible vertices keep their image-sampled
    // positions (the displacement term is what ties the optimization to
    // the position observations); hidden vertices, which have no image
    // observation, anchor to the smoothed stage-1 estimate. Adam
    // restarts between stages.
    state.anchors = (0..state.positions.len())
        .map(|i| {
            if state.visible[i] {
                init_anchors[i]
            } else {
                state.positions[i]
            }
        })
        .collect();
    state.adam = VertexAdam::new(template.vertices.len(), cfg.learning_rate);
    let views = [
        Stage2View {
            raster: &raster_f,
            mask: &mask_f,
            normal_target: &normal_images[nf],
        },
        Stage2View {
            raster: &raster_b,
            mask: &mask_b,
            normal_target: &normal_images[nb],
        },
    ];
    let stage2 = stage2_optimize(
        &mut state,
        &template.faces,
        &edges_m,
        &views,
        &body_bvh,
        skip_cross_sq,
        cfg,
    )?;

    let final_mm: Vec<DVec3> = state.positions.iter().map(|v| *v * MM_PER_M).collect();
    Ok(FusionOutput {
        mesh: TriMesh::new(final_mm, template.faces.clone(), "fused"),
        stage1_mesh: TriMesh::new(stage1_mm, template.faces.clone(), "stage1"),
        init_mesh: TriMesh::new(init_mm, template.faces.clone(), "init"),
        trace: FusionTrace { stage1, stage2 },
    })
}
