//! Deterministic procedural data: capsule-chain bodies, tube and sheet
//! garment templates, and pose-conditioned ground-truth deformations with
//! a smooth bend field plus pose-dependent high-frequency wrinkles.
//!
//! Everything here is a pure function of its configuration and seed, so
//! datasets regenerate bit-identically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use glam::{DMat3, DVec3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{build_bvh, signed_distance, surface_normal_at};
use crate::image::{write_pfm, write_pgm, AttrKind, Owner};
use crate::mesh::{save_obj, vertex_normals, RootTransform, TriMesh};
use crate::raster::{
    rasterize_template, render_attribute, rgb_encode_normals, rgb_encode_positions, CameraRig,
    PositionBounds, RasterError, BACK, FRONT,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("body rig needs at least one segment")]
    EmptyRig,
    #[error("pose has {got} joint angles but the rig has {expected} joints")]
    PoseLengthMismatch { got: usize, expected: usize },
    #[error("joint angle {index} is {angle} rad, outside +/- pi/2")]
    JointAngleOutOfRange { index: usize, angle: f64 },
    #[error("pose self-intersects: segments {a} and {b} are {dist:.2} mm apart, need {need:.2}")]
    SelfIntersectingPose {
        a: usize,
        b: usize,
        dist: f64,
        need: f64,
    },
    #[error("garment spec too tight: template vertex {vertex} is {sdf:.3} mm from the body, margin is {margin:.3}")]
    SpecTooTight { vertex: usize, sdf: f64, margin: f64 },
    #[error("garment resolution {rings}x{segments} is below the 8x8 minimum")]
    ResolutionTooLow { rings: usize, segments: usize },
    #[error(transparent)]
    Mesh(#[from] crate::mesh::MeshError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
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
}

/// One capsule segment of the body chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySegment {
    /// Length along the chain, mm.
    pub length: f64,
    /// Capsule radius, mm.
    pub radius: f64,
}

/// Capsule-chain body: segments stacked along +y from the origin, with a
/// bend joint (rotation about +x) between consecutive segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyRig {
    pub segments: Vec<BodySegment>,
    /// Azimuthal resolution of the generated mesh.
    pub ring_sides: usize,
    /// Rings per segment along the chain.
    pub rings_per_segment: usize,
}

impl BodyRig {
    pub fn joint_count(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    fn validate_pose(&self, pose: &[f64]) -> Result<(), SynthError> {
        if self.segments.is_empty() {
            return Err(SynthError::EmptyRig);
        }
        if pose.len() != self.joint_count() {
            return Err(SynthError::PoseLengthMismatch {
                got: pose.len(),
                expected: self.joint_count(),
            });
        }
        for (index, &angle) in pose.iter().enumerate() {
            if angle.abs() > std::f64::consts::FRAC_PI_2 {
                return Err(SynthError::JointAngleOutOfRange { index, angle });
            }
        }
        Ok(())
    }
}

/// Rigid frame of the chain cross-section at a given height.
#[derive(Debug, Clone, Copy)]
pub struct ChainFrame {
    pub rotation: DMat3,
    pub position: DVec3,
}

/// Smooth bend field along the chain. Joint rotations ramp in over a
/// blend band around each joint (smoothstep), and positions integrate the
/// bent tangent. The zero pose is the identity map, exactly.
#[derive(Debug, Clone)]
pub struct ChainField {
    joints: Vec<JointBand>,
    pub total_length: f64,
    identity: bool,
    /// (height, frame) anchors at piece boundaries plus dense samples
    /// inside blend bands.
    anchors: Vec<(f64, DMat3, DVec3)>,
}

#[derive(Debug, Clone, Copy)]
struct JointBand {
    center: f64,
    half_width: f64,
    angle: f64,
}

const BAND_STEPS: usize = 64;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl ChainField {
    pub fn new(rig: &BodyRig, pose: &[f64]) -> Result<Self, SynthError> {
        rig.validate_pose(pose)?;
        let identity = pose.iter().all(|a| *a == 0.0);
        let mut joints = Vec::new();
        let mut cumulative = 0.0;
        for (j, seg) in rig.segments.iter().enumerate() {
            cumulative += seg.length;
            if j + 1 < rig.segments.len() {
                let next = rig.segments[j + 1].length;
                let half_width = 0.2 * seg.length.min(next);
                joints.push(JointBand {
                    center: cumulative,
                    half_width,
                    angle: pose[j],
                });
            }
        }
        let total_length = rig.total_length();

        // Walk the chain once, storing anchors at piece boundaries and a
        // dense trapezoid integration inside each band.
        let mut anchors = Vec::new();
        let mut rot = DMat3::IDENTITY;
        let mut pos = DVec3::ZERO;
        let mut h = 0.0;
        anchors.push((h, rot, pos));
        for band in &joints {
            let band_start = band.center - band.half_width;
            let band_end = band.center + band.half_width;
            // Straight piece up to the band.
            pos += rot * DVec3::Y * (band_start - h);
            h = band_start;
            anchors.push((h, rot, pos));
            // Inside the band, the local rotation angle ramps by
            // smoothstep; integrate the tangent numerically.
            let base_rot = rot;
            let dt = (band_end - band_start) / BAND_STEPS as f64;
            let mut prev_dir = base_rot * DVec3::Y;
            for step in 1..=BAND_STEPS {
                let t = step as f64 / BAND_STEPS as f64;
                let r = base_rot * DMat3::from_rotation_x(band.angle * smoothstep(t));
                let dir = r * DVec3::Y;
                pos += (prev_dir + dir) * (0.5 * dt);
                prev_dir = dir;
                h = band_start + dt * step as f64;
                anchors.push((h, r, pos));
            }
            rot = base_rot * DMat3::from_rotation_x(band.angle);
            h = band_end;
        }
        // Final straight piece.
        pos += rot * DVec3::Y * (total_length - h);
        anchors.push((total_length, rot, pos));

        Ok(Self {
            joints,
            total_length,
            identity,
            anchors,
        })
    }

    /// Frame of the cross-section at height `h` along the rest chain.
    /// Heights outside [0, total] extend rigidly from the nearest end.
    pub fn frame(&self, h: f64) -> ChainFrame {
        if self.identity {
            return ChainFrame {
                rotation: DMat3::IDENTITY,
                position: DVec3::Y * h,
            };
        }
        // Binary search for the anchor piece containing h.
        let idx = match self
            .anchors
            .binary_search_by(|(ah, _, _)| ah.partial_cmp(&h).unwrap())
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        };
        let (ah, rot, pos) = self.anchors[idx.min(self.anchors.len() - 1)];
        // Anchors are dense inside bands; between them the rotation is
        // constant and the tangent straight, so extension is exact on
        // straight pieces and sub-step accurate inside bands.
        let rotation = self.exact_rotation(h);
        ChainFrame {
            rotation,
            position: pos + rot * DVec3::Y * (h - ah),
        }
    }

    fn exact_rotation(&self, h: f64) -> DMat3 {
        let mut rot = DMat3::IDENTITY;
        for band in &self.joints {
            let t = (h - (band.center - band.half_width)) / (2.0 * band.half_width);
            let s = smoothstep(t);
            if s <= 0.0 {
                break;
            }
            rot *= DMat3::from_rotation_x(band.angle * s);
        }
        rot
    }

    /// Warps a rest-space point: the cross-section at its height moves
    /// rigidly with the chain.
    pub fn warp(&self, p: DVec3) -> DVec3 {
        if self.identity {
            return p;
        }
        let f = self.frame(p.y);
        f.position + f.rotation * DVec3::new(p.x, 0.0, p.z)
    }

    /// Chord endpoints of each segment, used for self-intersection tests.
    fn segment_chords(&self, rig: &BodyRig) -> Vec<(DVec3, DVec3)> {
        let mut out = Vec::new();
        let mut h = 0.0;
        for seg in &rig.segments {
            let a = self.frame(h).position;
            let b = self.frame(h + seg.length).position;
            out.push((a, b));
            h += seg.length;
        }
        out
    }
}

fn segment_segment_distance(p1: DVec3, q1: DVec3, p2: DVec3, q2: DVec3) -> f64 {
    // Closest distance between two segments (Ericson).
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.length_squared();
    let e = d2.length_squared();
    let f = d2.dot(r);
    let (s, t);
    if a <= 1e-12 && e <= 1e-12 {
        return r.length();
    }
    if a <= 1e-12 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(r);
        if e <= 1e-12 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(d2);
            let denom = a * e - b * b;
            let mut s_ = if denom != 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t_ = (b * s_ + f) / e;
            if t_ < 0.0 {
                t_ = 0.0;
                s_ = (-c / a).clamp(0.0, 1.0);
            } else if t_ > 1.0 {
                t_ = 1.0;
                s_ = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s_;
            t = t_;
        }
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).length()
}

/// Builds the watertight posed body mesh: rings along the bent chain with
/// hemispherical caps, consistently wound outward.
pub fn make_body(rig: &BodyRig, pose: &[f64]) -> Result<TriMesh, SynthError> {
    let field = ChainField::new(rig, pose)?;

    // Reject poses where non-adjacent capsules touch. Pairs whose
    // connecting chain is shorter than the radii sum overlap even on a
    // straight chain, so only genuinely folded configurations count.
    let chords = field.segment_chords(rig);
    for i in 0..chords.len() {
        for j in (i + 2)..chords.len() {
            let need = rig.segments[i].radius + rig.segments[j].radius;
            let between: f64 = rig.segments[i + 1..j].iter().map(|s| s.length).sum();
            if between < need {
                continue;
            }
            let dist = segment_segment_distance(chords[i].0, chords[i].1, chords[j].0, chords[j].1);
            if dist < need {
                return Err(SynthError::SelfIntersectingPose {
                    a: i,
                    b: j,
                    dist,
                    need,
                });
            }
        }
    }

    let sides = rig.ring_sides.max(3);
    let cap_stacks = 4usize;
    let total = rig.total_length();

    // Ring heights: uniform per segment, shared at joints.
    let mut heights = Vec::new();
    let mut h0 = 0.0;
    for (si, seg) in rig.segments.iter().enumerate() {
        let n = rig.rings_per_segment.max(1);
        let start = if si == 0 { 0 } else { 1 };
        for k in start..=n {
            heights.push(h0 + seg.length * k as f64 / n as f64);
        }
        h0 += seg.length;
    }
    if heights.first() != Some(&0.0) {
        heights.insert(0, 0.0);
    }

    let radius_at = |h: f64| -> f64 {
        let mut acc = 0.0;
        for (si, seg) in rig.segments.iter().enumerate() {
            if h <= acc + seg.length || si == rig.segments.len() - 1 {
                // Blend radii linearly across the joint band.
                if si + 1 < rig.segments.len() {
                    let band = 0.2 * seg.length.min(rig.segments[si + 1].length);
                    let joint = acc + seg.length;
                    if h > joint - band {
                        let t = (h - (joint - band)) / (2.0 * band);
                        return seg.radius
                            + (rig.segments[si + 1].radius - seg.radius) * smoothstep(t);
                    }
                }
                if si > 0 {
                    let prev = rig.segments[si - 1];
                    let band = 0.2 * prev.length.min(seg.length);
                    if h < acc + band {
                        let t = (h - (acc - band)) / (2.0 * band);
                        return prev.radius + (seg.radius - prev.radius) * smoothstep(t);
                    }
                }
                return seg.radius;
            }
            acc += seg.length;
        }
        rig.segments.last().unwrap().radius
    };

    let mut vertices: Vec<DVec3> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();

    let ring_at = |h: f64, r: f64, vertices: &mut Vec<DVec3>| -> usize {
        let f = field.frame(h);
        let base = vertices.len();
        for s in 0..sides {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / sides as f64;
            let local = DVec3::new(phi.cos() * r, 0.0, phi.sin() * r);
            vertices.push(f.position + f.rotation * local);
        }
        base
    };

    // Bottom cap: pole plus cap_stacks-1 latitude rings below h=0.
    let r0 = radius_at(0.0);
    let f0 = field.frame(0.0);
    let pole_bottom = vertices.len();
    vertices.push(f0.position - f0.rotation * DVec3::Y * r0);
    let mut prev_ring: Option<usize> = None;
    for k in 1..cap_stacks {
        let polar = std::f64::consts::FRAC_PI_2 * k as f64 / cap_stacks as f64;
        let ring_r = r0 * polar.sin();
        let drop = r0 * polar.cos();
        let base = vertices.len();
        for s in 0..sides {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / sides as f64;
            let local = DVec3::new(phi.cos() * ring_r, -drop, phi.sin() * ring_r);
            vertices.push(f0.position + f0.rotation * local);
        }
        if let Some(prev) = prev_ring {
            stitch(prev, base, sides, &mut faces);
        } else {
            // Fan from the bottom pole; outward = downward here, so wind
            // so normals point away from the axis.
            for s in 0..sides {
                let s1 = (s + 1) % sides;
                faces.push([pole_bottom, base + s, base + s1]);
            }
        }
        prev_ring = Some(base);
    }

    // Tube rings.
    let mut last = prev_ring;
    for &h in &heights {
        let base = ring_at(h, radius_at(h), &mut vertices);
        if let Some(prev) = last {
            stitch(prev, base, sides, &mut faces);
        }
        last = Some(base);
    }

    // Top cap.
    let r1 = radius_at(total);
    let f1 = field.frame(total);
    for k in (1..cap_stacks).rev() {
        let polar = std::f64::consts::FRAC_PI_2 * k as f64 / cap_stacks as f64;
        let ring_r = r1 * polar.sin();
        let rise = r1 * polar.cos();
        let base = vertices.len();
        for s in 0..sides {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / sides as f64;
            let local = DVec3::new(phi.cos() * ring_r, rise, phi.sin() * ring_r);
            vertices.push(f1.position + f1.rotation * local);
        }
        stitch(last.unwrap(), base, sides, &mut faces);
        last = Some(base);
    }
    let pole_top = vertices.len();
    vertices.push(f1.position + f1.rotation * DVec3::Y * r1);
    let base = last.unwrap();
    for s in 0..sides {
        let s1 = (s + 1) % sides;
        faces.push([pole_top, base + s1, base + s]);
    }

    let mesh = TriMesh::new(vertices, faces, "body");
    mesh.validate()?;
    Ok(mesh)
}

/// Connects two rings of `sides` vertices with outward-wound quads.
fn stitch(lower: usize, upper: usize, sides: usize, faces: &mut Vec<[usize; 3]>) {
    for s in 0..sides {
        let s1 = (s + 1) % sides;
        // Ring azimuth runs x -> z, which is clockwise seen from +y, so
        // this order faces outward.
        faces.push([lower + s, upper + s, upper + s1]);
        faces.push([lower + s, upper + s1, lower + s1]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentTopology {
    Tube,
    Sheet,
}

/// Procedural garment template description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub topology: GarmentTopology,
    /// Rings along the chain (rows for a sheet).
    pub rings: usize,
    /// Azimuthal segments (columns for a sheet).
    pub segments: usize,
    /// Tube radius, or sheet stand-off distance from the chain axis, mm.
    pub radius: f64,
    /// Sheet width, mm (unused for tubes).
    pub width: f64,
    /// Chain heights covered by the garment, mm.
    pub y_start: f64,
    pub y_end: f64,
}

/// A generated garment template: the mesh in canonical (zero pose) space,
/// the attachment ring pinned to the body, and the per-vertex wrinkle
/// parameter coordinate.
#[derive(Debug, Clone)]
pub struct GarmentTemplate {
    pub mesh: TriMesh,
    /// Vertices of the top ring; they follow the chain rigidly.
    pub attachment: Vec<usize>,
    /// Angular/param coordinate for the wrinkle field, radians.
    pub param_u: Vec<f64>,
}

/// Counts for the chosen tessellation, usable as an audit oracle.
pub fn garment_counts(spec: &GarmentSpec) -> (usize, usize) {
    match spec.topology {
        GarmentTopology::Tube => (
            spec.rings * spec.segments,
            2 * spec.segments * (spec.rings - 1),
        ),
        GarmentTopology::Sheet => (
            spec.rings * spec.segments,
            2 * (spec.segments - 1) * (spec.rings - 1),
        ),
    }
}

/// Builds the canonical-space garment and verifies it clears the zero-pose
/// body by at least `margin`.
pub fn make_garment_template(
    spec: &GarmentSpec,
    rig: &BodyRig,
    margin: f64,
) -> Result<GarmentTemplate, SynthError> {
    if spec.rings < 8 || spec.segments < 8 {
        return Err(SynthError::ResolutionTooLow {
            rings: spec.rings,
            segments: spec.segments,
        });
    }
    let mut vertices = Vec::with_capacity(spec.rings * spec.segments);
    let mut faces = Vec::new();
    let mut param_u = Vec::with_capacity(spec.rings * spec.segments);

    match spec.topology {
        GarmentTopology::Tube => {
            for ring in 0..spec.rings {
                let t = ring as f64 / (spec.rings - 1) as f64;
                let y = spec.y_start + (spec.y_end - spec.y_start) * t;
                for s in 0..spec.segments {
                    let phi = 2.0 * std::f64::consts::PI * s as f64 / spec.segments as f64;
                    vertices.push(DVec3::new(
                        phi.cos() * spec.radius,
                        y,
                        phi.sin() * spec.radius,
                    ));
                    param_u.push(phi);
                }
            }
            for ring in 0..spec.rings - 1 {
                let lower = ring * spec.segments;
                let upper = (ring + 1) * spec.segments;
                for s in 0..spec.segments {
                    let s1 = (s + 1) % spec.segments;
                    faces.push([lower + s, upper + s, upper + s1]);
                    faces.push([lower + s, upper + s1, lower + s1]);
                }
            }
        }
        GarmentTopology::Sheet => {
            for ring in 0..spec.rings {
                let t = ring as f64 / (spec.rings - 1) as f64;
                let y = spec.y_start + (spec.y_end - spec.y_start) * t;
                for s in 0..spec.segments {
                    let u = s as f64 / (spec.segments - 1) as f64;
                    let x = (u - 0.5) * spec.width;
                    vertices.push(DVec3::new(x, y, spec.radius));
                    param_u.push(u * 2.0 * std::f64::consts::PI);
                }
            }
            for ring in 0..spec.rings - 1 {
                let lower = ring * spec.segments;
                let upper = (ring + 1) * spec.segments;
                for s in 0..spec.segments - 1 {
                    // Wound so normals face +z, away from the body.
                    faces.push([lower + s, upper + s + 1, upper + s]);
                    faces.push([lower + s, lower + s + 1, upper + s + 1]);
                }
            }
        }
    }

    // Attachment ring: the top ring (largest y).
    let top = (spec.rings - 1) * spec.segments;
    let attachment: Vec<usize> = (top..top + spec.segments).collect();

    let mesh = TriMesh::new(vertices, faces, "garment_template");
    mesh.validate()?;

    // Clearance check against the zero-pose body.
    let body = make_body(rig, &vec![0.0; rig.joint_count()])?;
    let bvh = build_bvh(&body)?;
    for (vi, &v) in mesh.vertices.iter().enumerate() {
        let sdf = signed_distance(v, &bvh).distance;
        if sdf < margin {
            return Err(SynthError::SpecTooTight {
                vertex: vi,
                sdf,
                margin,
            });
        }
    }

    Ok(GarmentTemplate {
        mesh,
        attachment,
        param_u,
    })
}

/// Ground-truth deformation parameters: wrinkle field plus collision
/// margin. The wrinkle phase depends on the pose, so wrinkle content
/// carries pose information the transfer networks can learn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationModel {
    /// Wrinkle amplitude, mm.
    pub amplitude: f64,
    /// Wrinkle wave count around the parameter coordinate (integer keeps
    /// tube wrinkles seamless).
    pub wave_count: f64,
    /// Phase coupling: phase = coupling * sum of joint angles.
    pub phase_coupling: f64,
    /// Minimum clearance from the body, mm.
    pub collision_margin: f64,
    pub seed: u64,
}

/// Fraction of garment height over which wrinkles fade out toward the
/// attachment ring.
const WRINKLE_TAPER: f64 = 0.15;

/// Deforms the garment template for a pose: smooth chain warp, plus
/// pose-phased wrinkles along template normals, then a push to keep every
/// vertex at least `collision_margin` away from the body. Attachment-ring
/// vertices follow the chain rigidly and receive neither wrinkles nor
/// pushes. The zero pose with zero amplitude reproduces the template
/// bit-exactly.
pub fn gt_deform(
    template: &GarmentTemplate,
    model: &DeformationModel,
    rig: &BodyRig,
    pose: &[f64],
) -> Result<TriMesh, SynthError> {
    let field = ChainField::new(rig, pose)?;
    let normals = vertex_normals(&template.mesh);
    let phase: f64 = model.phase_coupling * pose.iter().sum::<f64>();
    let attachment: std::collections::BTreeSet<usize> =
        template.attachment.iter().copied().collect();

    let (y_min, y_max) = template
        .mesh
        .vertices
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.y), hi.max(v.y))
        });
    let span = (y_max - y_min).max(1e-9);

    let mut out = Vec::with_capacity(template.mesh.vertices.len());
    for (vi, &v) in template.mesh.vertices.iter().enumerate() {
        if attachment.contains(&vi) {
            out.push(field.warp(v));
            continue;
        }
        let taper = smoothstep((y_max - v.y) / (span * WRINKLE_TAPER));
        let ripple = model.amplitude
            * taper
            * (model.wave_count * template.param_u[vi] + phase).sin();
        out.push(field.warp(v) + ripple * normals[vi]);
    }

    // Resolve collisions against the posed body.
    let body = make_body(rig, pose)?;
    let bvh = build_bvh(&body)?;
    for (vi, v) in out.iter_mut().enumerate() {
        if attachment.contains(&vi) {
            continue;
        }
        for _ in 0..16 {
            let hit = signed_distance(*v, &bvh);
            if hit.distance >= model.collision_margin - 1e-3 {
                break;
            }
            let grad = hit.gradient(*v, surface_normal_at(&bvh, &hit));
            *v += grad * (model.collision_margin - hit.distance);
        }
    }

    Ok(TriMesh::new(
        out,
        template.mesh.faces.clone(),
        format!("{}_posed", template.mesh.name),
    ))
}

/// Pose sampling ranges for dataset generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSampling {
    /// Joint bend range: each angle is uniform in [-max_bend, max_bend].
    pub max_bend: f64,
    /// Global yaw range about +y, radians.
    pub max_root_yaw: f64,
    /// Global translation range per axis, mm.
    pub max_root_shift: f64,
}

/// One generated sample: pose, root motion, meshes on disk (world space),
/// and the rendered images (root-normalized space).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub pose: Vec<f64>,
    pub root_rotation: [[f64; 3]; 3],
    pub root_translation: [f64; 3],
    pub body_mesh: String,
    pub gt_mesh: String,
    /// Keyed `{owner}_{kind}_{view}` -> relative PFM path. Garment
    /// position/normal images are rendered from the ground truth.
    pub images: BTreeMap<String, String>,
    /// Shared template image paths, repeated here for convenience.
    pub template_images: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub bounds: PositionBounds,
    pub cameras: CameraRig,
    pub rig: BodyRig,
    pub garment: GarmentSpec,
    pub model: DeformationModel,
    pub sampling: PoseSampling,
    pub template_mesh: String,
    pub template_images: BTreeMap<String, String>,
    pub silhouettes: BTreeMap<String, String>,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| SynthError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Train poses: iid uniform joints plus uniform root motion. Test poses:
/// a smooth trajectory through pose space (disjoint from training almost
/// surely; generation asserts it).
fn sample_poses(
    rig: &BodyRig,
    sampling: &PoseSampling,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<(Vec<f64>, f64, DVec3)>, Vec<(Vec<f64>, f64, DVec3)>) {
    let joints = rig.joint_count();
    let mut train = Vec::with_capacity(n_train);
    let mut state = seed ^ 0xA5A5_5A5A_DEAD_BEEF;
    for i in 0..n_train {
        let mut s = seed.wrapping_add(splitmix64(&mut state)).wrapping_add(i as u64);
        let mut rng = StdRng::seed_from_u64(splitmix64(&mut s));
        let pose: Vec<f64> = (0..joints)
            .map(|_| rng.random_range(-sampling.max_bend..=sampling.max_bend))
            .collect();
        let yaw = rng.random_range(-sampling.max_root_yaw..=sampling.max_root_yaw);
        let shift = DVec3::new(
            rng.random_range(-sampling.max_root_shift..=sampling.max_root_shift),
            rng.random_range(-sampling.max_root_shift..=sampling.max_root_shift),
            rng.random_range(-sampling.max_root_shift..=sampling.max_root_shift),
        );
        train.push((pose, yaw, shift));
    }

    // Smooth test clip: per-joint sinusoids with seeded frequencies.
    let mut rng = StdRng::seed_from_u64(seed ^ 0x7357_7357);
    let amp: Vec<f64> = (0..joints)
        .map(|_| rng.random_range(0.5..1.0) * sampling.max_bend)
        .collect();
    let freq: Vec<f64> = (0..joints).map(|_| rng.random_range(0.5..1.5)).collect();
    let phi: Vec<f64> = (0..joints)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let yaw_amp = rng.random_range(0.3..1.0) * sampling.max_root_yaw;
    let shift_amp = rng.random_range(0.3..1.0) * sampling.max_root_shift;
    let mut test = Vec::with_capacity(n_test);
    for f in 0..n_test {
        let t = f as f64 / n_test.max(1) as f64;
        let pose: Vec<f64> = (0..joints)
            .map(|j| amp[j] * (std::f64::consts::TAU * freq[j] * t + phi[j]).sin())
            .collect();
        let yaw = yaw_amp * (std::f64::consts::TAU * t).sin();
        let shift = DVec3::new(
            shift_amp * (std::f64::consts::TAU * t).cos(),
            0.0,
            shift_amp * (std::f64::consts::TAU * t + 1.0).sin(),
        );
        test.push((pose, yaw, shift));
    }
    (train, test)
}

/// Runs the pose sampler and deformations once to find bounds that
/// enclose every generated garment and body, inflated by 10%.
pub fn suggest_bounds(
    rig: &BodyRig,
    spec: &GarmentSpec,
    model: &DeformationModel,
    sampling: &PoseSampling,
    n_train: usize,
    n_test: usize,
) -> Result<PositionBounds, SynthError> {
    let template = make_garment_template(spec, rig, model.collision_margin)?;
    let (train, test) = sample_poses(rig, sampling, n_train, n_test, model.seed);
    let mut meshes: Vec<TriMesh> = vec![template.mesh.clone()];
    for (pose, _, _) in train.iter().chain(test.iter()) {
        meshes.push(gt_deform(&template, model, rig, pose)?);
        meshes.push(make_body(rig, pose)?);
    }
    let refs: Vec<&TriMesh> = meshes.iter().collect();
    Ok(PositionBounds::enclosing(&refs, 0.1)?)
}

/// Generates the dataset: template mesh and images, per-sample meshes and
/// eight rendered images, and a JSON manifest. All rendering happens in
/// root-normalized space; stored meshes are world space plus the root
/// transform that normalizes them.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    out_dir: impl AsRef<Path>,
    n_train: usize,
    n_test: usize,
    model: &DeformationModel,
    rig: &BodyRig,
    spec: &GarmentSpec,
    sampling: &PoseSampling,
    cameras: &CameraRig,
    bounds: &PositionBounds,
) -> Result<DatasetManifest, SynthError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    let template = make_garment_template(spec, rig, model.collision_margin)?;
    let resolution = cameras.front.resolution;

    // Fixed template projection per view.
    let mut rasters = BTreeMap::new();
    let mut silhouettes = BTreeMap::new();
    for view in [FRONT, BACK] {
        let (map, sil) = rasterize_template(&template.mesh, cameras, view)?;
        rasters.insert(view.to_string(), map);
        silhouettes.insert(view.to_string(), sil);
    }

    let template_mesh_path = "template.obj".to_string();
    save_obj(&template.mesh, out_dir.join(&template_mesh_path))?;

    // Template garment images (positions of the rest shape, its normals).
    let mut template_images = BTreeMap::new();
    let tmpl_pos_rgb = rgb_encode_positions(&template.mesh.vertices, bounds)?;
    let tmpl_nrm_rgb = rgb_encode_normals(&vertex_normals(&template.mesh));
    for view in [FRONT, BACK] {
        let map = &rasters[view];
        for (kind, rgb) in [
            (AttrKind::Position, &tmpl_pos_rgb),
            (AttrKind::Normal, &tmpl_nrm_rgb),
        ] {
            let img = render_attribute(map, &template.mesh.faces, rgb, kind, Owner::Garment)?;
            let rel = format!("template_{kind}_{view}.pfm");
            write_pfm(&img, out_dir.join(&rel))?;
            template_images.insert(format!("{kind}_{view}"), rel);
        }
    }
    let mut sil_paths = BTreeMap::new();
    for view in [FRONT, BACK] {
        let rel = format!("silhouette_{view}.pgm");
        write_pgm(&silhouettes[view], out_dir.join(&rel))?;
        sil_paths.insert(view.to_string(), rel);
    }

    let (train_poses, test_poses) = sample_poses(rig, sampling, n_train, n_test, model.seed);
    debug_assert!(train_poses
        .iter()
        .all(|(p, _, _)| test_poses.iter().all(|(q, _, _)| p != q)));

    let emit = |poses: &[(Vec<f64>, f64, DVec3)],
                    split: &str,
                    id_base: usize|
     -> Result<Vec<SampleRecord>, SynthError> {
        let mut records = Vec::with_capacity(poses.len());
        for (i, (pose, yaw, shift)) in poses.iter().enumerate() {
            let id = id_base + i;
            let dir_rel = format!("{split}/{id:04}");
            let dir = out_dir.join(&dir_rel);
            std::fs::create_dir_all(&dir).map_err(|source| SynthError::Io {
                path: dir.display().to_string(),
                source,
            })?;

            // Normalized-space geometry.
            let gt_local = gt_deform(&template, model, rig, pose)?;
            let body_local = make_body(rig, pose)?;

            let root = RootTransform::new(DMat3::from_rotation_y(*yaw), *shift)
                .expect("yaw rotation is proper");

            // Eight attribute images: garment/body x position/normal x view.
            let mut images = BTreeMap::new();
            let gt_pos_rgb = rgb_encode_positions(&gt_local.vertices, bounds)?;
            let gt_nrm_rgb = rgb_encode_normals(&vertex_normals(&gt_local));
            let body_pos_rgb = rgb_encode_positions(&body_local.vertices, bounds)?;
            let body_nrm_rgb = rgb_encode_normals(&vertex_normals(&body_local));
            for view in [FRONT, BACK] {
                let gmap = &rasters[view];
                for (kind, rgb) in [
                    (AttrKind::Position, &gt_pos_rgb),
                    (AttrKind::Normal, &gt_nrm_rgb),
                ] {
                    let img =
                        render_attribute(gmap, &gt_local.faces, rgb, kind, Owner::Garment)?;
                    let rel = format!("{dir_rel}/garment_{kind}_{view}.pfm");
                    write_pfm(&img, out_dir.join(&rel))?;
                    images.insert(format!("garment_{kind}_{view}"), rel);
                }
                // The body is projected as posed, with the same cameras.
                let (bmap, _) = rasterize_template(&body_local, cameras, view)?;
                for (kind, rgb) in [
                    (AttrKind::Position, &body_pos_rgb),
                    (AttrKind::Normal, &body_nrm_rgb),
                ] {
                    let img = render_attribute(&bmap, &body_local.faces, rgb, kind, Owner::Body)?;
                    let rel = format!("{dir_rel}/body_{kind}_{view}.pfm");
                    write_pfm(&img, out_dir.join(&rel))?;
                    images.insert(format!("body_{kind}_{view}"), rel);
                }
            }

            // World-space meshes on disk.
            let to_world = |m: &TriMesh, name: &str| -> TriMesh {
                TriMesh::new(
                    m.vertices.iter().map(|&v| root.apply(v)).collect(),
                    m.faces.clone(),
                    name,
                )
            };
            let gt_rel = format!("{dir_rel}/garment_gt.obj");
            let body_rel = format!("{dir_rel}/body.obj");
            save_obj(&to_world(&gt_local, "garment_gt"), out_dir.join(&gt_rel))?;
            save_obj(&to_world(&body_local, "body"), out_dir.join(&body_rel))?;

            records.push(SampleRecord {
                id,
                pose: pose.clone(),
                root_rotation: root.rotation.to_cols_array_2d(),
                root_translation: root.translation.to_array(),
                body_mesh: body_rel,
                gt_mesh: gt_rel,
                images,
                template_images: template_images.clone(),
            });
        }
        Ok(records)
    };

    let train = emit(&train_poses, "train", 0)?;
    let test = emit(&test_poses, "test", n_train)?;

    let manifest = DatasetManifest {
        schema_version: 1,
        seed: model.seed,
        resolution,
        bounds: *bounds,
        cameras: *cameras,
        rig: rig.clone(),
        garment: spec.clone(),
        model: *model,
        sampling: *sampling,
        template_mesh: template_mesh_path,
        template_images,
        silhouettes: sil_paths,
        train,
        test,
    };
    let manifest_path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| SynthError::Json {
        path: manifest_path.display().to_string(),
        source,
    })?;
    std::fs::write(&manifest_path, text).map_err(|source| SynthError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    Ok(manifest)
}

/// Resolves a manifest-relative path against the dataset directory.
pub fn dataset_path(dataset_dir: impl AsRef<Path>, rel: &str) -> PathBuf {
    dataset_dir.as_ref().join(rel)
}

/// Icosphere primitive, mostly used by tests and examples as an analytic
/// oracle shape.
pub fn icosphere(radius: f64, subdivisions: u32) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<DVec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| DVec3::new(x, y, z).normalize() * radius)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for face in &faces {
            let mut mids = [0usize; 3];
            for (slot, (i, j)) in mids.iter_mut().zip([(0, 1), (1, 2), (2, 0)]) {
                let key = (face[i].min(face[j]), face[i].max(face[j]));
                *slot = *midpoints.entry(key).or_insert_with(|| {
                    let m = (vertices[face[i]] + vertices[face[j]]) / 2.0;
                    vertices.push(m.normalize() * radius);
                    vertices.len() - 1
                });
            }
            new_faces.push([face[0], mids[0], mids[2]]);
            new_faces.push([face[1], mids[1], mids[0]]);
            new_faces.push([face[2], mids[2], mids[1]]);
            new_faces.push(mids);
        }
        faces = new_faces;
    }
    TriMesh::new(vertices, faces, "icosphere")
}

/// A small default rig: three stacked segments, torso-like proportions.
pub fn default_rig() -> BodyRig {
    BodyRig {
        segments: vec![
            BodySegment {
                length: 200.0,
                radius: 70.0,
            },
            BodySegment {
                length: 180.0,
                radius: 60.0,
            },
            BodySegment {
                length: 150.0,
                radius: 45.0,
            },
        ],
        ring_sides: 24,
        rings_per_segment: 8,
    }
}
