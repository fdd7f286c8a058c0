//! Spatial queries against the body mesh: signed vertex-to-mesh distance
//! for collision handling, plus nearest-visible-vertex search used by
//! hidden-vertex initialization.
//!
//! The sign of the distance comes from the angle-weighted pseudo-normal
//! of the closest feature (face, edge, or vertex), which is robust at
//! edges and vertices of closed, consistently wound meshes.

use std::collections::BTreeMap;

use glam::DVec3;
use thiserror::Error;

use crate::mesh::TriMesh;

/// Maximum number of triangles in a BVH leaf.
const LEAF_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("cannot build a BVH over an empty mesh")]
    EmptyMesh,
    #[error("nearest_in_set called with an empty candidate set")]
    EmptyCandidates,
}

/// Signed distance query result. Distance is negative inside the mesh.
#[derive(Debug, Clone, Copy)]
pub struct SignedDistanceResult {
    pub distance: f64,
    pub closest_point: DVec3,
    pub triangle: usize,
}

impl SignedDistanceResult {
    /// Unit gradient of the signed distance with respect to the query
    /// point, with the closest point held fixed. Falls back to the
    /// feature pseudo-normal when the query point sits on the surface.
    pub fn gradient(&self, query: DVec3, fallback_normal: DVec3) -> DVec3 {
        let delta = query - self.closest_point;
        let len = delta.length();
        if len < 1e-9 {
            fallback_normal
        } else {
            delta / len * self.distance.signum()
        }
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    min: DVec3,
    max: DVec3,
    // Leaf: range into `order`. Inner: child indices.
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

impl BvhNode {
    fn is_leaf(&self) -> bool {
        self.count > 0
    }

    fn distance_sq_to(&self, p: DVec3) -> f64 {
        let clamped = p.clamp(self.min, self.max);
        (p - clamped).length_squared()
    }
}

/// Axis-aligned BVH over the triangles of a body mesh, with per-feature
/// pseudo-normals precomputed for the sign test.
#[derive(Debug, Clone)]
pub struct TriBVH {
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    vertices: Vec<DVec3>,
    faces: Vec<[usize; 3]>,
    face_normals: Vec<DVec3>,
    edge_normals: BTreeMap<(usize, usize), DVec3>,
    vertex_normals: Vec<DVec3>,
}

/// Builds the hierarchy by median split on the longest axis.
pub fn build_bvh(mesh: &TriMesh) -> Result<TriBVH, GeomError> {
    if mesh.faces.is_empty() {
        return Err(GeomError::EmptyMesh);
    }
    let centroids: Vec<DVec3> = mesh
        .faces
        .iter()
        .map(|f| (mesh.vertices[f[0]] + mesh.vertices[f[1]] + mesh.vertices[f[2]]) / 3.0)
        .collect();
    let mut order: Vec<u32> = (0..mesh.faces.len() as u32).collect();
    let mut nodes = Vec::new();
    build_node(mesh, &centroids, &mut order, 0, mesh.faces.len(), &mut nodes);

    // Angle-weighted pseudo-normals: faces, edges, vertices.
    let mut face_normals = Vec::with_capacity(mesh.faces.len());
    let mut edge_normals: BTreeMap<(usize, usize), DVec3> = BTreeMap::new();
    let mut vertex_normals = vec![DVec3::ZERO; mesh.vertices.len()];
    for face in &mesh.faces {
        let [i, j, k] = *face;
        let (a, b, c) = (mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]);
        let n = (b - a).cross(c - a);
        let n_unit = if n.length() > 0.0 { n.normalize() } else { DVec3::Z };
        face_normals.push(n_unit);
        for (u, v) in [(i, j), (j, k), (k, i)] {
            let key = (u.min(v), u.max(v));
            *edge_normals.entry(key).or_insert(DVec3::ZERO) += n_unit;
        }
        // Interior angle at each corner weights the vertex normal.
        let corners = [(i, a, b, c), (j, b, c, a), (k, c, a, b)];
        for (vi, p, q, r) in corners {
            let e1 = (q - p).normalize_or_zero();
            let e2 = (r - p).normalize_or_zero();
            let angle = e1.dot(e2).clamp(-1.0, 1.0).acos();
            vertex_normals[vi] += angle * n_unit;
        }
    }

    Ok(TriBVH {
        nodes,
        order,
        vertices: mesh.vertices.clone(),
        faces: mesh.faces.clone(),
        face_normals,
        edge_normals,
        vertex_normals,
    })
}

fn build_node(
    mesh: &TriMesh,
    centroids: &[DVec3],
    order: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<BvhNode>,
) -> u32 {
    let mut min = DVec3::splat(f64::INFINITY);
    let mut max = DVec3::splat(f64::NEG_INFINITY);
    for &fi in &order[start..end] {
        for &vi in &mesh.faces[fi as usize] {
            min = min.min(mesh.vertices[vi]);
            max = max.max(mesh.vertices[vi]);
        }
    }
    let index = nodes.len() as u32;
    nodes.push(BvhNode {
        min,
        max,
        left: 0,
        right: 0,
        start: start as u32,
        count: 0,
    });

    let count = end - start;
    if count <= LEAF_SIZE {
        nodes[index as usize].count = count as u32;
        return index;
    }

    let extent = max - min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = start + count / 2;
    order[start..end].select_nth_unstable_by(count / 2, |&a, &b| {
        let ca = centroids[a as usize][axis];
        let cb = centroids[b as usize][axis];
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });

    let left = build_node(mesh, centroids, order, start, mid, nodes);
    let right = build_node(mesh, centroids, order, mid, end, nodes);
    nodes[index as usize].left = left;
    nodes[index as usize].right = right;
    index
}

/// Closest point on a triangle plus the feature it lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Feature {
    Face,
    Edge(usize, usize),
    Vertex(usize),
}

fn closest_point_on_triangle(p: DVec3, face: [usize; 3], vertices: &[DVec3]) -> (DVec3, Feature) {
    let [ia, ib, ic] = face;
    let (a, b, c) = (vertices[ia], vertices[ib], vertices[ic]);
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;

    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (a, Feature::Vertex(ia));
    }

    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (b, Feature::Vertex(ib));
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (a + ab * t, Feature::Edge(ia, ib));
    }

    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (c, Feature::Vertex(ic));
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (a + ac * t, Feature::Edge(ia, ic));
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * t, Feature::Edge(ib, ic));
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, Feature::Face)
}

impl TriBVH {
    fn pseudo_normal(&self, triangle: usize, feature: Feature) -> DVec3 {
        match feature {
            Feature::Face => self.face_normals[triangle],
            Feature::Edge(i, j) => {
                let key = (i.min(j), i.max(j));
                self.edge_normals
                    .get(&key)
                    .copied()
                    .unwrap_or(self.face_normals[triangle])
                    .normalize_or_zero()
            }
            Feature::Vertex(i) => self.vertex_normals[i].normalize_or_zero(),
        }
    }

    /// Closest triangle/point to `p`, found by branch-and-bound traversal.
    fn closest(&self, p: DVec3) -> (f64, DVec3, usize, Feature) {
        let mut best_d2 = f64::INFINITY;
        let mut best = (DVec3::ZERO, 0usize, Feature::Face);
        let mut stack = vec![0u32];
        while let Some(ni) = stack.pop() {
            let node = &self.nodes[ni as usize];
            if node.distance_sq_to(p) >= best_d2 {
                continue;
            }
            if node.is_leaf() {
                let start = node.start as usize;
                let end = start + node.count as usize;
                for &fi in &self.order[start..end] {
                    let face = self.faces[fi as usize];
                    let (cp, feature) = closest_point_on_triangle(p, face, &self.vertices);
                    let d2 = (p - cp).length_squared();
                    // Deterministic tie-break on triangle index.
                    if d2 < best_d2 - 1e-18
                        || (d2 < best_d2 + 1e-18 && (fi as usize) < best.1 && best_d2.is_finite())
                    {
                        best_d2 = d2.min(best_d2);
                        best = (cp, fi as usize, feature);
                    }
                }
            } else {
                // Visit the nearer child first.
                let l = node.left;
                let r = node.right;
                let dl = self.nodes[l as usize].distance_sq_to(p);
                let dr = self.nodes[r as usize].distance_sq_to(p);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        (best_d2.sqrt(), best.0, best.1, best.2)
    }
}

/// Signed vertex-to-mesh distance: magnitude is the closest-point
/// distance, sign comes from the angle-weighted pseudo-normal at the
/// closest feature (negative inside). The body mesh must be closed and
/// consistently wound.
pub fn signed_distance(point: DVec3, bvh: &TriBVH) -> SignedDistanceResult {
    let (dist, closest, triangle, feature) = bvh.closest(point);
    let normal = bvh.pseudo_normal(triangle, feature);
    let sign = if (point - closest).dot(normal) < 0.0 {
        -1.0
    } else {
        1.0
    };
    SignedDistanceResult {
        distance: sign * dist,
        closest_point: closest,
        triangle,
    }
}

/// Pseudo-normal of the feature closest to a previous query; used as the
/// gradient direction for points essentially on the surface.
pub fn surface_normal_at(bvh: &TriBVH, result: &SignedDistanceResult) -> DVec3 {
    // Re-derive the feature from the stored closest point.
    let (_, feature) = closest_point_on_triangle(
        result.closest_point,
        bvh.faces[result.triangle],
        &bvh.vertices,
    );
    bvh.pseudo_normal(result.triangle, feature)
}

/// Candidate from `candidates` minimizing Euclidean distance to `query`
/// in template space; ties go to the smallest vertex index.
pub fn nearest_in_set(
    query: usize,
    candidates: &[usize],
    template: &TriMesh,
) -> Result<(usize, f64), GeomError> {
    if candidates.is_empty() {
        return Err(GeomError::EmptyCandidates);
    }
    let q = template.vertices[query];
    let mut best_idx = usize::MAX;
    let mut best_d2 = f64::INFINITY;
    for &c in candidates {
        let d2 = (template.vertices[c] - q).length_squared();
        if d2 < best_d2 || (d2 == best_d2 && c < best_idx) {
            best_d2 = d2;
            best_idx = c;
        }
    }
    Ok((best_idx, best_d2.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh;
    use crate::synth::icosphere;
    use glam::dvec3;

    #[test]
    fn icosphere_normals_match_direction() {
        let sphere = icosphere(1.0, 2);
        let normals = mesh::vertex_normals(&sphere);
        for (v, n) in sphere.vertices.iter().zip(&normals) {
            let angle = v.normalize().dot(*n).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 3.0, "normal deviates by {angle} degrees");
        }
    }

    #[test]
    fn single_triangle_is_one_leaf() {
        let tri = TriMesh::new(
            vec![dvec3(0.0, 0.0, 0.0), dvec3(1.0, 0.0, 0.0), dvec3(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
            "tri",
        );
        let bvh = build_bvh(&tri).unwrap();
        assert_eq!(bvh.nodes.len(), 1);
        assert!(bvh.nodes[0].is_leaf());
    }

    #[test]
    fn empty_mesh_rejected() {
        let empty = TriMesh::new(vec![], vec![], "empty");
        assert!(matches!(build_bvh(&empty), Err(GeomError::EmptyMesh)));
    }

    #[test]
    fn sphere_center_and_outside_distances() {
        let sphere = icosphere(100.0, 3);
        let bvh = build_bvh(&sphere).unwrap();
        let center = signed_distance(DVec3::ZERO, &bvh);
        assert!(
            (center.distance + 100.0).abs() < 2.0,
            "center sdf {} should be about -100",
            center.distance
        );
        let outside = signed_distance(dvec3(200.0, 0.0, 0.0), &bvh);
        assert!(
            (outside.distance - 100.0).abs() < 2.0,
            "outside sdf {} should be about +100",
            outside.distance
        );
    }

    #[test]
    fn mesh_vertex_on_its_own_surface() {
        let sphere = icosphere(50.0, 2);
        let bvh = build_bvh(&sphere).unwrap();
        let q = sphere.vertices[17];
        let r = signed_distance(q, &bvh);
        assert!(r.distance.abs() < 1e-6, "got {}", r.distance);
    }

    #[test]
    fn bvh_matches_brute_force() {
        let sphere = icosphere(80.0, 2);
        let bvh = build_bvh(&sphere).unwrap();
        let mut state = 1234u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 400.0 - 200.0
        };
        for _ in 0..500 {
            let p = dvec3(next(), next(), next());
            let got = signed_distance(p, &bvh);
            // Brute force over all triangles.
            let mut best_d2 = f64::INFINITY;
            let mut best_cp = DVec3::ZERO;
            for face in &sphere.faces {
                let (cp, _) = closest_point_on_triangle(p, *face, &sphere.vertices);
                let d2 = (p - cp).length_squared();
                if d2 < best_d2 {
                    best_d2 = d2;
                    best_cp = cp;
                }
            }
            assert!(
                (got.distance.abs() - best_d2.sqrt()).abs() < 1e-6,
                "distance mismatch at {p:?}"
            );
            assert!((got.closest_point - best_cp).length() < 1e-6);
            // Sign from the analytic sphere.
            let expected_sign = if p.length() < 80.0 { -1.0 } else { 1.0 };
            if (p.length() - 80.0).abs() > 1.0 {
                assert_eq!(got.distance.signum(), expected_sign, "sign at {p:?}");
            }
        }
    }

    #[test]
    fn rebuild_gives_identical_answers() {
        let sphere = icosphere(60.0, 2);
        let a = build_bvh(&sphere).unwrap();
        let b = build_bvh(&sphere).unwrap();
        let mut state = 5u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 300.0 - 150.0
        };
        for _ in 0..100 {
            let p = dvec3(next(), next(), next());
            let ra = signed_distance(p, &a);
            let rb = signed_distance(p, &b);
            assert_eq!(ra.distance, rb.distance);
            assert_eq!(ra.closest_point, rb.closest_point);
        }
    }

    #[test]
    fn sign_flips_crossing_a_face() {
        let sphere = icosphere(30.0, 2);
        let bvh = build_bvh(&sphere).unwrap();
        // Probe along +x through a face interior.
        let just_in = signed_distance(dvec3(29.0, 0.1, 0.1), &bvh);
        let just_out = signed_distance(dvec3(31.0, 0.1, 0.1), &bvh);
        assert!(just_in.distance < 0.0);
        assert!(just_out.distance > 0.0);
    }

    #[test]
    fn nearest_in_set_basics() {
        let mesh = TriMesh::new(
            vec![
                dvec3(0.0, 0.0, 0.0),
                dvec3(1.0, 0.0, 0.0),
                dvec3(-1.0, 0.0, 0.0),
                dvec3(5.0, 0.0, 0.0),
            ],
            vec![],
            "pts",
        );
        // Query inside the candidate set returns itself.
        let (idx, d) = nearest_in_set(1, &[0, 1, 3], &mesh).unwrap();
        assert_eq!(idx, 1);
        assert_eq!(d, 0.0);
        // Equidistant candidates: smaller index wins.
        let (idx, d) = nearest_in_set(0, &[2, 1], &mesh).unwrap();
        assert_eq!(idx, 1);
        assert!((d - 1.0).abs() < 1e-12);
        assert!(matches!(
            nearest_in_set(0, &[], &mesh),
            Err(GeomError::EmptyCandidates)
        ));
    }

    #[test]
    fn nearest_in_set_matches_linear_scan() {
        let sphere = icosphere(40.0, 2);
        let candidates: Vec<usize> = (0..sphere.vertices.len()).step_by(3).collect();
        let mut state = 77u64;
        for _ in 0..1000 {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let q = (state >> 33) as usize % sphere.vertices.len();
            let (idx, dist) = nearest_in_set(q, &candidates, &sphere).unwrap();
            // Independent scan, written differently on purpose.
            let mut want = candidates[0];
            for &c in &candidates[1..] {
                let dc = (sphere.vertices[c] - sphere.vertices[q]).length();
                let dw = (sphere.vertices[want] - sphere.vertices[q]).length();
                if dc < dw || (dc == dw && c < want) {
                    want = c;
                }
            }
            assert_eq!(idx, want);
            let want_d = (sphere.vertices[want] - sphere.vertices[q]).length();
            assert!((dist - want_d).abs() < 1e-9);
        }
    }
}
