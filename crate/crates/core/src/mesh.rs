//! Triangle-mesh data model, OBJ I/O, normals, edges, and root-pose
//! normalization. All distances are in millimeters.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use glam::{DMat3, DVec3};
use thiserror::Error;

/// Face areas below this (mm^2) contribute nothing to vertex normals.
pub const DEGENERATE_FACE_AREA: f64 = 1e-9;

/// Minimum face area (mm^2) required of template meshes.
pub const TEMPLATE_MIN_FACE_AREA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: face is not a triangle ({count} vertices)")]
    NonTriangleFace {
        path: String,
        line: usize,
        count: usize,
    },
    #[error("{path}:{line}: vertex index {index} out of range (mesh has {count} vertices)")]
    IndexOutOfRange {
        path: String,
        line: usize,
        index: isize,
        count: usize,
    },
    #[error("mesh `{name}`: face {face} references vertex {index} but mesh has {count} vertices")]
    InvalidFaceIndex {
        name: String,
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("mesh `{name}`: vertex {vertex} has a non-finite coordinate")]
    NonFiniteVertex { name: String, vertex: usize },
    #[error("rotation matrix is not a proper rotation (det = {det})")]
    ImproperRotation { det: f64 },
}

/// Indexed triangle mesh. Vertices are positions in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<DVec3>,
    pub faces: Vec<[usize; 3]>,
    pub name: String,
}

impl TriMesh {
    pub fn new(vertices: Vec<DVec3>, faces: Vec<[usize; 3]>, name: impl Into<String>) -> Self {
        Self {
            vertices,
            faces,
            name: name.into(),
        }
    }

    /// Checks the structural invariants: in-range face indices and finite
    /// coordinates.
    pub fn validate(&self) -> Result<(), MeshError> {
        let count = self.vertices.len();
        for (fi, face) in self.faces.iter().enumerate() {
            for &vi in face {
                if vi >= count {
                    return Err(MeshError::InvalidFaceIndex {
                        name: self.name.clone(),
                        face: fi,
                        index: vi,
                        count,
                    });
                }
            }
        }
        for (vi, v) in self.vertices.iter().enumerate() {
            if !v.is_finite() {
                return Err(MeshError::NonFiniteVertex {
                    name: self.name.clone(),
                    vertex: vi,
                });
            }
        }
        Ok(())
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (b - a).cross(c - a).length()
    }

    pub fn bounding_box(&self) -> (DVec3, DVec3) {
        let mut min = DVec3::splat(f64::INFINITY);
        let mut max = DVec3::splat(f64::NEG_INFINITY);
        for v in &self.vertices {
            min = min.min(*v);
            max = max.max(*v);
        }
        (min, max)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (min, max) = self.bounding_box();
        (max - min).length()
    }

    pub fn centroid(&self) -> DVec3 {
        let mut sum = DVec3::ZERO;
        for v in &self.vertices {
            sum += *v;
        }
        sum / self.vertices.len().max(1) as f64
    }
}

/// Undirected edges of a mesh with their rest lengths measured on the
/// vertices the set was built from.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    /// Each pair is stored as (min, max) and appears exactly once.
    pub edges: Vec<[usize; 2]>,
    pub rest_lengths: Vec<f64>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Global rotation and translation of a pose, used to normalize meshes
/// into a root-local frame before rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootTransform {
    pub rotation: DMat3,
    pub translation: DVec3,
}

impl RootTransform {
    pub fn identity() -> Self {
        Self {
            rotation: DMat3::IDENTITY,
            translation: DVec3::ZERO,
        }
    }

    /// Builds a root transform, rejecting rotations whose determinant is
    /// not +1 within 1e-6.
    pub fn new(rotation: DMat3, translation: DVec3) -> Result<Self, MeshError> {
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(MeshError::ImproperRotation { det });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Maps a root-local point back to world space: R * v + t.
    pub fn apply(&self, v: DVec3) -> DVec3 {
        self.rotation * v + self.translation
    }

    /// Maps a world-space point into the root-local frame: R^T * (v - t).
    pub fn normalize(&self, v: DVec3) -> DVec3 {
        self.rotation.transpose() * (v - self.translation)
    }
}

/// Loads a triangle mesh from a Wavefront OBJ file. Only `v`, `vn`, and `f`
/// records are honored; any other record is ignored with a warning on
/// stderr. Faces must be triangles with 1-based in-range indices.
pub fn load_obj(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| MeshError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut warned = std::collections::BTreeSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| MeshError::Io {
            path: path_str.clone(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let keyword = tokens.next().unwrap();
        match keyword {
            "v" => {
                let mut coords = [0.0f64; 3];
                for coord in &mut coords {
                    let tok = tokens.next().ok_or_else(|| MeshError::Parse {
                        path: path_str.clone(),
                        line: line_no,
                        msg: "vertex record has fewer than 3 coordinates".into(),
                    })?;
                    *coord = tok.parse().map_err(|_| MeshError::Parse {
                        path: path_str.clone(),
                        line: line_no,
                        msg: format!("invalid coordinate `{tok}`"),
                    })?;
                }
                vertices.push(DVec3::from_array(coords));
            }
            "vn" => {
                // Normals are recomputed from geometry; the record is
                // accepted and skipped.
            }
            "f" => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(MeshError::NonTriangleFace {
                        path: path_str.clone(),
                        line: line_no,
                        count: refs.len(),
                    });
                }
                let mut face = [0usize; 3];
                for (slot, r) in face.iter_mut().zip(&refs) {
                    // `f v`, `f v/vt`, `f v//vn`, `f v/vt/vn` all start
                    // with the vertex index.
                    let first = r.split('/').next().unwrap();
                    let raw: isize = first.parse().map_err(|_| MeshError::Parse {
                        path: path_str.clone(),
                        line: line_no,
                        msg: format!("invalid face index `{first}`"),
                    })?;
                    if raw < 1 || raw as usize > vertices.len() {
                        return Err(MeshError::IndexOutOfRange {
                            path: path_str.clone(),
                            line: line_no,
                            index: raw,
                            count: vertices.len(),
                        });
                    }
                    *slot = raw as usize - 1;
                }
                faces.push(face);
            }
            other => {
                if warned.insert(other.to_string()) {
                    eprintln!("warning: {path_str}:{line_no}: ignoring `{other}` record");
                }
            }
        }
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mesh = TriMesh::new(vertices, faces, name);
    mesh.validate()?;
    Ok(mesh)
}

/// Writes a mesh as Wavefront OBJ with 1-based indices. Output is
/// deterministic: saving the same mesh twice yields byte-identical files.
pub fn save_obj(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut text = String::with_capacity(mesh.vertices.len() * 40);
    for v in &mesh.vertices {
        // 6 decimal places: sub-micrometer at millimeter scale.
        writeln!(text, "v {:.6} {:.6} {:.6}", v.x, v.y, v.z).unwrap();
    }
    for f in &mesh.faces {
        writeln!(text, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    let mut file = std::fs::File::create(path).map_err(|source| MeshError::Io {
        path: path_str.clone(),
        source,
    })?;
    file.write_all(text.as_bytes())
        .map_err(|source| MeshError::Io {
            path: path_str,
            source,
        })
}

/// Per-vertex unit normals: normalized sum of area-weighted face normals.
/// Faces with area below [`DEGENERATE_FACE_AREA`] are skipped; vertices
/// with zero accumulated normal fall back to (0, 0, 1).
pub fn vertex_normals(mesh: &TriMesh) -> Vec<DVec3> {
    let mut accum = vec![DVec3::ZERO; mesh.vertices.len()];
    for face in &mesh.faces {
        let [a, b, c] = *face;
        let (pa, pb, pc) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
        // Cross product magnitude is twice the face area, so accumulating
        // raw cross products is area weighting.
        let cross = (pb - pa).cross(pc - pa);
        if 0.5 * cross.length() < DEGENERATE_FACE_AREA {
            continue;
        }
        accum[a] += cross;
        accum[b] += cross;
        accum[c] += cross;
    }
    accum
        .into_iter()
        .map(|g| {
            let len = g.length();
            if len == 0.0 {
                DVec3::Z
            } else {
                g / len
            }
        })
        .collect()
}

/// Unique undirected edges of the mesh with rest lengths measured on the
/// input vertices.
pub fn edge_set(mesh: &TriMesh) -> EdgeSet {
    let mut seen = std::collections::BTreeSet::new();
    for face in &mesh.faces {
        for (i, j) in [(0, 1), (1, 2), (2, 0)] {
            let (a, b) = (face[i], face[j]);
            seen.insert([a.min(b), a.max(b)]);
        }
    }
    let edges: Vec<[usize; 2]> = seen.into_iter().collect();
    let rest_lengths = edges
        .iter()
        .map(|&[a, b]| (mesh.vertices[a] - mesh.vertices[b]).length())
        .collect();
    EdgeSet {
        edges,
        rest_lengths,
    }
}

/// Rewrites every vertex into the root-local frame: R^T * (v - t).
pub fn apply_root_normalization(mesh: &TriMesh, root: &RootTransform) -> TriMesh {
    let vertices = mesh.vertices.iter().map(|&v| root.normalize(v)).collect();
    TriMesh::new(vertices, mesh.faces.clone(), mesh.name.clone())
}
