//! Evaluation metrics: per-vertex RMSE, symmetric vertex-set Hausdorff
//! distance, spatio-temporal edge difference over a clip, and a
//! penetrating-vertex collision diagnostic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{signed_distance, TriBVH};
use crate::mesh::{EdgeSet, TriMesh};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vertex counts differ: prediction {pred}, ground truth {gt}")]
    CountMismatch { pred: usize, gt: usize },
    #[error("cannot compare empty meshes")]
    EmptyMesh,
    #[error("clip lengths differ: prediction {pred}, ground truth {gt}")]
    ClipLengthMismatch { pred: usize, gt: usize },
    #[error("clip is empty")]
    EmptyClip,
}

/// Aggregated metrics over one test clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEval {
    pub rmse_mm: Vec<f64>,
    pub hausdorff_mm: Vec<f64>,
    pub sted: f64,
    pub sted_spatial: f64,
    pub sted_temporal: f64,
    pub collision_fraction: Vec<f64>,
}

/// Root-mean-square vertex error in mm; requires shared topology.
pub fn rmse(pred: &TriMesh, gt: &TriMesh) -> Result<f64, MetricError> {
    if pred.vertices.len() != gt.vertices.len() {
        return Err(MetricError::CountMismatch {
            pred: pred.vertices.len(),
            gt: gt.vertices.len(),
        });
    }
    if pred.vertices.is_empty() {
        return Err(MetricError::EmptyMesh);
    }
    let sum: f64 = pred
        .vertices
        .iter()
        .zip(&gt.vertices)
        .map(|(p, q)| (*p - *q).length_squared())
        .sum();
    Ok((sum / pred.vertices.len() as f64).sqrt())
}

/// Symmetric vertex-set Hausdorff distance in mm.
pub fn hausdorff(pred: &TriMesh, gt: &TriMesh) -> Result<f64, MetricError> {
    if pred.vertices.is_empty() || gt.vertices.is_empty() {
        return Err(MetricError::EmptyMesh);
    }
    let directed = |from: &TriMesh, to: &TriMesh| -> f64 {
        from.vertices
            .iter()
            .map(|p| {
                to.vertices
                    .iter()
                    .map(|q| (*p - *q).length_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0f64, f64::max)
    };
    Ok(directed(pred, gt).max(directed(gt, pred)).sqrt())
}

/// Spatio-temporal edge difference over a clip with shared topology.
///
/// The spatial component is the RMS over frames and edges of the relative
/// edge-length error; the temporal component is the RMS over edges and
/// consecutive frame pairs of the first difference of those errors. The
/// combined value is sqrt(spatial^2 + temporal^2).
pub fn sted(
    pred_clip: &[TriMesh],
    gt_clip: &[TriMesh],
    edges: &EdgeSet,
) -> Result<(f64, f64, f64), MetricError> {
    if pred_clip.len() != gt_clip.len() {
        return Err(MetricError::ClipLengthMismatch {
            pred: pred_clip.len(),
            gt: gt_clip.len(),
        });
    }
    if pred_clip.is_empty() {
        return Err(MetricError::EmptyClip);
    }
    let frames = pred_clip.len();
    let ne = edges.len();
    // Per-frame, per-edge relative edge-length error.
    let mut rel = vec![0.0f64; frames * ne];
    for (f, (pred, gt)) in pred_clip.iter().zip(gt_clip).enumerate() {
        if pred.vertices.len() != gt.vertices.len() {
            return Err(MetricError::CountMismatch {
                pred: pred.vertices.len(),
                gt: gt.vertices.len(),
            });
        }
        for (e, &[i, j]) in edges.edges.iter().enumerate() {
            let lp = (pred.vertices[i] - pred.vertices[j]).length();
            let lg = (gt.vertices[i] - gt.vertices[j]).length();
            rel[f * ne + e] = (lp - lg) / lg;
        }
    }
    let spatial = (rel.iter().map(|r| r * r).sum::<f64>() / rel.len() as f64).sqrt();
    let temporal = if frames < 2 {
        0.0
    } else {
        let mut sum = 0.0;
        for f in 0..frames - 1 {
            for e in 0..ne {
                let d = rel[(f + 1) * ne + e] - rel[f * ne + e];
                sum += d * d;
            }
        }
        (sum / ((frames - 1) * ne) as f64).sqrt()
    };
    Ok(((spatial * spatial + temporal * temporal).sqrt(), spatial, temporal))
}

/// Fraction of garment vertices strictly inside the body.
pub fn collision_rate(pred: &TriMesh, body_bvh: &TriBVH) -> f64 {
    if pred.vertices.is_empty() {
        return 0.0;
    }
    let inside = pred
        .vertices
        .iter()
        .filter(|&&v| signed_distance(v, body_bvh).distance < 0.0)
        .count();
    inside as f64 / pred.vertices.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::build_bvh;
    use crate::mesh::edge_set;
    use crate::synth::icosphere;
    use glam::{dvec3, DVec3};

    fn offset(mesh: &TriMesh, d: DVec3) -> TriMesh {
        TriMesh::new(
            mesh.vertices.iter().map(|&v| v + d).collect(),
            mesh.faces.clone(),
            "offset",
        )
    }

    fn scaled(mesh: &TriMesh, s: f64) -> TriMesh {
        TriMesh::new(
            mesh.vertices.iter().map(|&v| v * s).collect(),
            mesh.faces.clone(),
            "scaled",
        )
    }

    #[test]
    fn rmse_identities() {
        let sphere = icosphere(50.0, 1);
        assert_eq!(rmse(&sphere, &sphere).unwrap(), 0.0);
        // Uniform (3, 0, 4) offset has norm 5 at every vertex.
        let moved = offset(&sphere, dvec3(3.0, 0.0, 4.0));
        assert!((rmse(&moved, &sphere).unwrap() - 5.0).abs() < 1e-12);
        // One displaced vertex of n: d / sqrt(n).
        let mut one = sphere.clone();
        one.vertices[7] += dvec3(0.0, 2.0, 0.0);
        let n = sphere.vertices.len() as f64;
        assert!((rmse(&one, &sphere).unwrap() - 2.0 / n.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_rejects_count_mismatch() {
        let a = icosphere(10.0, 0);
        let b = icosphere(10.0, 1);
        assert!(matches!(
            rmse(&a, &b),
            Err(MetricError::CountMismatch { .. })
        ));
    }

    #[test]
    fn hausdorff_identities() {
        let sphere = icosphere(30.0, 1);
        assert_eq!(hausdorff(&sphere, &sphere).unwrap(), 0.0);
        let a = TriMesh::new(vec![DVec3::ZERO], vec![], "a");
        let b = TriMesh::new(vec![dvec3(5.0, 0.0, 0.0)], vec![], "b");
        assert!((hausdorff(&a, &b).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn hausdorff_matches_brute_force() {
        let a = icosphere(40.0, 2); // 320 faces -> 162 vertices? enough
        let mut b = a.clone();
        let mut state = 31u64;
        for v in &mut b.vertices {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let t = (state >> 11) as f64 / (1u64 << 53) as f64;
            *v += dvec3(t * 4.0 - 2.0, t, -t);
        }
        let fast = hausdorff(&a, &b).unwrap();
        let mut worst = 0.0f64;
        for p in &a.vertices {
            let mut best = f64::INFINITY;
            for q in &b.vertices {
                best = best.min((*p - *q).length());
            }
            worst = worst.max(best);
        }
        for q in &b.vertices {
            let mut best = f64::INFINITY;
            for p in &a.vertices {
                best = best.min((*p - *q).length());
            }
            worst = worst.max(best);
        }
        assert!((fast - worst).abs() < 1e-6);
    }

    #[test]
    fn rigid_motion_invariance() {
        let a = icosphere(25.0, 1);
        let mut b = a.clone();
        b.vertices[31] += dvec3(1.0, 2.0, -1.0);
        let before_rmse = rmse(&b, &a).unwrap();
        let before_h = hausdorff(&b, &a).unwrap();
        let rot = glam::DMat3::from_rotation_z(1.1) * glam::DMat3::from_rotation_x(0.4);
        let t = dvec3(100.0, -30.0, 8.0);
        let move_both = |m: &TriMesh| {
            TriMesh::new(
                m.vertices.iter().map(|&v| rot * v + t).collect(),
                m.faces.clone(),
                "m",
            )
        };
        let after_rmse = rmse(&move_both(&b), &move_both(&a)).unwrap();
        let after_h = hausdorff(&move_both(&b), &move_both(&a)).unwrap();
        assert!((before_rmse - after_rmse).abs() / before_rmse < 1e-6);
        assert!((before_h - after_h).abs() / before_h < 1e-6);
    }

    #[test]
    fn sted_identities() {
        let sphere = icosphere(20.0, 1);
        let edges = edge_set(&sphere);
        let clip: Vec<TriMesh> = (0..4)
            .map(|i| offset(&sphere, dvec3(i as f64 * 10.0, 0.0, 0.0)))
            .collect();
        // Identical clips: zero.
        let (total, s, t) = sted(&clip, &clip, &edges).unwrap();
        assert_eq!((total, s, t), (0.0, 0.0, 0.0));
        // Rigid translation per frame leaves edge lengths unchanged.
        let moved: Vec<TriMesh> = clip
            .iter()
            .map(|m| offset(m, dvec3(0.0, 7.0, -3.0)))
            .collect();
        let (total, _, _) = sted(&moved, &clip, &edges).unwrap();
        assert!(total < 1e-12, "translation changed STED: {total}");
    }

    #[test]
    fn sted_uniform_scale() {
        let sphere = icosphere(20.0, 1);
        let edges = edge_set(&sphere);
        let gt: Vec<TriMesh> = vec![sphere.clone(); 3];
        let s = 1.25;
        let pred: Vec<TriMesh> = gt.iter().map(|m| scaled(m, s)).collect();
        let (_, spatial, temporal) = sted(&pred, &gt, &edges).unwrap();
        assert!((spatial - (s - 1.0)).abs() < 1e-6);
        assert!(temporal.abs() < 1e-12);
    }

    #[test]
    fn sted_single_frame_has_no_temporal_term() {
        let sphere = icosphere(20.0, 0);
        let edges = edge_set(&sphere);
        let (_, _, temporal) = sted(
            std::slice::from_ref(&sphere),
            std::slice::from_ref(&sphere),
            &edges,
        )
        .unwrap();
        assert_eq!(temporal, 0.0);
        assert!(matches!(sted(&[], &[], &edges), Err(MetricError::EmptyClip)));
    }

    #[test]
    fn collision_rate_extremes() {
        let body = icosphere(100.0, 2);
        let bvh = build_bvh(&body).unwrap();
        let outside = offset(&icosphere(10.0, 1), dvec3(500.0, 0.0, 0.0));
        assert_eq!(collision_rate(&outside, &bvh), 0.0);
        let inside = icosphere(10.0, 1);
        assert_eq!(collision_rate(&inside, &bvh), 1.0);
    }

    #[test]
    fn collision_rate_matches_scan() {
        let body = icosphere(50.0, 2);
        let bvh = build_bvh(&body).unwrap();
        let probe = icosphere(50.0, 1); // vertices straddle the surface after offset
        let shifted = offset(&probe, dvec3(25.0, 0.0, 0.0));
        let rate = collision_rate(&shifted, &bvh);
        let scan = shifted
            .vertices
            .iter()
            .filter(|&&v| signed_distance(v, &bvh).distance < 0.0)
            .count() as f64
            / shifted.vertices.len() as f64;
        assert_eq!(rate, scan);
        assert!(rate > 0.0 && rate < 1.0);
    }
}
