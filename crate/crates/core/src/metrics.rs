//! MPJPE, Procrustes-aligned MPJPE and per-vertex error, all in mm.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3, SVD};

use crate::body_model::PELVIS;

pub type Points = [Vector3<f64>];

pub fn to_points(data: &[f64]) -> Vec<Vector3<f64>> {
    data.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

fn mean_distance(a: &Points, b: &Points) -> f64 {
    assert_eq!(a.len(), b.len(), "point sets differ in size");
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).sum::<f64>() / a.len() as f64
}

/// Mean distance after subtracting each set's pelvis.
pub fn root_aligned_error(pred: &Points, gt: &Points, pred_root: Vector3<f64>, gt_root: Vector3<f64>) -> f64 {
    assert_eq!(pred.len(), gt.len(), "point sets differ in size");
    pred.iter()
        .zip(gt)
        .map(|(p, g)| ((p - pred_root) - (g - gt_root)).norm())
        .sum::<f64>()
        / pred.len() as f64
}

pub fn mpjpe(pred: &Points, gt: &Points) -> f64 {
    root_aligned_error(pred, gt, pred[PELVIS], gt[PELVIS])
}

/// Vertex error with both meshes shifted by their own pelvis joint.
pub fn pve(pred: &Points, gt: &Points, pred_pelvis: Vector3<f64>, gt_pelvis: Vector3<f64>) -> f64 {
    root_aligned_error(pred, gt, pred_pelvis, gt_pelvis)
}

/// Similarity mapping `pred` onto `gt`: `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub translation: Vector3<f64>,
    /// Set when the cross-covariance was rank deficient and only the
    /// centroids were matched.
    pub degenerate: bool,
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation * x + self.translation
    }
}

fn centroid(p: &Points) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

pub fn procrustes(pred: &Points, gt: &Points) -> Similarity {
    assert_eq!(pred.len(), gt.len(), "point sets differ in size");
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (x, y) = (p - mp, g - mg);
        cov += y * x.transpose();
        var += x.norm_squared();
    }
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let tol = 1e-12 * sv.max().max(1e-300);
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < 2 || var <= 0.0 {
        log::warn!("procrustes: rank {rank} cross-covariance, translation-only alignment");
        return Similarity {
            rotation: Matrix3::identity(),
            scale: 1.0,
            translation: mg - mp,
            degenerate: true,
        };
    }
    let d = (u * vt).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = u * fix * vt;
    let trace = sv[0] + sv[1] + d * sv[2];
    let scale = trace / var;
    Similarity {
        rotation,
        scale,
        translation: mg - scale * rotation * mp,
        degenerate: false,
    }
}

pub fn pa_mpjpe(pred: &Points, gt: &Points) -> f64 {
    let sim = procrustes(pred, gt);
    let aligned: Vec<Vector3<f64>> = pred.iter().map(|p| sim.apply(p)).collect();
    mean_distance(&aligned, gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub id: String,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
}

/// Dataset means plus the per-sample breakdown.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalResult {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub samples: Vec<SampleMetrics>,
}

impl EvalResult {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        Self {
            mpjpe: mean(|s| s.mpjpe),
            pa_mpjpe: mean(|s| s.pa_mpjpe),
            pve: mean(|s| s.pve),
            samples,
        }
    }

    /// One `id mpjpe pa_mpjpe pve` line per sample.
    pub fn records(&self) -> String {
        let mut s = String::new();
        for r in &self.samples {
            writeln!(s, "{} {:.6} {:.6} {:.6}", r.id, r.mpjpe, r.pa_mpjpe, r.pve).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn skeleton() -> Vec<Vector3<f64>> {
        (0..17)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.7).sin() * 100.0, f * 30.0, (f * 1.3).cos() * 50.0)
            })
            .collect()
    }

    #[test]
    fn translation_cancels() {
        let gt = skeleton();
        let pred: Vec<_> = gt.iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)).collect();
        assert_eq!(mpjpe(&gt, &gt), 0.0);
        assert!(mpjpe(&pred, &gt) < 1e-12);
    }

    #[test]
    fn one_joint_off() {
        let gt = skeleton();
        let mut pred = gt.clone();
        pred[5].x += 3.0;
        assert!((mpjpe(&pred, &gt) - 3.0 / 17.0).abs() < 1e-12);
        assert_eq!(format!("{:.4}", mpjpe(&pred, &gt)), "0.1765");
    }

    #[test]
    fn exact_similarity_is_removed() {
        let gt = skeleton();
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 2.0);
        let pred: Vec<_> = gt.iter().map(|p| 1.7 * (r * p) + Vector3::new(5.0, -2.0, 9.0)).collect();
        assert!(pa_mpjpe(&pred, &gt) < 1e-6);
        assert!(pa_mpjpe(&gt, &gt) < 1e-9);
        let sim = procrustes(&pred, &gt);
        assert!((sim.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_falls_back() {
        let gt: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let pred: Vec<_> = (0..5).map(|i| Vector3::new(0.0, 0.0, 0.0) * i as f64).collect();
        assert!(procrustes(&pred, &gt).degenerate);
    }

    #[test]
    fn records_format() {
        let r = EvalResult::from_samples(vec![SampleMetrics {
            id: "s0".into(),
            mpjpe: 1.0,
            pa_mpjpe: 0.5,
            pve: 2.0,
        }]);
        assert_eq!(r.records(), "s0 1.000000 0.500000 2.000000\n");
    }
}
