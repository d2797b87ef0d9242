//! Pinhole camera algebra for 2.5D poses and similarity alignment.
//!
//! Units: 3D coordinates in millimetres (camera frame), image coordinates
//! in pixels, relative depth dimensionless (`(z − z_root) / s0`).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self> {
        let cam = Self { fx, fy, px, py };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.px.is_finite() || !self.py.is_finite() {
            return Err(Error::Config(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Per joint `[u, v, z_rel]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Pose2p5D {
    pub joints: Vec<[f64; 3]>,
}

/// Per joint `[x, y, z]` in the camera frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Pose3D {
    pub joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// Lifts image coordinates and relative depth back to camera space given
/// the hand scale `s0` and the root depth.
pub fn recover_3d(pose: &Pose2p5D, cam: &CameraIntrinsics, s0: f64, z_root: f64) -> Result<Pose3D> {
    if !(s0 > 0.0) {
        return Err(Error::Config(format!(
            "hand scale must be positive, got {s0}"
        )));
    }
    let joints = pose
        .joints
        .iter()
        .enumerate()
        .map(|(i, &[u, v, z_rel])| {
            let z = s0 * z_rel + z_root;
            if !(z > 0.0) {
                return Err(Error::DegenerateDepth { joint: i, z });
            }
            Ok([z * (u - cam.px) / cam.fx, z * (v - cam.py) / cam.fy, z])
        })
        .collect::<Result<_>>()?;
    Ok(Pose3D { joints })
}

pub fn project(pose: &Pose3D, cam: &CameraIntrinsics, s0: f64, z_root: f64) -> Result<Pose2p5D> {
    if !(s0 > 0.0) {
        return Err(Error::Config(format!(
            "hand scale must be positive, got {s0}"
        )));
    }
    let joints = pose
        .joints
        .iter()
        .enumerate()
        .map(|(i, &[x, y, z])| {
            if !(z > 0.0) {
                return Err(Error::Projection { joint: i, z });
            }
            Ok([
                cam.fx * x / z + cam.px,
                cam.fy * y / z + cam.py,
                (z - z_root) / s0,
            ])
        })
        .collect::<Result<_>>()?;
    Ok(Pose2p5D { joints })
}

/// `p ↦ scale · rotation · p + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.scale * (self.rotation * Vector3::from(p)) + self.translation;
        [q.x, q.y, q.z]
    }

    pub fn apply_pose(&self, pose: &Pose3D) -> Pose3D {
        Pose3D {
            joints: pose.joints.iter().map(|&p| self.apply(p)).collect(),
        }
    }
}

fn centroid(points: &[[f64; 3]]) -> Vector3<f64> {
    let sum = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from(*p));
    sum / points.len() as f64
}

/// Ratio of the second to first singular value of the centred point cloud.
fn spread_ratio(points: &[[f64; 3]], mu: &Vector3<f64>) -> f64 {
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - mu;
        scatter += d * d.transpose();
    }
    let sv = scatter.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] <= 0.0 {
        0.0
    } else {
        s[1] / s[0]
    }
}

/// Least-squares similarity transform taking `pred` onto `gt`, with the
/// rotation restricted to proper rotations (no reflections).
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<(Pose3D, SimilarityTransform)> {
    if pred.len() != gt.len() {
        return Err(Error::AlignmentDegenerate(format!(
            "poses have {} and {} joints",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::AlignmentDegenerate(format!(
            "{} joints is too few",
            pred.len()
        )));
    }
    let mu_p = centroid(&pred.joints);
    let mu_g = centroid(&gt.joints);
    for (name, pts, mu) in [
        ("prediction", &pred.joints, &mu_p),
        ("ground truth", &gt.joints, &mu_g),
    ] {
        if spread_ratio(pts, mu) < 1e-12 {
            return Err(Error::AlignmentDegenerate(format!(
                "{name} joints are collinear"
            )));
        }
    }

    let n = pred.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, g) in pred.joints.iter().zip(&gt.joints) {
        let dp = Vector3::from(*p) - mu_p;
        let dg = Vector3::from(*g) - mu_g;
        cov += dg * dp.transpose();
        var_p += dp.norm_squared();
    }
    cov /= n;
    var_p /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_p;
    let translation = mu_g - scale * (rotation * mu_p);
    let transform = SimilarityTransform {
        scale,
        rotation,
        translation,
    };
    Ok((transform.apply_pose(pred), transform))
}

/// Per-joint Euclidean distances.
pub fn joint_errors(pred: &Pose3D, gt: &Pose3D) -> Vec<f64> {
    pred.joints
        .iter()
        .zip(&gt.joints)
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .collect()
}
