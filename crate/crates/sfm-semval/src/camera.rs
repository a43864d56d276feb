//! Rotations, camera poses, projection and reprojection statistics.
//!
//! Poses are world-to-camera maps `x_cam = R x + t`. Distortion is applied
//! in normalized camera coordinates before the intrinsics, matching the
//! convention under which the radial parameters of the model files were
//! estimated.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_io::{CameraIntrinsics, CameraModelKind, ImageRecord, ModelIoError, SparseModel};

/// Depth below which a point counts as behind the camera (or at its centre).
pub const DEPTH_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("quaternion has zero norm")]
    ZeroQuaternion,

    #[error("matrix is not a rotation: {0}")]
    NotARotation(String),

    #[error("non-positive depth {depth}: point behind camera or at its centre")]
    NonPositiveDepth { depth: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(#[from] ModelIoError),
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Validates orthonormality and determinant within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let gram = m.transpose() * m;
        let ortho_err = (gram - Matrix3::identity()).norm();
        if ortho_err > 1e-9 {
            return Err(GeometryError::NotARotation(format!(
                "RᵀR deviates from identity by {ortho_err:.3e}"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotARotation(format!("det = {det}")));
        }
        Ok(Rotation(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Applies the inverse rotation (the transpose).
    pub fn apply_inverse(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transpose() * v
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// `self ∘ other`: `other` is applied first.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_quat_trans(qvec: &[f64; 4], tvec: Vector3<f64>) -> Result<Self, GeometryError> {
        Ok(Pose {
            rotation: quat_to_rotation(qvec)?,
            translation: tvec,
        })
    }

    /// Pose of a loaded image record.
    pub fn of_image(image: &ImageRecord) -> Result<Self, GeometryError> {
        Pose::from_quat_trans(&image.qvec, image.tvec)
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.apply(x) + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        let t_inv = -rot_inv.apply(&self.translation);
        Pose {
            rotation: rot_inv,
            translation: t_inv,
        }
    }

    /// `self ∘ other`: `other` maps first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.apply(&other.translation) + self.translation,
        }
    }
}

/// Rotation matrix of a Hamilton-convention quaternion `(w, x, y, z)`.
///
/// The quaternion is normalized first; `q` and `-q` give the same rotation.
pub fn quat_to_rotation(q: &[f64; 4]) -> Result<Rotation, GeometryError> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(GeometryError::ZeroQuaternion);
    }
    let [w, x, y, z] = [q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm];
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Ok(Rotation(m))
}

/// Quaternion `(w, x, y, z)` of a rotation, with non-negative `w`.
pub fn rotation_to_quat(r: &Rotation) -> [f64; 4] {
    let m = r.matrix();
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let mut q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    if q[0] < 0.0 {
        for v in &mut q {
            *v = -*v;
        }
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// Camera centre in world coordinates: `-Rᵀ t`.
pub fn camera_center(pose: &Pose) -> Vector3<f64> {
    -pose.rotation.apply_inverse(&pose.translation)
}

/// Projects a world point to pixel coordinates.
///
/// Pinhole division, then the model's radial distortion in normalized
/// coordinates, then the principal-point offset. Points with camera-frame
/// depth at or below [`DEPTH_EPS`] are rejected rather than clamped.
pub fn project(
    pose: &Pose,
    cam: &CameraIntrinsics,
    x: &Vector3<f64>,
) -> Result<Vector2<f64>, GeometryError> {
    let pc = pose.transform(x);
    if pc.z <= DEPTH_EPS {
        return Err(GeometryError::NonPositiveDepth { depth: pc.z });
    }
    let u = pc.x / pc.z;
    let v = pc.y / pc.z;
    let (ud, vd) = distort(cam.model, cam, u, v);
    let (fx, fy) = cam.focal();
    let (cx, cy) = cam.principal_point();
    Ok(Vector2::new(fx * ud + cx, fy * vd + cy))
}

fn distort(model: CameraModelKind, cam: &CameraIntrinsics, u: f64, v: f64) -> (f64, f64) {
    match model {
        CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => (u, v),
        CameraModelKind::SimpleRadial | CameraModelKind::Radial => {
            let (k1, k2) = cam.radial();
            let r2 = u * u + v * v;
            let s = 1.0 + r2 * (k1 + r2 * k2);
            (u * s, v * s)
        }
    }
}

/// Summary statistics of a model, laid out like the report tables.
///
/// Means are absent (`None`) rather than NaN when their denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub cameras: u64,
    pub images: u64,
    pub points: u64,
    pub observations: u64,
    pub mean_track_length: Option<f64>,
    pub mean_obs_per_image: Option<f64>,
    pub mean_reproj_error: Option<f64>,
}

impl Stats {
    /// Derives the means from raw counts (no reprojection error).
    pub fn from_counts(cameras: u64, images: u64, points: u64, observations: u64) -> Stats {
        Stats {
            cameras,
            images,
            points,
            observations,
            mean_track_length: (points > 0).then(|| observations as f64 / points as f64),
            mean_obs_per_image: (images > 0).then(|| observations as f64 / images as f64),
            mean_reproj_error: None,
        }
    }
}

/// Counts, track-length and reprojection-error means of a model.
///
/// The reprojection error of an observation is the Euclidean pixel distance
/// between the stored keypoint and the reprojection of its 3D point.
/// Observations whose point projects behind the camera are excluded from the
/// mean (they are counted, never silently clamped).
pub fn mean_reprojection_stats(model: &SparseModel) -> Result<Stats, GeometryError> {
    model.check_integrity()?;
    let observations = model.observation_count();
    let mut stats = Stats::from_counts(
        model.cameras.len() as u64,
        model.images.len() as u64,
        model.points.len() as u64,
        observations,
    );
    let mut sum = 0.0;
    let mut n = 0u64;
    for image in model.images.values() {
        let pose = Pose::of_image(image)?;
        let cam = &model.cameras[&image.camera_id];
        for p2d in &image.points2d {
            let Some(pid) = p2d.point3d_id else { continue };
            let point = &model.points[&pid];
            match project(&pose, cam, &point.xyz) {
                Ok(proj) => {
                    sum += (proj - Vector2::new(p2d.x, p2d.y)).norm();
                    n += 1;
                }
                Err(GeometryError::NonPositiveDepth { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    stats.mean_reproj_error = (n > 0).then(|| sum / n as f64);
    Ok(stats)
}
