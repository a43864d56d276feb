//! Deterministic synthetic scenes.
//!
//! Small generators used by the examples and the verification suites:
//! every builder is seeded, so a given seed always produces the same scene.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::{camera_center, project, quat_to_rotation, Pose, Rotation};
use crate::model_io::{
    CameraIntrinsics, CameraModelKind, ImageRecord, Point2D, Point3D, SparseModel, TrackElement,
};
use crate::two_view::Correspondence;

fn shared_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(
        1,
        CameraModelKind::SimplePinhole,
        1280,
        720,
        vec![800.0, 640.0, 360.0],
    )
    .unwrap()
}

fn yaw_quat(angle: f64) -> [f64; 4] {
    [(angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0]
}

/// A sparse model whose observations are exact projections of its points.
///
/// Cameras sit on a short lateral baseline looking roughly down +z at a
/// point cloud a few units away; every point is observed in at least two
/// images. The reprojection error of the returned model is zero.
pub fn exact_scene(n_images: usize, n_points: usize, seed: u64) -> SparseModel {
    assert!(n_images >= 2, "need at least two images");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SparseModel::empty();
    let camera = shared_camera();
    model.cameras.insert(camera.camera_id, camera.clone());

    let mut poses = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let image_id = (i + 1) as u32;
        let center = Vector3::new(0.4 * i as f64 - 0.2 * (n_images - 1) as f64, 0.0, 0.0);
        let yaw = 0.04 * (i as f64 - (n_images - 1) as f64 / 2.0);
        let qvec = yaw_quat(yaw);
        let rotation = quat_to_rotation(&qvec).unwrap();
        let tvec = -rotation.apply(&center);
        poses.push(Pose::new(rotation, tvec));
        model.images.insert(
            image_id,
            ImageRecord {
                image_id,
                qvec,
                tvec,
                camera_id: camera.camera_id,
                name: format!("frame{image_id:04}.jpg"),
                points2d: Vec::new(),
            },
        );
    }

    for p in 0..n_points {
        let point3d_id = (p + 1) as u64;
        let xyz = Vector3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(4.0..8.0),
        );
        // Observe the point in a contiguous window of at least two images.
        let track_len = rng.random_range(2..=n_images);
        let start = rng.random_range(0..=n_images - track_len);
        let mut track = Vec::with_capacity(track_len);
        for i in start..start + track_len {
            let image_id = (i + 1) as u32;
            let proj = project(&poses[i], &camera, &xyz).expect("scene points are in front");
            let image = model.images.get_mut(&image_id).unwrap();
            track.push(TrackElement {
                image_id,
                point2d_idx: image.points2d.len() as u32,
            });
            image.points2d.push(Point2D {
                x: proj.x,
                y: proj.y,
                point3d_id: Some(point3d_id),
            });
        }
        model.points.insert(
            point3d_id,
            Point3D {
                point3d_id,
                xyz,
                rgb: [rng.random(), rng.random(), rng.random()],
                error: 0.0,
                track,
            },
        );
    }
    model
        .check_integrity()
        .expect("synthetic scene is intact by construction");
    model
}

/// A calibrated two-camera scene with noiseless correspondences and the
/// ground-truth epipolar entities derived from the poses.
pub struct TwoViewScene {
    pub cam1: CameraIntrinsics,
    pub cam2: CameraIntrinsics,
    pub pose1: Pose,
    pub pose2: Pose,
    pub world_points: Vec<Vector3<f64>>,
    pub correspondences: Vec<Correspondence>,
    /// Relative pose of camera 2 w.r.t. camera 1 (camera-1 frame is world).
    pub relative: Pose,
    /// Ground-truth fundamental matrix (unnormalized).
    pub fundamental: Matrix3<f64>,
    /// Ground-truth essential matrix `[t]ₓ R` (unnormalized).
    pub essential: Matrix3<f64>,
}

pub fn skew_symmetric(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Builds a two-view scene with `n_points` noiseless correspondences.
///
/// Camera 1 is at the origin looking down +z; camera 2 is offset along x
/// with a small yaw so the fields of view overlap.
pub fn two_view_scene(n_points: usize, seed: u64) -> TwoViewScene {
    two_view_scene_with_camera(n_points, seed, shared_camera())
}

/// [`two_view_scene`] with a compact camera (f = 100, 128×72 frame).
///
/// Algebraic epipolar residuals have an f64 floor of about
/// ‖x₁‖·‖x₂‖·ε for a unit-norm F, so exactness checks at the 1e-9 level
/// need coordinates well below full HD scale.
pub fn two_view_scene_compact(n_points: usize, seed: u64) -> TwoViewScene {
    let cam = CameraIntrinsics::new(
        1,
        CameraModelKind::SimplePinhole,
        128,
        72,
        vec![100.0, 64.0, 36.0],
    )
    .unwrap();
    two_view_scene_with_camera(n_points, seed, cam)
}

fn two_view_scene_with_camera(n_points: usize, seed: u64, camera: CameraIntrinsics) -> TwoViewScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam1 = camera;
    let mut cam2 = cam1.clone();
    cam2.camera_id = 2;

    let pose1 = Pose::identity();
    let rotation2 = quat_to_rotation(&yaw_quat(-0.08)).unwrap();
    let center2 = Vector3::new(1.0, 0.1, 0.0);
    let pose2 = Pose::new(rotation2, -rotation2.apply(&center2));

    let relative = pose2.compose(&pose1.inverse());
    let essential = skew_symmetric(&relative.translation) * relative.rotation.matrix();
    let k1 = cam1.k_matrix();
    let k2 = cam2.k_matrix();
    let fundamental = k2.transpose().try_inverse().unwrap() * essential * k1.try_inverse().unwrap();

    let mut world_points = Vec::with_capacity(n_points);
    let mut correspondences = Vec::with_capacity(n_points);
    while world_points.len() < n_points {
        let x = Vector3::new(
            rng.random_range(-2.0..2.5),
            rng.random_range(-1.5..1.5),
            rng.random_range(3.0..9.0),
        );
        let (Ok(x1), Ok(x2)) = (project(&pose1, &cam1, &x), project(&pose2, &cam2, &x)) else {
            continue;
        };
        world_points.push(x);
        correspondences.push(Correspondence { x1, x2 });
    }

    TwoViewScene {
        cam1,
        cam2,
        pose1,
        pose2,
        world_points,
        correspondences,
        relative,
        fundamental,
        essential,
    }
}

impl TwoViewScene {
    /// Appends uniform outlier correspondences whose algebraic epipolar
    /// residual (w.r.t. the Frobenius-normalized ground-truth F) exceeds
    /// `min_residual`, and returns the indices of the planted inliers.
    pub fn with_outliers(
        &mut self,
        n_outliers: usize,
        min_residual: f64,
        seed: u64,
    ) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inliers: Vec<usize> = (0..self.correspondences.len()).collect();
        let f = self.fundamental / self.fundamental.norm();
        let (w, h) = (self.cam1.width as f64, self.cam1.height as f64);
        let mut added = 0;
        while added < n_outliers {
            let c = Correspondence {
                x1: nalgebra::Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
                x2: nalgebra::Vector2::new(rng.random_range(0.0..w), rng.random_range(0.0..h)),
            };
            let x1 = Vector3::new(c.x1.x, c.x1.y, 1.0);
            let x2 = Vector3::new(c.x2.x, c.x2.y, 1.0);
            if (x2.transpose() * f * x1)[0].abs() < min_residual {
                continue;
            }
            self.correspondences.push(c);
            added += 1;
        }
        inliers
    }

    /// Baseline length between the two camera centres.
    pub fn baseline(&self) -> f64 {
        (camera_center(&self.pose1) - camera_center(&self.pose2)).norm()
    }
}

/// Rigidly perturbs image poses and point positions of a model.
///
/// Rotations are perturbed by `rot_angle` radians about random axes,
/// translations by `trans_abs` in a random direction, points by
/// `point_rel` of their norm. The first image is left untouched so it can
/// serve as the gauge anchor.
pub fn perturb_model(model: &SparseModel, rot_angle: f64, trans_abs: f64, point_rel: f64, seed: u64) -> SparseModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_unit = |rng: &mut ChaCha8Rng| loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    };
    let mut out = model.clone();
    let first = out.images.keys().next().copied();
    for image in out.images.values_mut() {
        if Some(image.image_id) == first {
            continue;
        }
        let axis = random_unit(&mut rng);
        let half = rot_angle / 2.0;
        let dq = [half.cos(), axis.x * half.sin(), axis.y * half.sin(), axis.z * half.sin()];
        let delta = quat_to_rotation(&dq).unwrap();
        let rotation = delta.compose(&quat_to_rotation(&image.qvec).unwrap());
        image.qvec = crate::camera::rotation_to_quat(&rotation);
        image.tvec += random_unit(&mut rng) * trans_abs;
    }
    for point in out.points.values_mut() {
        point.xyz += random_unit(&mut rng) * (point.xyz.norm() * point_rel);
    }
    out
}

/// Convenience: rotation about an arbitrary axis, for building fixtures.
pub fn rotation_about(axis: Vector3<f64>, angle: f64) -> Rotation {
    let a = axis.normalize();
    let half = angle / 2.0;
    quat_to_rotation(&[half.cos(), a.x * half.sin(), a.y * half.sin(), a.z * half.sin()]).unwrap()
}
