//! Shared fixtures and independent oracles for the integration suites.
//!
//! Everything here is deliberately written from scratch against the domain
//! definitions, not by calling the library paths it is used to check.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfm_semval::bundle::BaProblem;
use sfm_semval::camera::Pose;
use sfm_semval::model_io::{
    CameraIntrinsics, CameraModelKind, ImageRecord, Point2D, Point3D, SparseModel, TrackElement,
};
use sfm_semval::planes::{LabeledPlane, OcclusionStatus};
use sfm_semval::semantics::LabeledObservation;

// ---------------------------------------------------------------------------
// Random labelled micro-models for the filter oracle.

pub struct LabeledModel {
    pub model: SparseModel,
    pub observations: Vec<LabeledObservation>,
}

/// Random micro-model: up to `max_images` images, up to `max_points` points
/// with unique-image tracks, labels drawn from `classes`.
pub fn random_labeled_model(
    max_images: u32,
    max_points: u64,
    classes: &[u8],
    seed: u64,
) -> LabeledModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = rng.random_range(2..=max_images);
    let n_points = rng.random_range(1..=max_points);

    let mut model = SparseModel::empty();
    model.cameras.insert(
        1,
        CameraIntrinsics::new(1, CameraModelKind::SimplePinhole, 200, 200, vec![100.0, 100.0, 100.0])
            .unwrap(),
    );
    for image_id in 1..=n_images {
        model.images.insert(
            image_id,
            ImageRecord {
                image_id,
                qvec: [1.0, 0.0, 0.0, 0.0],
                tvec: Vector3::new(image_id as f64, 0.0, 0.0),
                camera_id: 1,
                name: format!("img{image_id}.jpg"),
                points2d: Vec::new(),
            },
        );
    }
    let mut observations = Vec::new();
    for pid in 1..=n_points {
        let len = rng.random_range(1..=n_images as usize);
        let mut images: Vec<u32> = (1..=n_images).collect();
        for i in (1..images.len()).rev() {
            images.swap(i, rng.random_range(0..=i));
        }
        let mut track = Vec::new();
        for &image_id in images.iter().take(len) {
            let image = model.images.get_mut(&image_id).unwrap();
            let idx = image.points2d.len() as u32;
            image.points2d.push(Point2D {
                x: idx as f64 + 0.5,
                y: 0.5,
                point3d_id: Some(pid),
            });
            track.push(TrackElement {
                image_id,
                point2d_idx: idx,
            });
            observations.push(LabeledObservation {
                image_id,
                point2d_idx: idx,
                x: idx as f64 + 0.5,
                y: 0.5,
                point3d_id: pid,
                class_id: classes[rng.random_range(0..classes.len())],
            });
        }
        model.points.insert(
            pid,
            Point3D {
                point3d_id: pid,
                xyz: Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(1.0..8.0),
                ),
                rgb: [0, 0, 0],
                error: 0.0,
                track,
            },
        );
    }
    model.check_integrity().unwrap();
    LabeledModel {
        model,
        observations,
    }
}

fn label_of(observations: &[LabeledObservation], image_id: u32, point2d_idx: u32) -> u8 {
    observations
        .iter()
        .find(|o| o.image_id == image_id && o.point2d_idx == point2d_idx)
        .expect("observation coverage")
        .class_id
}

fn brute_majority(labels: &[u8]) -> u8 {
    let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap();
    *counts.iter().find(|(_, &c)| c == max).unwrap().0
}

/// Rebuilds the model with only the given per-point surviving tracks.
fn rebuild(model: &SparseModel, keep: BTreeMap<u64, Vec<TrackElement>>) -> SparseModel {
    let mut out = model.clone();
    for image in out.images.values_mut() {
        for p in &mut image.points2d {
            p.point3d_id = None;
        }
    }
    out.points.clear();
    for (pid, track) in keep {
        let mut point = model.points[&pid].clone();
        for el in &track {
            out.images.get_mut(&el.image_id).unwrap().points2d[el.point2d_idx as usize].point3d_id =
                Some(pid);
        }
        point.track = track;
        out.points.insert(pid, point);
    }
    out
}

/// From-scratch consistency filter: majority per track (smallest id wins
/// ties), keep matching observations, drop points under `min_track`.
pub fn brute_force_consistency(
    model: &SparseModel,
    observations: &[LabeledObservation],
    min_track: usize,
) -> SparseModel {
    let mut keep = BTreeMap::new();
    for point in model.points.values() {
        let labels: Vec<u8> = point
            .track
            .iter()
            .map(|el| label_of(observations, el.image_id, el.point2d_idx))
            .collect();
        let winner = brute_majority(&labels);
        let kept: Vec<TrackElement> = point
            .track
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == winner)
            .map(|(el, _)| *el)
            .collect();
        if kept.len() >= min_track {
            keep.insert(point.point3d_id, kept);
        }
    }
    rebuild(model, keep)
}

/// From-scratch motion filter under the majority or any policy.
pub fn brute_force_motion(
    model: &SparseModel,
    observations: &[LabeledObservation],
    dynamic: &[u8],
    any_policy: bool,
) -> SparseModel {
    let mut keep = BTreeMap::new();
    for point in model.points.values() {
        let labels: Vec<u8> = point
            .track
            .iter()
            .map(|el| label_of(observations, el.image_id, el.point2d_idx))
            .collect();
        let remove = if any_policy {
            labels.iter().any(|l| dynamic.contains(l))
        } else {
            dynamic.contains(&brute_majority(&labels))
        };
        if !remove {
            keep.insert(point.point3d_id, point.track.clone());
        }
    }
    rebuild(model, keep)
}

// ---------------------------------------------------------------------------
// Ray-sampling occlusion oracle.

/// Classifies one (camera, point) ray against the opaque planes by dense
/// sampling: the plane's signed distance is evaluated at 10³ steps along
/// the segment, a sign change is located, the crossing interpolated, and
/// the crossing tested against the margins and extent. Planes are visited
/// in order; the first blocking plane wins.
pub fn sampled_verdict(
    camera: Vector3<f64>,
    point: Vector3<f64>,
    point_id: u64,
    planes: &[LabeledPlane],
    depth_margin: f64,
    extent_margin: f64,
) -> (OcclusionStatus, Option<usize>) {
    const STEPS: usize = 1000;
    let diff = point - camera;
    let dist = diff.norm();
    let dir = diff / dist;
    for (idx, plane) in planes.iter().enumerate() {
        if !plane.opaque || plane.support.contains(&point_id) {
            continue;
        }
        let mut crossing: Option<f64> = None;
        let mut prev = plane.signed_distance(&camera);
        for k in 1..=STEPS {
            let t = dist * (k as f64 / STEPS as f64);
            let s = plane.signed_distance(&(camera + dir * t));
            if prev == 0.0 || prev.signum() != s.signum() {
                let t_prev = dist * ((k - 1) as f64 / STEPS as f64);
                // The signed distance is linear along the ray, so the
                // interpolated root is the crossing.
                let root = if s == prev {
                    t_prev
                } else {
                    t_prev + (t - t_prev) * (prev / (prev - s))
                };
                crossing = Some(root);
                break;
            }
            prev = s;
        }
        if let Some(d) = crossing {
            if d > depth_margin
                && d < dist - depth_margin
                && plane.in_extent(&(camera + dir * d), extent_margin)
            {
                return (OcclusionStatus::Occluded, Some(idx));
            }
        }
    }
    (OcclusionStatus::Valid, None)
}

/// A random occlusion scene: planes with random orientation and extent,
/// points in a box, and 2-4 cameras observing every point.
pub struct OcclusionScene {
    pub model: SparseModel,
    pub planes: Vec<LabeledPlane>,
}

pub fn random_occlusion_scene(seed: u64) -> OcclusionScene {
    use sfm_semval::planes::{basis_from_normal, PlaneExtent};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_planes = rng.random_range(1..=10);
    let n_points = rng.random_range(10..=100);
    let n_cameras = rng.random_range(2..=4);

    let mut planes = Vec::new();
    for i in 0..n_planes {
        let normal = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() > 0.1 {
                break v.normalize();
            }
        };
        let (u_axis, v_axis) = basis_from_normal(&normal);
        planes.push(LabeledPlane {
            normal,
            p0: Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(1.0..7.0),
            ),
            class_id: 11,
            opaque: i % 3 != 2, // roughly a third transparent
            extent: PlaneExtent {
                u_axis,
                v_axis,
                half_u: rng.random_range(0.5..3.0),
                half_v: rng.random_range(0.5..3.0),
                margin: 0.0,
            },
            support: Default::default(),
        });
    }

    let mut model = SparseModel::empty();
    model.cameras.insert(
        1,
        CameraIntrinsics::new(1, CameraModelKind::SimplePinhole, 100, 100, vec![50.0, 50.0, 50.0])
            .unwrap(),
    );
    for image_id in 1..=n_cameras {
        // Identity rotation; distinct centres behind the point box.
        let center = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(-6.0..-4.0),
        );
        model.images.insert(
            image_id,
            ImageRecord {
                image_id,
                qvec: [1.0, 0.0, 0.0, 0.0],
                tvec: -center,
                camera_id: 1,
                name: format!("cam{image_id}.jpg"),
                points2d: Vec::new(),
            },
        );
    }
    for pid in 1..=n_points {
        let xyz = Vector3::new(
            rng.random_range(-4.0..4.0),
            rng.random_range(-4.0..4.0),
            rng.random_range(0.0..8.0),
        );
        let mut track = Vec::new();
        for image_id in 1..=n_cameras {
            let image = model.images.get_mut(&image_id).unwrap();
            let idx = image.points2d.len() as u32;
            image.points2d.push(Point2D {
                x: 0.5,
                y: 0.5,
                point3d_id: Some(pid),
            });
            track.push(TrackElement {
                image_id,
                point2d_idx: idx,
            });
        }
        model.points.insert(
            pid,
            Point3D {
                point3d_id: pid,
                xyz,
                rgb: [0, 0, 0],
                error: 0.0,
                track,
            },
        );
    }
    model.check_integrity().unwrap();
    OcclusionScene { model, planes }
}

// ---------------------------------------------------------------------------
// Analytic Jacobian oracle for bundle adjustment.

/// Closed-form Jacobian of the residual vector (measured − projected) with
/// respect to the local parameters, for pinhole problems. Derived
/// independently of the library's finite differences: per observation,
/// ∂pixel/∂p_cam is the standard perspective derivative, the rotation
/// increment enters as p_cam(δ) = exp([δ]ₓ)·R·x + t, and the residual sign
/// flips everything.
pub fn analytic_jacobian(problem: &BaProblem) -> nalgebra::DMatrix<f64> {
    let free_images: Vec<u32> = problem
        .poses()
        .keys()
        .copied()
        .filter(|id| !problem.fixed_images().contains(id))
        .collect();
    let image_offset: BTreeMap<u32, usize> = free_images
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, 6 * i))
        .collect();
    let point_ids: Vec<u64> = problem.points().keys().copied().collect();
    let point_offset: BTreeMap<u64, usize> = point_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (*id, 6 * free_images.len() + 3 * i))
        .collect();

    let mut j = nalgebra::DMatrix::zeros(2 * problem.observations().len(), problem.parameter_count());
    for (row2, obs) in problem.observations().iter().enumerate() {
        let pose_block = problem.poses()[&obs.image_id];
        let pose = Pose::from_quat_trans(&pose_block.qvec, pose_block.tvec).unwrap();
        let cam = &problem.intrinsics()[&obs.image_id];
        let x = problem.points()[&obs.point_id];
        let p = pose.transform(&x);
        let (fx, fy) = cam.focal();
        let z2 = p.z * p.z;
        // ∂pixel/∂p_cam for an undistorted pinhole.
        let dpix = Matrix2x3::new(
            fx / p.z,
            0.0,
            -fx * p.x / z2,
            0.0,
            fy / p.z,
            -fy * p.y / z2,
        );
        let rx = pose.rotation.apply(&x);
        let skew_rx = Matrix3::new(0.0, -rx.z, rx.y, rx.z, 0.0, -rx.x, -rx.y, rx.x, 0.0);
        let row = 2 * row2;
        if let Some(&off) = image_offset.get(&obs.image_id) {
            // ∂p_cam/∂δ = −[R·x]ₓ and r = measured − pixel.
            let d_rot = dpix * skew_rx;
            let d_trans = -dpix;
            j.view_mut((row, off), (2, 3)).copy_from(&d_rot);
            j.view_mut((row, off + 3), (2, 3)).copy_from(&d_trans);
        }
        let off = point_offset[&obs.point_id];
        let d_point = -dpix * pose.rotation.matrix();
        j.view_mut((row, off), (2, 3)).copy_from(&d_point);
    }
    j
}

// ---------------------------------------------------------------------------
// Misc helpers.

/// Float-tolerant model comparison (integers exact, reals within `tol`).
pub fn assert_models_close(a: &SparseModel, b: &SparseModel, tol: f64) {
    assert_eq!(a.cameras.len(), b.cameras.len());
    for (ca, cb) in a.cameras.values().zip(b.cameras.values()) {
        assert_eq!(ca.camera_id, cb.camera_id);
        assert_eq!(ca.model, cb.model);
        assert_eq!((ca.width, ca.height), (cb.width, cb.height));
        for (pa, pb) in ca.params.iter().zip(&cb.params) {
            assert!((pa - pb).abs() <= tol, "camera param {pa} vs {pb}");
        }
    }
    assert_eq!(a.images.len(), b.images.len());
    for (ia, ib) in a.images.values().zip(b.images.values()) {
        assert_eq!(ia.image_id, ib.image_id);
        assert_eq!(ia.camera_id, ib.camera_id);
        assert_eq!(ia.name, ib.name);
        for (qa, qb) in ia.qvec.iter().zip(&ib.qvec) {
            assert!((qa - qb).abs() <= tol, "qvec {qa} vs {qb}");
        }
        assert!((ia.tvec - ib.tvec).norm() <= tol);
        assert_eq!(ia.points2d.len(), ib.points2d.len());
        for (pa, pb) in ia.points2d.iter().zip(&ib.points2d) {
            assert!((pa.x - pb.x).abs() <= tol && (pa.y - pb.y).abs() <= tol);
            assert_eq!(pa.point3d_id, pb.point3d_id);
        }
    }
    assert_eq!(a.points.len(), b.points.len());
    for (pa, pb) in a.points.values().zip(b.points.values()) {
        assert_eq!(pa.point3d_id, pb.point3d_id);
        assert!((pa.xyz - pb.xyz).norm() <= tol);
        assert_eq!(pa.rgb, pb.rgb);
        assert!((pa.error - pb.error).abs() <= tol);
        assert_eq!(pa.track, pb.track);
    }
}

/// Projects a world point through a pose/intrinsics pair without depth
/// checks (homogeneous division), for constructing behind-camera fixtures.
pub fn project_unchecked(
    pose: &Pose,
    cam: &CameraIntrinsics,
    x: &Vector3<f64>,
) -> Vector2<f64> {
    let p = pose.transform(x);
    let h = cam.k_matrix() * p;
    Vector2::new(h.x / h.z, h.y / h.z)
}
