//! Desk-scale bundle adjustment.
//!
//! Levenberg-Marquardt refinement of camera poses and 3D points minimizing
//! the total squared reprojection error, with dense normal equations and a
//! finite-difference Jacobian. Intrinsics stay fixed. Rotations are updated
//! through a local 3-parameter axis-angle increment composed onto the
//! stored quaternion, which keeps the unit-norm constraint out of the
//! normal equations.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use thiserror::Error;

use crate::camera::{project, GeometryError, Pose};
use crate::model_io::{CameraIntrinsics, ImageId, Point3dId, SparseModel};

#[derive(Debug, Error)]
pub enum BaError {
    #[error("observation references missing {what} {id}")]
    MissingReference { what: &'static str, id: u64 },

    #[error("observation of point {point_id} in image {image_id} has non-positive depth")]
    NonPositiveDepth { image_id: ImageId, point_id: Point3dId },

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("problem has no observations")]
    Empty,

    #[error("normal equations unsolvable at every damping level up to {0:.1e}")]
    NormalEquationsSingular(f64),

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One measured keypoint: image, point, pixel position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaObservation {
    pub image_id: ImageId,
    pub point_id: Point3dId,
    pub measured: Vector2<f64>,
}

/// Pose block stored as quaternion + translation (world-to-camera).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaPose {
    pub qvec: [f64; 4],
    pub tvec: Vector3<f64>,
}

/// A bundle-adjustment problem: poses, fixed intrinsics, points and
/// observations. Observations are kept sorted by `(image_id, point_id)` so
/// residual vectors and Jacobians are reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    poses: BTreeMap<ImageId, BaPose>,
    intrinsics: BTreeMap<ImageId, CameraIntrinsics>,
    points: BTreeMap<Point3dId, Vector3<f64>>,
    observations: Vec<BaObservation>,
    fixed_images: BTreeSet<ImageId>,
}

impl BaProblem {
    pub fn new(
        poses: BTreeMap<ImageId, BaPose>,
        intrinsics: BTreeMap<ImageId, CameraIntrinsics>,
        points: BTreeMap<Point3dId, Vector3<f64>>,
        mut observations: Vec<BaObservation>,
    ) -> Result<Self, BaError> {
        for obs in &observations {
            if !poses.contains_key(&obs.image_id) || !intrinsics.contains_key(&obs.image_id) {
                return Err(BaError::MissingReference {
                    what: "image",
                    id: obs.image_id as u64,
                });
            }
            if !points.contains_key(&obs.point_id) {
                return Err(BaError::MissingReference {
                    what: "point",
                    id: obs.point_id,
                });
            }
        }
        observations.sort_by_key(|o| (o.image_id, o.point_id));
        Ok(BaProblem {
            poses,
            intrinsics,
            points,
            observations,
            fixed_images: BTreeSet::new(),
        })
    }

    /// Builds a problem from a sparse model (all observations included).
    pub fn from_model(model: &SparseModel) -> Result<Self, BaError> {
        let mut poses = BTreeMap::new();
        let mut intrinsics = BTreeMap::new();
        let mut observations = Vec::new();
        for image in model.images.values() {
            poses.insert(
                image.image_id,
                BaPose {
                    qvec: image.qvec,
                    tvec: image.tvec,
                },
            );
            let cam = model
                .cameras
                .get(&image.camera_id)
                .ok_or(BaError::MissingReference {
                    what: "camera",
                    id: image.camera_id as u64,
                })?;
            intrinsics.insert(image.image_id, cam.clone());
        }
        let mut points = BTreeMap::new();
        for point in model.points.values() {
            points.insert(point.point3d_id, point.xyz);
            for el in &point.track {
                let image = &model.images[&el.image_id];
                let p2d = &image.points2d[el.point2d_idx as usize];
                observations.push(BaObservation {
                    image_id: el.image_id,
                    point_id: point.point3d_id,
                    measured: Vector2::new(p2d.x, p2d.y),
                });
            }
        }
        BaProblem::new(poses, intrinsics, points, observations)
    }

    /// Excludes an image's pose from the parameter vector (gauge anchor).
    pub fn fix_image(&mut self, image_id: ImageId) {
        self.fixed_images.insert(image_id);
    }

    /// Fixes the first image by id.
    pub fn fix_first_image(&mut self) {
        if let Some(&id) = self.poses.keys().next() {
            self.fixed_images.insert(id);
        }
    }

    pub fn poses(&self) -> &BTreeMap<ImageId, BaPose> {
        &self.poses
    }

    pub fn intrinsics(&self) -> &BTreeMap<ImageId, CameraIntrinsics> {
        &self.intrinsics
    }

    pub fn points(&self) -> &BTreeMap<Point3dId, Vector3<f64>> {
        &self.points
    }

    pub fn observations(&self) -> &[BaObservation] {
        &self.observations
    }

    pub fn fixed_images(&self) -> &BTreeSet<ImageId> {
        &self.fixed_images
    }

    fn free_images(&self) -> Vec<ImageId> {
        self.poses
            .keys()
            .copied()
            .filter(|id| !self.fixed_images.contains(id))
            .collect()
    }

    /// Free parameters: 6 per non-fixed pose (axis-angle + translation),
    /// 3 per point.
    pub fn parameter_count(&self) -> usize {
        6 * self.free_images().len() + 3 * self.points.len()
    }

    pub fn residual_count(&self) -> usize {
        2 * self.observations.len()
    }

    /// Applies a local increment to a copy of the problem. Quaternions are
    /// renormalized after composition.
    fn with_increment(&self, delta: &DVector<f64>) -> Result<BaProblem, BaError> {
        assert_eq!(delta.len(), self.parameter_count());
        let mut out = self.clone();
        let mut k = 0;
        for image_id in self.free_images() {
            let pose = out.poses.get_mut(&image_id).unwrap();
            let rot_inc = Vector3::new(delta[k], delta[k + 1], delta[k + 2]);
            let t_inc = Vector3::new(delta[k + 3], delta[k + 4], delta[k + 5]);
            k += 6;
            pose.qvec = compose_axis_angle(&pose.qvec, &rot_inc)?;
            pose.tvec += t_inc;
        }
        for xyz in out.points.values_mut() {
            *xyz += Vector3::new(delta[k], delta[k + 1], delta[k + 2]);
            k += 3;
        }
        Ok(out)
    }

    /// Residual vector `measured − projected`, two entries per observation
    /// in `(image_id, point_id)` order.
    pub fn residuals(&self) -> Result<DVector<f64>, BaError> {
        let mut r = DVector::zeros(self.residual_count());
        let mut poses = BTreeMap::new();
        for (&id, pose) in &self.poses {
            poses.insert(id, Pose::from_quat_trans(&pose.qvec, pose.tvec)?);
        }
        for (i, obs) in self.observations.iter().enumerate() {
            let pose = &poses[&obs.image_id];
            let cam = &self.intrinsics[&obs.image_id];
            let xyz = &self.points[&obs.point_id];
            let proj = project(pose, cam, xyz).map_err(|e| match e {
                GeometryError::NonPositiveDepth { .. } => BaError::NonPositiveDepth {
                    image_id: obs.image_id,
                    point_id: obs.point_id,
                },
                other => BaError::Geometry(other),
            })?;
            r[2 * i] = obs.measured.x - proj.x;
            r[2 * i + 1] = obs.measured.y - proj.y;
        }
        Ok(r)
    }
}

/// Composes a left-multiplied axis-angle increment onto a quaternion:
/// `R_new = exp([δ]ₓ) · R_old`.
fn compose_axis_angle(q: &[f64; 4], delta: &Vector3<f64>) -> Result<[f64; 4], BaError> {
    let angle = delta.norm();
    let dq = if angle < 1e-12 {
        // First-order expansion; renormalized below.
        [1.0, delta.x / 2.0, delta.y / 2.0, delta.z / 2.0]
    } else {
        let half = angle / 2.0;
        let s = half.sin() / angle;
        [half.cos(), delta.x * s, delta.y * s, delta.z * s]
    };
    // Hamilton product dq ⊗ q.
    let [w1, x1, y1, z1] = dq;
    let [w2, x2, y2, z2] = *q;
    let mut out = [
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ];
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(BaError::Geometry(GeometryError::ZeroQuaternion));
    }
    for v in &mut out {
        *v /= norm;
    }
    Ok(out)
}

/// Total squared reprojection error over all observations.
pub fn reprojection_cost(problem: &BaProblem) -> Result<f64, BaError> {
    let r = problem.residuals()?;
    Ok(r.norm_squared())
}

/// Central finite-difference Jacobian of the residual vector with respect
/// to the local parameters, evaluated at the current state.
pub fn numeric_jacobian(problem: &BaProblem, step: f64) -> Result<DMatrix<f64>, BaError> {
    if !(step > 0.0) {
        return Err(BaError::InvalidStep(step));
    }
    let n = problem.parameter_count();
    let m = problem.residual_count();
    let mut j = DMatrix::zeros(m, n);
    let mut delta = DVector::zeros(n);
    for col in 0..n {
        delta[col] = step;
        let plus = problem.with_increment(&delta)?.residuals()?;
        delta[col] = -step;
        let minus = problem.with_increment(&delta)?.residuals()?;
        delta[col] = 0.0;
        let d = (plus - minus) / (2.0 * step);
        j.set_column(col, &d);
    }
    Ok(j)
}

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub lambda0: f64,
    pub max_iters: usize,
    /// Terminate once the relative cost decrease of a step falls below this.
    pub cost_tol: f64,
    /// Step used by the internal finite-difference Jacobian.
    pub jacobian_step: f64,
    pub lambda_ceiling: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            lambda0: 1e-3,
            max_iters: 100,
            cost_tol: 1e-12,
            jacobian_step: 1e-6,
            lambda_ceiling: 1e12,
        }
    }
}

/// Levenberg-Marquardt refinement.
///
/// Solves `(JᵀJ + λI) δ = −Jᵀr` per iteration, accepting a step only when
/// the cost decreases (λ shrinks ×0.1 on acceptance, grows ×10 on
/// rejection). Returns the refined problem and the accepted-cost trace,
/// whose first entry is the initial cost; the trace is strictly
/// decreasing.
pub fn lm_refine(problem: &BaProblem, opts: &LmOptions) -> Result<(BaProblem, Vec<f64>), BaError> {
    if problem.observations.is_empty() {
        return Err(BaError::Empty);
    }
    let mut current = problem.clone();
    let mut cost = reprojection_cost(&current)?;
    if !cost.is_finite() {
        return Err(BaError::Geometry(GeometryError::NonPositiveDepth { depth: f64::NAN }));
    }
    let mut trace = vec![cost];
    let mut lambda = opts.lambda0;

    for _ in 0..opts.max_iters {
        let r = current.residuals()?;
        let j = numeric_jacobian(&current, opts.jacobian_step)?;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;

        loop {
            let mut damped = jtj.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda;
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                if lambda > opts.lambda_ceiling {
                    return Err(BaError::NormalEquationsSingular(opts.lambda_ceiling));
                }
                continue;
            };
            let delta = chol.solve(&(-&g));
            let candidate = current.with_increment(&delta)?;
            match reprojection_cost(&candidate) {
                Ok(new_cost) if new_cost.is_finite() && new_cost <= cost => {
                    let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                    if new_cost < cost {
                        current = candidate;
                        cost = new_cost;
                        trace.push(cost);
                        lambda = (lambda * 0.1).max(1e-15);
                    }
                    if rel < opts.cost_tol {
                        return Ok((current, trace));
                    }
                    break;
                }
                // Cost increased or the step walked a point behind a
                // camera: reject and damp harder.
                _ => {
                    lambda *= 10.0;
                    if lambda > opts.lambda_ceiling {
                        // Damping maxed out with no acceptable step left.
                        return Ok((current, trace));
                    }
                }
            }
        }
    }
    Ok((current, trace))
}
