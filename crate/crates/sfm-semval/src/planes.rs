//! Labelled planes and ray-plane occlusion checking.
//!
//! Planes are fitted to clusters of semantically labelled points with
//! RANSAC and carry their class's opacity prior. A (camera, point) ray is
//! occluded when it crosses an opaque plane strictly between the camera
//! centre and the point, inside the plane's inlier extent plus a lateral
//! tolerance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{camera_center, GeometryError, Pose};
use crate::filters::{majority_label, FilterError, FilterReport};
use crate::model_io::{ImageId, ModelIoError, Point3dId, SparseModel};
use crate::semantics::{ClassTable, LabeledObservation};

#[derive(Debug, Error)]
pub enum PlaneError {
    #[error("need at least 3 points to fit a plane, got {0}")]
    TooFewPoints(usize),

    #[error("parameter {name} must be positive, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },

    #[error("points are collinear or no plane reaches 3 inliers")]
    Degenerate,

    #[error("point {point3d_id} coincides with the centre of camera {image_id}")]
    PointAtCameraCentre { point3d_id: Point3dId, image_id: ImageId },

    #[error("unknown class id {0} requested")]
    UnknownClass(u8),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Model(#[from] ModelIoError),

    #[error(transparent)]
    Geometry(#[from] GeometryError),

    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Rectangular in-plane extent: an orthonormal basis `(u_axis, v_axis)`
/// centred on the plane's support point, half sizes, and a stored margin.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneExtent {
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub margin: f64,
}

/// A fitted (or loaded) plane with its semantic class and opacity prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPlane {
    /// Unit normal.
    pub normal: Vector3<f64>,
    /// Support point on the plane (centre of the inlier extent).
    pub p0: Vector3<f64>,
    pub class_id: u8,
    pub opaque: bool,
    pub extent: PlaneExtent,
    /// Ids of the model points this plane was fitted to. A point is never
    /// tested for occlusion against its own supporting plane.
    pub support: BTreeSet<Point3dId>,
}

impl LabeledPlane {
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        (x - self.p0).dot(&self.normal)
    }

    /// Whether the in-plane projection of `x` falls inside the extent
    /// rectangle expanded by the stored margin plus `extra_margin`.
    pub fn in_extent(&self, x: &Vector3<f64>, extra_margin: f64) -> bool {
        let rel = x - self.p0;
        let m = self.extent.margin + extra_margin;
        rel.dot(&self.extent.u_axis).abs() <= self.extent.half_u + m
            && rel.dot(&self.extent.v_axis).abs() <= self.extent.half_v + m
    }

    /// Diagonal of the extent rectangle.
    pub fn diameter(&self) -> f64 {
        2.0 * (self.extent.half_u.hypot(self.extent.half_v))
    }
}

/// Deterministic orthonormal in-plane basis for a unit normal.
pub fn basis_from_normal(normal: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    // Cross with the world axis least aligned with the normal.
    let abs = normal.map(|v| v.abs());
    let seed = if abs.x <= abs.y && abs.x <= abs.z {
        Vector3::x()
    } else if abs.y <= abs.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let u = seed.cross(normal).normalize();
    let v = normal.cross(&u);
    (u, v)
}

/// Flips the normal so its largest-magnitude component is positive.
fn canonical_normal(n: Vector3<f64>) -> Vector3<f64> {
    let abs = n.map(|v| v.abs());
    let lead = if abs.x >= abs.y && abs.x >= abs.z {
        n.x
    } else if abs.y >= abs.z {
        n.y
    } else {
        n.z
    };
    if lead < 0.0 {
        -n
    } else {
        n
    }
}

/// Least-squares plane through a point set: centroid + smallest principal
/// direction of the centered covariance.
fn least_squares_plane(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let centroid = points.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..3 {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let normal: Vector3<f64> = eig.eigenvectors.column(min_idx).into();
    let norm = normal.norm();
    if norm < 1e-12 {
        return None;
    }
    Some((canonical_normal(normal / norm), centroid))
}

/// Builds the extent rectangle of the inliers and recentres `p0` on it.
fn extent_of(normal: &Vector3<f64>, p0: Vector3<f64>, inliers: &[Vector3<f64>]) -> (Vector3<f64>, PlaneExtent) {
    let (u_axis, v_axis) = basis_from_normal(normal);
    let mut u_min = f64::INFINITY;
    let mut u_max = f64::NEG_INFINITY;
    let mut v_min = f64::INFINITY;
    let mut v_max = f64::NEG_INFINITY;
    for p in inliers {
        let rel = p - p0;
        let u = rel.dot(&u_axis);
        let v = rel.dot(&v_axis);
        u_min = u_min.min(u);
        u_max = u_max.max(u);
        v_min = v_min.min(v);
        v_max = v_max.max(v);
    }
    let centre = p0 + u_axis * (u_min + u_max) / 2.0 + v_axis * (v_min + v_max) / 2.0;
    (
        centre,
        PlaneExtent {
            u_axis,
            v_axis,
            half_u: (u_max - u_min) / 2.0,
            half_v: (v_max - v_min) / 2.0,
            margin: 0.0,
        },
    )
}

/// RANSAC plane fit: maximizes inliers within point-plane distance `eps`,
/// refits by least squares on the inliers, and records the inlier extent.
///
/// The returned plane carries no class (the caller assigns it); the second
/// value is the inlier indices into `points`.
pub fn fit_plane_ransac(
    points: &[Vector3<f64>],
    eps: f64,
    trials: u64,
    rng_seed: u64,
) -> Result<(LabeledPlane, Vec<usize>), PlaneError> {
    if points.len() < 3 {
        return Err(PlaneError::TooFewPoints(points.len()));
    }
    if !(eps > 0.0) {
        return Err(PlaneError::InvalidParameter { name: "eps", value: eps });
    }
    if trials == 0 {
        return Err(PlaneError::InvalidParameter { name: "trials", value: 0.0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let scale = points
        .iter()
        .map(|p| p.norm())
        .fold(1.0f64, f64::max);

    let mut best: Option<(usize, Vector3<f64>, Vector3<f64>)> = None;
    for _ in 0..trials {
        let picks = sample(&mut rng, points.len(), 3);
        let a = points[picks.index(0)];
        let b = points[picks.index(1)];
        let c = points[picks.index(2)];
        let cross = (b - a).cross(&(c - a));
        if cross.norm() <= 1e-12 * scale * scale {
            continue; // collinear sample
        }
        let normal = cross.normalize();
        let count = points
            .iter()
            .filter(|p| (*p - a).dot(&normal).abs() <= eps)
            .count();
        if best.as_ref().is_none_or(|(best_count, _, _)| count > *best_count) {
            best = Some((count, normal, a));
        }
    }
    let Some((count, normal, anchor)) = best else {
        return Err(PlaneError::Degenerate);
    };
    if count < 3 {
        return Err(PlaneError::Degenerate);
    }

    let inlier_idx: Vec<usize> = (0..points.len())
        .filter(|&i| (points[i] - anchor).dot(&normal).abs() <= eps)
        .collect();
    let inlier_pts: Vec<Vector3<f64>> = inlier_idx.iter().map(|&i| points[i]).collect();
    let (mut normal, mut p0) = least_squares_plane(&inlier_pts).ok_or(PlaneError::Degenerate)?;

    // Re-derive the inlier set under the refit plane; fall back to the
    // RANSAC plane when the refit loses consensus.
    let refit_idx: Vec<usize> = (0..points.len())
        .filter(|&i| (points[i] - p0).dot(&normal).abs() <= eps)
        .collect();
    let inlier_idx = if refit_idx.len() >= 3 {
        refit_idx
    } else {
        normal = canonical_normal(normal);
        p0 = anchor;
        inlier_idx
    };
    let inlier_pts: Vec<Vector3<f64>> = inlier_idx.iter().map(|&i| points[i]).collect();
    let (centre, extent) = extent_of(&normal, p0, &inlier_pts);
    Ok((
        LabeledPlane {
            normal,
            p0: centre,
            class_id: crate::semantics::UNKNOWN_CLASS_ID,
            opaque: false,
            extent,
            support: BTreeSet::new(),
        },
        inlier_idx,
    ))
}

#[derive(Debug, Clone)]
pub struct PlaneExtractionOptions {
    /// Point-plane inlier distance.
    pub eps: f64,
    /// Minimum cluster size that yields a plane.
    pub min_inliers: usize,
    /// Classes to extract planes for.
    pub classes: Vec<u8>,
    /// Single-linkage clustering distance.
    pub cluster_dist: f64,
    pub trials: u64,
    pub seed: u64,
}

impl Default for PlaneExtractionOptions {
    fn default() -> Self {
        PlaneExtractionOptions {
            eps: 0.05,
            min_inliers: 10,
            classes: Vec::new(),
            cluster_dist: 1.0,
            trials: 128,
            seed: 0,
        }
    }
}

/// Majority label per point id.
fn majority_by_point(
    observations: &[LabeledObservation],
) -> Result<BTreeMap<Point3dId, u8>, PlaneError> {
    let mut labels: BTreeMap<Point3dId, Vec<u8>> = BTreeMap::new();
    for obs in observations {
        labels.entry(obs.point3d_id).or_default().push(obs.class_id);
    }
    let mut out = BTreeMap::new();
    for (pid, ls) in labels {
        out.insert(pid, majority_label(&ls)?.0);
    }
    Ok(out)
}

/// Single-linkage connected components under `cluster_dist`.
fn cluster_points(points: &[(Point3dId, Vector3<f64>)], cluster_dist: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    let d2 = cluster_dist * cluster_dist;
    for i in 0..n {
        for j in (i + 1)..n {
            if (points[i].1 - points[j].1).norm_squared() <= d2 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut clusters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        clusters.entry(root).or_default().push(i);
    }
    clusters.into_values().collect()
}

/// Fits one labelled plane per sufficiently large cluster of points whose
/// majority label is one of the requested classes. Classes absent from the
/// cloud simply produce no planes.
pub fn extract_semantic_planes(
    model: &SparseModel,
    observations: &[LabeledObservation],
    table: &ClassTable,
    opts: &PlaneExtractionOptions,
) -> Result<Vec<LabeledPlane>, PlaneError> {
    for class in &opts.classes {
        if !table.contains(*class) {
            return Err(PlaneError::UnknownClass(*class));
        }
    }
    let majorities = majority_by_point(observations)?;
    let mut planes = Vec::new();
    let mut cluster_seed = opts.seed;
    for &class in &opts.classes {
        let members: Vec<(Point3dId, Vector3<f64>)> = model
            .points
            .values()
            .filter(|p| majorities.get(&p.point3d_id) == Some(&class))
            .map(|p| (p.point3d_id, p.xyz))
            .collect();
        if members.len() < opts.min_inliers {
            continue;
        }
        for cluster in cluster_points(&members, opts.cluster_dist) {
            if cluster.len() < opts.min_inliers {
                continue;
            }
            let pts: Vec<Vector3<f64>> = cluster.iter().map(|&i| members[i].1).collect();
            cluster_seed = cluster_seed.wrapping_add(1);
            let Ok((mut plane, inliers)) =
                fit_plane_ransac(&pts, opts.eps, opts.trials, cluster_seed)
            else {
                continue; // collinear cluster, nothing to fit
            };
            if inliers.len() < opts.min_inliers {
                continue;
            }
            plane.class_id = class;
            plane.opaque = table.get(class).map(|e| e.opaque).unwrap_or(false);
            plane.support = inliers.iter().map(|&i| members[cluster[i]].0).collect();
            planes.push(plane);
        }
    }
    Ok(planes)
}

/// Distance along the unit ray `l0 + d·l` to the plane, or `None` when the
/// ray is parallel to it (`|l·n| ≤ 1e-12`). `d` may be negative.
pub fn ray_plane_intersection(
    l0: &Vector3<f64>,
    l: &Vector3<f64>,
    plane: &LabeledPlane,
) -> Option<f64> {
    debug_assert!((l.norm() - 1.0).abs() < 1e-9, "direction must be unit");
    let denom = l.dot(&plane.normal);
    if denom.abs() <= 1e-12 {
        return None;
    }
    Some((plane.p0 - l0).dot(&plane.normal) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionStatus {
    Valid,
    Occluded,
}

/// Per (point, image) occlusion verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionVerdict {
    pub point3d_id: Point3dId,
    pub image_id: ImageId,
    pub status: OcclusionStatus,
    /// Index into the plane list when occluded.
    pub blocking_plane: Option<usize>,
    /// Ray parameter of the blocking intersection, scene units.
    pub d: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OcclusionOptions {
    /// Margin excluded at both ray endpoints. Default:
    /// `max(1e-6, 1e-4 × scene diameter)`.
    pub depth_margin: Option<f64>,
    /// Lateral tolerance added to each plane's extent. Default: 2% of the
    /// plane's own diameter.
    pub extent_margin: Option<f64>,
    /// Fraction of a point's observations that must be occluded for the
    /// point to count as erroneous.
    pub aggregation_threshold: f64,
}

impl Default for OcclusionOptions {
    fn default() -> Self {
        OcclusionOptions {
            depth_margin: None,
            extent_margin: None,
            aggregation_threshold: 0.5,
        }
    }
}

fn scene_diameter(model: &SparseModel, centers: &BTreeMap<ImageId, Vector3<f64>>) -> f64 {
    let mut min = Vector3::repeat(f64::INFINITY);
    let mut max = Vector3::repeat(f64::NEG_INFINITY);
    let mut any = false;
    for p in model.points.values().map(|p| p.xyz).chain(centers.values().copied()) {
        min = min.inf(&p);
        max = max.sup(&p);
        any = true;
    }
    if any {
        (max - min).norm()
    } else {
        0.0
    }
}

/// Checks every (point, observing camera) ray against every opaque plane.
///
/// A ray is occluded when an opaque plane intersects it strictly between
/// the endpoints (margin `ε_d` excluded on both sides) and the
/// intersection lies inside the plane's extent expanded by the lateral
/// tolerance. A point's own supporting plane is skipped. The report counts
/// a point as erroneous when at least `aggregation_threshold` of its
/// observations are occluded; verdicts themselves are per-ray.
pub fn occlusion_validate(
    model: &SparseModel,
    planes: &[LabeledPlane],
    opts: &OcclusionOptions,
) -> Result<(Vec<OcclusionVerdict>, FilterReport), PlaneError> {
    model.check_integrity()?;
    let mut centers = BTreeMap::new();
    for image in model.images.values() {
        let pose = Pose::of_image(image)?;
        centers.insert(image.image_id, camera_center(&pose));
    }
    let depth_margin = opts
        .depth_margin
        .unwrap_or_else(|| (1e-4 * scene_diameter(model, &centers)).max(1e-6));

    let tasks: Vec<(&crate::model_io::Point3D, ImageId)> = model
        .points
        .values()
        .flat_map(|p| p.track.iter().map(move |el| (p, el.image_id)))
        .collect();

    let verdicts: Vec<Result<OcclusionVerdict, PlaneError>> = tasks
        .par_iter()
        .map(|(point, image_id)| {
            let c = centers[image_id];
            let diff = point.xyz - c;
            let dist = diff.norm();
            if dist <= 1e-12 {
                return Err(PlaneError::PointAtCameraCentre {
                    point3d_id: point.point3d_id,
                    image_id: *image_id,
                });
            }
            let dir = diff / dist;
            let mut verdict = OcclusionVerdict {
                point3d_id: point.point3d_id,
                image_id: *image_id,
                status: OcclusionStatus::Valid,
                blocking_plane: None,
                d: None,
            };
            for (plane_idx, plane) in planes.iter().enumerate() {
                if !plane.opaque || plane.support.contains(&point.point3d_id) {
                    continue;
                }
                let Some(d) = ray_plane_intersection(&c, &dir, plane) else {
                    continue;
                };
                if d <= depth_margin || d >= dist - depth_margin {
                    continue;
                }
                let hit = c + dir * d;
                let extra = opts.extent_margin.unwrap_or(0.02 * plane.diameter());
                if plane.in_extent(&hit, extra) {
                    verdict.status = OcclusionStatus::Occluded;
                    verdict.blocking_plane = Some(plane_idx);
                    verdict.d = Some(d);
                    break;
                }
            }
            Ok(verdict)
        })
        .collect();
    let verdicts = verdicts.into_iter().collect::<Result<Vec<_>, _>>()?;

    // Point-level aggregation.
    let mut occluded_per_point: BTreeMap<Point3dId, (u64, u64)> = BTreeMap::new();
    for v in &verdicts {
        let entry = occluded_per_point.entry(v.point3d_id).or_insert((0, 0));
        entry.1 += 1;
        if v.status == OcclusionStatus::Occluded {
            entry.0 += 1;
        }
    }
    let mut erroneous_points = 0u64;
    let mut erroneous_observations = 0u64;
    for (occluded, total) in occluded_per_point.values() {
        if *total > 0 && (*occluded as f64 / *total as f64) >= opts.aggregation_threshold {
            erroneous_points += 1;
            erroneous_observations += total;
        }
    }
    let points_before = model.points.len() as u64;
    let obs_before = model.observation_count();
    let report = FilterReport {
        points_before,
        points_after: points_before - erroneous_points,
        violation_points: erroneous_points,
        observations_before: obs_before,
        observations_after: obs_before - erroneous_observations,
        observations_removed: erroneous_observations,
        mean_track_length_before: (points_before > 0)
            .then(|| obs_before as f64 / points_before as f64),
        mean_track_length_after: (points_before > erroneous_points).then(|| {
            (obs_before - erroneous_observations) as f64
                / (points_before - erroneous_points) as f64
        }),
    };
    Ok((verdicts, report))
}

/// Writes planes as one line each:
/// `nx ny nz px py pz class_id opaque extent_u extent_v margin`.
pub fn write_plane_file(planes: &[LabeledPlane], path: &Path) -> Result<(), PlaneError> {
    let io_err = |source: std::io::Error| PlaneError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(w, "# nx ny nz px py pz class_id opaque extent_u extent_v margin").map_err(io_err)?;
    for p in planes {
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {} {}",
            p.normal.x,
            p.normal.y,
            p.normal.z,
            p.p0.x,
            p.p0.y,
            p.p0.z,
            p.class_id,
            u8::from(p.opaque),
            p.extent.half_u,
            p.extent.half_v,
            p.extent.margin
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a plane file written by [`write_plane_file`] (or by an external
/// plane source following the same format). The in-plane basis is
/// re-derived from the normal; support sets are empty.
pub fn load_plane_file(path: &Path) -> Result<Vec<LabeledPlane>, PlaneError> {
    let file = std::fs::File::open(path).map_err(|e| PlaneError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut planes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PlaneError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| PlaneError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<f64> = trimmed
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(format!("invalid number: {e}")))?;
        let [nx, ny, nz, px, py, pz, class_id, opaque, half_u, half_v, margin] = fields[..] else {
            return Err(parse_err(format!("expected 11 fields, got {}", fields.len())));
        };
        let normal = Vector3::new(nx, ny, nz);
        let norm = normal.norm();
        if norm < 1e-12 {
            return Err(parse_err("zero normal".to_string()));
        }
        let normal = normal / norm;
        let (u_axis, v_axis) = basis_from_normal(&normal);
        planes.push(LabeledPlane {
            normal,
            p0: Vector3::new(px, py, pz),
            class_id: class_id as u8,
            opaque: opaque != 0.0,
            extent: PlaneExtent {
                u_axis,
                v_axis,
                half_u,
                half_v,
                margin,
            },
            support: BTreeSet::new(),
        });
    }
    Ok(planes)
}

/// Uniformly samples points on a rectangle in the plane `normal ⟂`,
/// jittered by `noise` along the normal (fixture helper).
pub fn sample_planar_points(
    normal: Vector3<f64>,
    p0: Vector3<f64>,
    half_u: f64,
    half_v: f64,
    n: usize,
    noise: f64,
    seed: u64,
) -> Vec<Vector3<f64>> {
    let normal = normal.normalize();
    let (u_axis, v_axis) = basis_from_normal(&normal);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            p0 + u_axis * rng.random_range(-half_u..half_u)
                + v_axis * rng.random_range(-half_v..half_v)
                + normal * if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 }
        })
        .collect()
}
