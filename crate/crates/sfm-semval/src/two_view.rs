//! Two-view epipolar geometry.
//!
//! Normalized 8-point estimation of the fundamental matrix, a seeded RANSAC
//! wrapper around it, the calibrated essential matrix, linear triangulation,
//! and chirality-based selection among the four pose decompositions.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3};
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{camera_center, GeometryError, Pose, Rotation};
use crate::model_io::CameraIntrinsics;

#[derive(Debug, Error)]
pub enum TwoViewError {
    #[error("need at least {need} correspondences, got {got}")]
    TooFewCorrespondences { got: usize, need: usize },

    #[error("correspondence {index} has non-finite coordinates")]
    NonFiniteCoordinate { index: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("parameter {name} out of range: {value}")]
    InvalidParameter { name: &'static str, value: f64 },

    #[error("no model with at least 8 inliers found in {trials} trials")]
    NoConsensus { trials: u64 },

    #[error("intrinsic matrix is singular")]
    SingularIntrinsics,

    #[error("camera centres coincide")]
    IdenticalCentres,

    #[error("viewing rays are parallel")]
    ParallelRays,

    #[error("no pose candidate places any point in front of both cameras")]
    NoPoseInFront,

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A pair of matched pixel observations (image 1, image 2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub x1: Vector2<f64>,
    pub x2: Vector2<f64>,
}

/// Rank-2 fundamental matrix, scaled to unit Frobenius norm with the
/// largest-magnitude entry positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Enforces rank 2 (smallest singular value zeroed) and normalizes.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, TwoViewError> {
        let svd = m.svd(true, true);
        let u = svd.u.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
        let mut s = svd.singular_values;
        if s[0] <= 0.0 {
            return Err(TwoViewError::Degenerate("zero matrix".into()));
        }
        s[2] = 0.0;
        let rank2 = u * Matrix3::from_diagonal(&s) * v_t;
        Ok(FundamentalMatrix(canonicalize(rank2)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Algebraic epipolar residual `|x2ᵀ F x1|` (F has unit Frobenius norm).
    pub fn algebraic_residual(&self, c: &Correspondence) -> f64 {
        let x1 = Vector3::new(c.x1.x, c.x1.y, 1.0);
        let x2 = Vector3::new(c.x2.x, c.x2.y, 1.0);
        (x2.transpose() * self.0 * x1)[0].abs()
    }

    /// First-order geometric (Sampson) distance in pixels.
    pub fn sampson_distance(&self, c: &Correspondence) -> f64 {
        let x1 = Vector3::new(c.x1.x, c.x1.y, 1.0);
        let x2 = Vector3::new(c.x2.x, c.x2.y, 1.0);
        let fx1 = self.0 * x1;
        let ftx2 = self.0.transpose() * x2;
        let num = (x2.transpose() * self.0 * x1)[0];
        let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
        (num * num / den.max(1e-300)).sqrt()
    }
}

/// Essential matrix projected onto the manifold of two equal singular
/// values and one zero, unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(Matrix3<f64>);

impl EssentialMatrix {
    /// Projects onto the essential manifold: singular values `(s, s, 0)`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, TwoViewError> {
        let svd = m.svd(true, true);
        let u = svd.u.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
        let v_t = svd.v_t.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
        let s = svd.singular_values;
        let mean = (s[0] + s[1]) / 2.0;
        if mean <= 0.0 {
            return Err(TwoViewError::Degenerate("zero matrix".into()));
        }
        let proj = u * Matrix3::from_diagonal(&Vector3::new(mean, mean, 0.0)) * v_t;
        Ok(EssentialMatrix(canonicalize(proj)))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Unit Frobenius norm, largest-|entry| made positive.
fn canonicalize(m: Matrix3<f64>) -> Matrix3<f64> {
    let mut out = m / m.norm();
    let mut max = 0.0f64;
    let mut sign = 1.0;
    for v in out.iter() {
        if v.abs() > max {
            max = v.abs();
            sign = v.signum();
        }
    }
    if sign < 0.0 {
        out = -out;
    }
    out
}

fn check_finite(corr: &[Correspondence]) -> Result<(), TwoViewError> {
    for (index, c) in corr.iter().enumerate() {
        if !(c.x1.x.is_finite() && c.x1.y.is_finite() && c.x2.x.is_finite() && c.x2.y.is_finite()) {
            return Err(TwoViewError::NonFiniteCoordinate { index });
        }
    }
    Ok(())
}

/// Similarity transform bringing the centroid to the origin and the RMS
/// distance to √2 (Hartley normalization).
fn normalizing_transform(points: impl Iterator<Item = Vector2<f64>> + Clone) -> Result<Matrix3<f64>, TwoViewError> {
    let mut centroid = Vector2::zeros();
    let mut n = 0usize;
    for p in points.clone() {
        centroid += p;
        n += 1;
    }
    let centroid = centroid / n as f64;
    let rms = (points.map(|p| (p - centroid).norm_squared()).sum::<f64>() / n as f64).sqrt();
    if rms < 1e-12 {
        return Err(TwoViewError::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / rms;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

/// Damped Gauss-Newton refinement of the null vector: minimizes ‖A f‖ for
/// the unit 9-vector f. The eigensolver's estimate leaves a residual of
/// order ε·σ₁/σ₈ that the later Frobenius normalization of F amplifies;
/// a few refinement steps push ‖A f‖ down to the evaluation floor.
fn polish_null_vector(a: &DMatrix<f64>, f: [f64; 9]) -> [f64; 9] {
    let ata = a.transpose() * a;
    let shift = 1e-12 * ata.trace();
    let mut damped = ata;
    for i in 0..9 {
        damped[(i, i)] += shift;
    }
    let lu = damped.lu();
    let mut best = nalgebra::DVector::from_row_slice(&f);
    let mut best_residual = (a * &best).norm();
    let mut current = best.clone();
    for _ in 0..3 {
        let gradient = a.transpose() * (a * &current);
        let Some(delta) = lu.solve(&gradient) else { break };
        current -= delta;
        let norm = current.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        current /= norm;
        let residual = (a * &current).norm();
        if residual < best_residual {
            best_residual = residual;
            best.copy_from(&current);
        }
    }
    std::array::from_fn(|i| best[i])
}

/// Least-squares fundamental matrix from ≥8 correspondences via the
/// normalized 8-point algorithm, with the rank-2 constraint enforced.
pub fn eight_point(corr: &[Correspondence]) -> Result<FundamentalMatrix, TwoViewError> {
    if corr.len() < 8 {
        return Err(TwoViewError::TooFewCorrespondences {
            got: corr.len(),
            need: 8,
        });
    }
    check_finite(corr)?;
    let t1 = normalizing_transform(corr.iter().map(|c| c.x1))?;
    let t2 = normalizing_transform(corr.iter().map(|c| c.x2))?;
    let apply = |t: &Matrix3<f64>, p: Vector2<f64>| {
        Vector2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
    };

    let mut a = DMatrix::<f64>::zeros(corr.len(), 9);
    for (i, c) in corr.iter().enumerate() {
        let p1 = apply(&t1, c.x1);
        let p2 = apply(&t2, c.x2);
        a[(i, 0)] = p2.x * p1.x;
        a[(i, 1)] = p2.x * p1.y;
        a[(i, 2)] = p2.x;
        a[(i, 3)] = p2.y * p1.x;
        a[(i, 4)] = p2.y * p1.y;
        a[(i, 5)] = p2.y;
        a[(i, 6)] = p1.x;
        a[(i, 7)] = p1.y;
        a[(i, 8)] = 1.0;
    }
    // Solve A f = 0. With nine or more rows the SVD of A exposes all nine
    // right singular vectors; for the minimal eight-row sample the thin
    // SVD lacks the null direction, so fall back to the eigendecomposition
    // of AᵀA. Either way, a vanishing second-smallest spectral value means
    // the points do not constrain F (coincident, collinear or otherwise
    // rank-deficient design).
    let (f_vec, rank_ratio): ([f64; 9], f64) = if corr.len() >= 9 {
        let svd = a.clone().svd(false, true);
        let v_t = svd.v_t.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
        let s = &svd.singular_values;
        let row = v_t.row(8);
        (
            std::array::from_fn(|i| row[i]),
            s[7] / s[0].max(f64::MIN_POSITIVE),
        )
    } else {
        let ata = a.transpose() * &a;
        let eig = ata.symmetric_eigen();
        let mut order: Vec<usize> = (0..9).collect();
        order.sort_by(|&i, &j| {
            eig.eigenvalues[i]
                .partial_cmp(&eig.eigenvalues[j])
                .expect("eigenvalues of a Gram matrix are finite")
        });
        let col = eig.eigenvectors.column(order[0]);
        let largest = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
        (
            std::array::from_fn(|i| col[i]),
            (eig.eigenvalues[order[1]].max(0.0) / largest).sqrt(),
        )
    };
    if rank_ratio < 1e-10 {
        return Err(TwoViewError::Degenerate(format!(
            "rank-deficient design matrix (σ8/σ1 = {rank_ratio:.3e})"
        )));
    }
    let f_vec = polish_null_vector(&a, f_vec);
    let f_norm = Matrix3::new(
        f_vec[0], f_vec[1], f_vec[2], f_vec[3], f_vec[4], f_vec[5], f_vec[6], f_vec[7], f_vec[8],
    );
    FundamentalMatrix::from_matrix(t2.transpose() * f_norm * t1)
}

/// How RANSAC scores a correspondence against a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualKind {
    /// The algebraic test `|x2ᵀ F x1| ≤ ε` on the unit-norm F.
    #[default]
    Algebraic,
    /// Sampson distance in pixels.
    Sampson,
}

#[derive(Debug, Clone)]
pub struct RansacOptions {
    /// Inlier threshold ε (units depend on `residual`).
    pub eps: f64,
    pub trials: u64,
    pub seed: u64,
    pub residual: ResidualKind,
    /// Refit the model on the final inlier set (and re-derive the set).
    pub refit: bool,
}

impl Default for RansacOptions {
    fn default() -> Self {
        RansacOptions {
            eps: 1e-3,
            trials: 256,
            seed: 0,
            residual: ResidualKind::Algebraic,
            refit: true,
        }
    }
}

fn residual(kind: ResidualKind, f: &FundamentalMatrix, c: &Correspondence) -> f64 {
    match kind {
        ResidualKind::Algebraic => f.algebraic_residual(c),
        ResidualKind::Sampson => f.sampson_distance(c),
    }
}

/// Robust fundamental-matrix estimation.
///
/// Deterministic for a fixed seed: the best model is the one with the most
/// inliers, ties going to the earlier trial. Returns the refit matrix and
/// the indices of its inliers.
pub fn ransac_fundamental(
    corr: &[Correspondence],
    opts: &RansacOptions,
) -> Result<(FundamentalMatrix, Vec<usize>), TwoViewError> {
    if corr.len() < 8 {
        return Err(TwoViewError::TooFewCorrespondences {
            got: corr.len(),
            need: 8,
        });
    }
    if !(opts.eps > 0.0) {
        return Err(TwoViewError::InvalidParameter {
            name: "eps",
            value: opts.eps,
        });
    }
    if opts.trials == 0 {
        return Err(TwoViewError::InvalidParameter {
            name: "trials",
            value: 0.0,
        });
    }
    check_finite(corr)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(usize, FundamentalMatrix)> = None;
    for _ in 0..opts.trials {
        let picks = sample(&mut rng, corr.len(), 8);
        let minimal: Vec<Correspondence> = picks.iter().map(|i| corr[i]).collect();
        let Ok(f) = eight_point(&minimal) else { continue };
        let count = corr.iter().filter(|c| residual(opts.residual, &f, c) <= opts.eps).count();
        if best.as_ref().is_none_or(|(best_count, _)| count > *best_count) {
            best = Some((count, f));
        }
    }
    let Some((count, mut f)) = best else {
        return Err(TwoViewError::NoConsensus { trials: opts.trials });
    };
    if count < 8 {
        return Err(TwoViewError::NoConsensus { trials: opts.trials });
    }
    let mut inliers: Vec<usize> = (0..corr.len())
        .filter(|&i| residual(opts.residual, &f, &corr[i]) <= opts.eps)
        .collect();
    if opts.refit {
        let subset: Vec<Correspondence> = inliers.iter().map(|&i| corr[i]).collect();
        if let Ok(refit) = eight_point(&subset) {
            f = refit;
            inliers = (0..corr.len())
                .filter(|&i| residual(opts.residual, &f, &corr[i]) <= opts.eps)
                .collect();
        }
    }
    Ok((f, inliers))
}

/// Number of RANSAC trials needed to sample an all-inlier minimal set with
/// probability `z`, given inlier ratio `w` and sample size `n`:
/// `k = ⌈log(1−z) / log(1−wⁿ)⌉`.
pub fn ransac_trials(z: f64, w: f64, n: u32) -> Result<u64, TwoViewError> {
    if !(z > 0.0 && z < 1.0) {
        return Err(TwoViewError::InvalidParameter { name: "z", value: z });
    }
    if !(w > 0.0 && w <= 1.0) {
        return Err(TwoViewError::InvalidParameter { name: "w", value: w });
    }
    if n == 0 {
        return Err(TwoViewError::InvalidParameter { name: "n", value: 0.0 });
    }
    if w == 1.0 {
        return Ok(1);
    }
    let denom = (-w.powi(n as i32)).ln_1p();
    if denom == 0.0 {
        return Ok(u64::MAX);
    }
    let k = ((1.0 - z).ln() / denom).ceil();
    if !k.is_finite() || k >= u64::MAX as f64 {
        return Ok(u64::MAX);
    }
    Ok((k as u64).max(1))
}

/// Essential matrix from the fundamental matrix and the two calibration
/// matrices: `E = K2ᵀ F K1`, projected onto the essential manifold.
pub fn essential_from_fundamental(
    f: &FundamentalMatrix,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
) -> Result<EssentialMatrix, TwoViewError> {
    for k in [k1, k2] {
        if k.determinant().abs() < 1e-12 {
            return Err(TwoViewError::SingularIntrinsics);
        }
    }
    EssentialMatrix::from_matrix(k2.transpose() * f.matrix() * k1)
}

fn projection_matrix(pose: &Pose, k: &Matrix3<f64>) -> Matrix3x4<f64> {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation.matrix());
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
    k * rt
}

fn triangulate_projective(
    p1: &Matrix3x4<f64>,
    p2: &Matrix3x4<f64>,
    x1: Vector2<f64>,
    x2: Vector2<f64>,
) -> Result<Vector3<f64>, TwoViewError> {
    let mut a = Matrix4::zeros();
    a.row_mut(0).copy_from(&(x1.x * p1.row(2) - p1.row(0)));
    a.row_mut(1).copy_from(&(x1.y * p1.row(2) - p1.row(1)));
    a.row_mut(2).copy_from(&(x2.x * p2.row(2) - p2.row(0)));
    a.row_mut(3).copy_from(&(x2.y * p2.row(2) - p2.row(1)));
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
    let h = v_t.row(3);
    let w = h[3];
    let scale = h.norm();
    if w.abs() < 1e-14 * scale {
        return Err(TwoViewError::ParallelRays);
    }
    Ok(Vector3::new(h[0] / w, h[1] / w, h[2] / w))
}

/// Linear (DLT) triangulation of one correspondence.
///
/// Uses the pinhole part of the intrinsics; radial coefficients are ignored,
/// so callers with distorted models should undistort observations upstream.
pub fn triangulate(
    pose1: &Pose,
    pose2: &Pose,
    cam1: &CameraIntrinsics,
    cam2: &CameraIntrinsics,
    x1: Vector2<f64>,
    x2: Vector2<f64>,
) -> Result<Vector3<f64>, TwoViewError> {
    let c1 = camera_center(pose1);
    let c2 = camera_center(pose2);
    if (c1 - c2).norm() < 1e-12 {
        return Err(TwoViewError::IdenticalCentres);
    }
    let k1 = cam1.k_matrix();
    let k2 = cam2.k_matrix();
    let k1_inv = k1.try_inverse().ok_or(TwoViewError::SingularIntrinsics)?;
    let k2_inv = k2.try_inverse().ok_or(TwoViewError::SingularIntrinsics)?;
    let ray = |pose: &Pose, k_inv: &Matrix3<f64>, x: Vector2<f64>| {
        pose.rotation
            .apply_inverse(&(k_inv * Vector3::new(x.x, x.y, 1.0)))
            .normalize()
    };
    let r1 = ray(pose1, &k1_inv, x1);
    let r2 = ray(pose2, &k2_inv, x2);
    if r1.cross(&r2).norm() <= 1e-12 {
        return Err(TwoViewError::ParallelRays);
    }
    triangulate_projective(&projection_matrix(pose1, &k1), &projection_matrix(pose2, &k2), x1, x2)
}

/// The four `(R, t)` decompositions of an essential matrix.
pub fn decompose_essential(e: &EssentialMatrix) -> Result<[(Rotation, Vector3<f64>); 4], TwoViewError> {
    let svd = e.matrix().svd(true, true);
    let mut u = svd.u.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
    let mut v_t = svd.v_t.ok_or_else(|| TwoViewError::Degenerate("svd failed".into()))?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let ra = Rotation::from_matrix(u * w * v_t).map_err(TwoViewError::Geometry)?;
    let rb = Rotation::from_matrix(u * w.transpose() * v_t).map_err(TwoViewError::Geometry)?;
    let t: Vector3<f64> = u.column(2).into();
    Ok([(ra, t), (ra, -t), (rb, t), (rb, -t)])
}

/// Picks the pose of camera 2 relative to camera 1 among the four
/// decompositions of `e` by maximizing the number of correspondences that
/// triangulate in front of both cameras (the chirality condition
/// `r₃(X − C) > 0` for each view). The translation has unit norm; its
/// scale is unobservable.
pub fn select_pose_chirality(
    e: &EssentialMatrix,
    corr: &[Correspondence],
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
) -> Result<Pose, TwoViewError> {
    if corr.is_empty() {
        return Err(TwoViewError::TooFewCorrespondences { got: 0, need: 1 });
    }
    let k1_inv = k1.try_inverse().ok_or(TwoViewError::SingularIntrinsics)?;
    let k2_inv = k2.try_inverse().ok_or(TwoViewError::SingularIntrinsics)?;
    let normalize = |k_inv: &Matrix3<f64>, x: Vector2<f64>| {
        let v = k_inv * Vector3::new(x.x, x.y, 1.0);
        Vector2::new(v.x / v.z, v.y / v.z)
    };
    let identity = Matrix3x4::new(
        1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0,
    );

    let mut best: Option<(usize, Pose)> = None;
    for (r, t) in decompose_essential(e)? {
        let pose2 = Pose::new(r, t);
        let p2 = {
            let mut rt = Matrix3x4::zeros();
            rt.fixed_view_mut::<3, 3>(0, 0).copy_from(pose2.rotation.matrix());
            rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose2.translation);
            rt
        };
        let mut count = 0usize;
        for c in corr {
            let n1 = normalize(&k1_inv, c.x1);
            let n2 = normalize(&k2_inv, c.x2);
            let Ok(x) = triangulate_projective(&identity, &p2, n1, n2) else {
                continue;
            };
            let z1 = x.z;
            let z2 = pose2.transform(&x).z;
            if z1 > 0.0 && z2 > 0.0 {
                count += 1;
            }
        }
        if best.as_ref().is_none_or(|(best_count, _)| count > *best_count) {
            best = Some((count, pose2));
        }
    }
    match best {
        Some((count, pose)) if count > 0 => Ok(pose),
        _ => Err(TwoViewError::NoPoseInFront),
    }
}
