//! COLMAP sparse-model types and file I/O.
//!
//! A sparse reconstruction consists of three files (`cameras`, `images`,
//! `points3D`) in either the text or the binary encoding, plus an SQLite
//! database holding feature matches. This module parses and serializes the
//! model files and reads per-pair match counts from the database.
//!
//! Format reference: <https://colmap.github.io/format.html>

mod binary;
mod database;
mod text;

pub use database::{load_match_matrix, MatchSource};

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

pub type CameraId = u32;
pub type ImageId = u32;
pub type Point3dId = u64;

/// Largest image id representable in a database pair key.
pub const MAX_PAIR_IMAGE_ID: u32 = 2_147_483_646;

const PAIR_ID_BASE: i64 = 2_147_483_647;

/// Errors produced while loading or writing model files and databases.
#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing model file: {0}")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: malformed record at byte offset {offset}: {message}")]
    Binary {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("unknown camera model {0:?}")]
    UnknownCameraModel(String),

    #[error("camera {camera_id}: {message}")]
    InvalidCamera { camera_id: CameraId, message: String },

    #[error("image {image_id}: {message}")]
    InvalidImage { image_id: ImageId, message: String },

    #[error("point {point3d_id}: {message}")]
    InvalidPoint { point3d_id: Point3dId, message: String },

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("image id {0} out of range for pair key (max {MAX_PAIR_IMAGE_ID})")]
    PairIdOutOfRange(u32),

    #[error("invalid pair id {0}")]
    InvalidPairId(i64),

    #[error("database {path}: {message}")]
    Database { path: PathBuf, message: String },
}

impl ModelIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ModelIoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Camera models supported by the parser.
///
/// The parameter layout follows the COLMAP conventions:
/// `SIMPLE_PINHOLE = f, cx, cy`; `PINHOLE = fx, fy, cx, cy`;
/// `SIMPLE_RADIAL = f, cx, cy, k`; `RADIAL = f, cx, cy, k1, k2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CameraModelKind {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
    Radial,
}

impl CameraModelKind {
    pub fn param_count(self) -> usize {
        match self {
            CameraModelKind::SimplePinhole => 3,
            CameraModelKind::Pinhole => 4,
            CameraModelKind::SimpleRadial => 4,
            CameraModelKind::Radial => 5,
        }
    }

    /// Numeric model id used by the binary encoding.
    pub fn model_id(self) -> i32 {
        match self {
            CameraModelKind::SimplePinhole => 0,
            CameraModelKind::Pinhole => 1,
            CameraModelKind::SimpleRadial => 2,
            CameraModelKind::Radial => 3,
        }
    }

    pub fn from_model_id(id: i32) -> Option<Self> {
        match id {
            0 => Some(CameraModelKind::SimplePinhole),
            1 => Some(CameraModelKind::Pinhole),
            2 => Some(CameraModelKind::SimpleRadial),
            3 => Some(CameraModelKind::Radial),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModelKind::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModelKind::Pinhole => "PINHOLE",
            CameraModelKind::SimpleRadial => "SIMPLE_RADIAL",
            CameraModelKind::Radial => "RADIAL",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "SIMPLE_PINHOLE" => Some(CameraModelKind::SimplePinhole),
            "PINHOLE" => Some(CameraModelKind::Pinhole),
            "SIMPLE_RADIAL" => Some(CameraModelKind::SimpleRadial),
            "RADIAL" => Some(CameraModelKind::Radial),
            _ => None,
        }
    }
}

impl fmt::Display for CameraModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Intrinsic parameters of one physical camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub camera_id: CameraId,
    pub model: CameraModelKind,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl CameraIntrinsics {
    pub fn new(
        camera_id: CameraId,
        model: CameraModelKind,
        width: u64,
        height: u64,
        params: Vec<f64>,
    ) -> Result<Self, ModelIoError> {
        let cam = CameraIntrinsics {
            camera_id,
            model,
            width,
            height,
            params,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), ModelIoError> {
        let invalid = |message: String| ModelIoError::InvalidCamera {
            camera_id: self.camera_id,
            message,
        };
        if self.params.len() != self.model.param_count() {
            return Err(invalid(format!(
                "model {} expects {} params, got {}",
                self.model,
                self.model.param_count(),
                self.params.len()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid(format!(
                "non-positive size {}x{}",
                self.width, self.height
            )));
        }
        let (fx, fy) = self.focal();
        if !(fx > 0.0 && fy > 0.0) {
            return Err(invalid(format!("non-positive focal length ({fx}, {fy})")));
        }
        Ok(())
    }

    /// Focal lengths `(fx, fy)`; equal for single-focal models.
    pub fn focal(&self) -> (f64, f64) {
        match self.model {
            CameraModelKind::Pinhole => (self.params[0], self.params[1]),
            _ => (self.params[0], self.params[0]),
        }
    }

    pub fn principal_point(&self) -> (f64, f64) {
        match self.model {
            CameraModelKind::Pinhole => (self.params[2], self.params[3]),
            _ => (self.params[1], self.params[2]),
        }
    }

    /// Radial distortion coefficients `(k1, k2)`; zero where the model has none.
    pub fn radial(&self) -> (f64, f64) {
        match self.model {
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => (0.0, 0.0),
            CameraModelKind::SimpleRadial => (self.params[3], 0.0),
            CameraModelKind::Radial => (self.params[3], self.params[4]),
        }
    }

    /// Upper-triangular calibration matrix of the pinhole part.
    pub fn k_matrix(&self) -> nalgebra::Matrix3<f64> {
        let (fx, fy) = self.focal();
        let (cx, cy) = self.principal_point();
        nalgebra::Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
    }
}

/// One keypoint of an image, optionally linked to a 3D point.
#[derive(Debug, Clone, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
    pub point3d_id: Option<Point3dId>,
}

/// A registered image: pose (world-to-camera), camera link and keypoints.
///
/// `qvec` is a Hamilton-convention quaternion `(w, x, y, z)`, normalized on
/// load.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub qvec: [f64; 4],
    pub tvec: Vector3<f64>,
    pub camera_id: CameraId,
    pub name: String,
    pub points2d: Vec<Point2D>,
}

impl ImageRecord {
    /// Normalizes `qvec`, warning when the stored value had drifted.
    fn normalize_qvec(&mut self) -> Result<(), ModelIoError> {
        let norm = (self.qvec.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(ModelIoError::InvalidImage {
                image_id: self.image_id,
                message: format!("quaternion with invalid norm {norm}"),
            });
        }
        if (norm - 1.0).abs() > 1e-6 {
            log::warn!(
                "image {} ({}): quaternion norm drifted to {norm:.9}, renormalizing",
                self.image_id,
                self.name
            );
        }
        for v in &mut self.qvec {
            *v /= norm;
        }
        Ok(())
    }
}

/// Track element: which keypoint of which image observes a 3D point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrackElement {
    pub image_id: ImageId,
    pub point2d_idx: u32,
}

/// A triangulated point with color, reprojection error and its track.
#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub point3d_id: Point3dId,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackElement>,
}

/// An in-memory sparse reconstruction.
///
/// Maps are ordered so that iteration (and therefore serialization) is
/// deterministic. A loaded model is immutable and safe to share across
/// threads.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseModel {
    pub cameras: BTreeMap<CameraId, CameraIntrinsics>,
    pub images: BTreeMap<ImageId, ImageRecord>,
    pub points: BTreeMap<Point3dId, Point3D>,
}

impl SparseModel {
    pub fn empty() -> Self {
        SparseModel::default()
    }

    /// Number of 2D observations that belong to a track.
    pub fn observation_count(&self) -> u64 {
        self.points.values().map(|p| p.track.len() as u64).sum()
    }

    /// Verifies referential integrity in both directions: every 2D→3D link
    /// has a matching track element and vice versa.
    pub fn check_integrity(&self) -> Result<(), ModelIoError> {
        for image in self.images.values() {
            if !self.cameras.contains_key(&image.camera_id) {
                return Err(ModelIoError::DanglingReference(format!(
                    "image {} references missing camera {}",
                    image.image_id, image.camera_id
                )));
            }
            let norm = image.qvec.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(ModelIoError::InvalidImage {
                    image_id: image.image_id,
                    message: format!("quaternion norm {norm} not unit"),
                });
            }
            for (idx, p2d) in image.points2d.iter().enumerate() {
                let Some(pid) = p2d.point3d_id else { continue };
                let Some(point) = self.points.get(&pid) else {
                    return Err(ModelIoError::DanglingReference(format!(
                        "image {} keypoint {} references missing point {}",
                        image.image_id, idx, pid
                    )));
                };
                let hits = point
                    .track
                    .iter()
                    .filter(|t| t.image_id == image.image_id && t.point2d_idx == idx as u32)
                    .count();
                if hits != 1 {
                    return Err(ModelIoError::DanglingReference(format!(
                        "image {} keypoint {} appears {} times in track of point {}",
                        image.image_id, idx, hits, pid
                    )));
                }
            }
        }
        for point in self.points.values() {
            if point.track.is_empty() {
                return Err(ModelIoError::InvalidPoint {
                    point3d_id: point.point3d_id,
                    message: "empty track".to_string(),
                });
            }
            for el in &point.track {
                let Some(image) = self.images.get(&el.image_id) else {
                    return Err(ModelIoError::DanglingReference(format!(
                        "point {} track references missing image {}",
                        point.point3d_id, el.image_id
                    )));
                };
                let Some(p2d) = image.points2d.get(el.point2d_idx as usize) else {
                    return Err(ModelIoError::DanglingReference(format!(
                        "point {} track references out-of-range keypoint {} of image {}",
                        point.point3d_id, el.point2d_idx, el.image_id
                    )));
                };
                if p2d.point3d_id != Some(point.point3d_id) {
                    return Err(ModelIoError::DanglingReference(format!(
                        "point {} track element ({}, {}) does not link back (keypoint links {:?})",
                        point.point3d_id, el.image_id, el.point2d_idx, p2d.point3d_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Normalizes quaternions and validates the whole model after a load.
    fn finalize(mut self) -> Result<Self, ModelIoError> {
        for image in self.images.values_mut() {
            image.normalize_qvec()?;
        }
        for cam in self.cameras.values() {
            cam.validate()?;
        }
        self.check_integrity()?;
        Ok(self)
    }
}

/// Encoding of a model directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Text,
    Binary,
    /// Binary when `cameras.bin` exists, text otherwise.
    Auto,
}

/// Loads `cameras`, `images` and `points3D` from `dir`.
///
/// Quaternions are renormalized, and the returned model is referentially
/// intact; any dangling track reference is rejected with the offending
/// file and record.
pub fn load_model(dir: &Path, format: Format) -> Result<SparseModel, ModelIoError> {
    let format = match format {
        Format::Auto => {
            if dir.join("cameras.bin").exists() {
                Format::Binary
            } else if dir.join("cameras.txt").exists() {
                Format::Text
            } else {
                return Err(ModelIoError::MissingFile(dir.join("cameras.{bin,txt}")));
            }
        }
        f => f,
    };
    let model = match format {
        Format::Text => text::read_model(dir)?,
        Format::Binary => binary::read_model(dir)?,
        Format::Auto => unreachable!(),
    };
    model.finalize()
}

/// Writes the model as `cameras.txt` / `images.txt` / `points3D.txt`.
pub fn write_model_text(model: &SparseModel, dir: &Path) -> Result<(), ModelIoError> {
    model.check_integrity()?;
    text::write_model(model, dir)
}

/// Writes the model as `cameras.bin` / `images.bin` / `points3D.bin`.
pub fn write_model_binary(model: &SparseModel, dir: &Path) -> Result<(), ModelIoError> {
    model.check_integrity()?;
    binary::write_model(model, dir)
}

/// Database key for an image pair: `min(a,b) * 2147483647 + max(a,b)`.
pub fn pair_id(image_id1: ImageId, image_id2: ImageId) -> Result<i64, ModelIoError> {
    for id in [image_id1, image_id2] {
        if id > MAX_PAIR_IMAGE_ID {
            return Err(ModelIoError::PairIdOutOfRange(id));
        }
    }
    let (a, b) = if image_id1 <= image_id2 {
        (image_id1, image_id2)
    } else {
        (image_id2, image_id1)
    };
    Ok(a as i64 * PAIR_ID_BASE + b as i64)
}

/// Inverse of [`pair_id`]; returns `(min, max)`.
pub fn inverse_pair_id(pair_id: i64) -> Result<(ImageId, ImageId), ModelIoError> {
    if pair_id < 0 {
        return Err(ModelIoError::InvalidPairId(pair_id));
    }
    let a = pair_id / PAIR_ID_BASE;
    let b = pair_id % PAIR_ID_BASE;
    if a > MAX_PAIR_IMAGE_ID as i64 || b > MAX_PAIR_IMAGE_ID as i64 {
        return Err(ModelIoError::InvalidPairId(pair_id));
    }
    Ok((a as ImageId, b as ImageId))
}

/// Symmetric image-by-image matrix of feature-match counts.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix {
    image_ids: Vec<ImageId>,
    counts: Vec<u64>,
}

impl MatchMatrix {
    /// Builds a zero matrix over the given (deduplicated, sorted) image ids.
    pub fn zeros(mut image_ids: Vec<ImageId>) -> Self {
        image_ids.sort_unstable();
        image_ids.dedup();
        let n = image_ids.len();
        MatchMatrix {
            image_ids,
            counts: vec![0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn image_ids(&self) -> &[ImageId] {
        &self.image_ids
    }

    /// Entry by matrix position.
    pub fn at(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.image_ids.len() + col]
    }

    /// Entry by image ids; `None` when either id is not in the matrix.
    pub fn get(&self, id1: ImageId, id2: ImageId) -> Option<u64> {
        let r = self.image_ids.binary_search(&id1).ok()?;
        let c = self.image_ids.binary_search(&id2).ok()?;
        Some(self.at(r, c))
    }

    /// Sets the symmetric pair `(id1, id2)`; the diagonal stays zero.
    pub fn set(&mut self, id1: ImageId, id2: ImageId, count: u64) -> Result<(), ModelIoError> {
        if id1 == id2 {
            return Ok(());
        }
        let n = self.image_ids.len();
        let r = self
            .image_ids
            .binary_search(&id1)
            .map_err(|_| ModelIoError::DanglingReference(format!("image id {id1} not in matrix")))?;
        let c = self
            .image_ids
            .binary_search(&id2)
            .map_err(|_| ModelIoError::DanglingReference(format!("image id {id2} not in matrix")))?;
        self.counts[r * n + c] = count;
        self.counts[c * n + r] = count;
        Ok(())
    }

    /// Writes the matrix as CSV with image ids as row and column headers.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "image_id")?;
        for id in &self.image_ids {
            write!(w, ",{id}")?;
        }
        writeln!(w)?;
        for (r, id) in self.image_ids.iter().enumerate() {
            write!(w, "{id}")?;
            for c in 0..self.image_ids.len() {
                write!(w, ",{}", self.at(r, c))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Formats a float for the text model files: 12 significant digits, at
/// least 9 decimal places, trailing zeros trimmed. Keeps round-trips
/// within 1e-9 of the source value.
pub(crate) fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (11 - exp).max(9) as usize;
    let mut s = format!("{:.*}", decimals, x);
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0');
        let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
        s.truncate(trimmed.len());
    }
    s
}
