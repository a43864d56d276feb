//! Semantic classes, per-image label rasters, and label fusion.
//!
//! Label maps are 8-bit single-channel rasters whose pixel value is the
//! class id (PGM `P5` or grayscale PNG; colorized segmentations go through
//! an RGB→id palette). The class registry carries the two priors the
//! validation stages rely on: whether a class is opaque and whether it is
//! associated with motion.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::model_io::{ImageId, ModelIoError, Point3dId, SparseModel};

/// Reserved id for unlabeled pixels; never opaque, never dynamic.
pub const UNKNOWN_CLASS_ID: u8 = 255;

#[derive(Debug, Error)]
pub enum SemanticsError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Config {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("class table: {0}")]
    InvalidTable(String),

    #[error("{path}: unknown class id {id} in raster")]
    UnknownClassId { path: PathBuf, id: u8 },

    #[error("{path}: {message}")]
    UnsupportedRaster { path: PathBuf, message: String },

    #[error("label map has invalid dimensions {width}x{height}")]
    InvalidDimensions { width: u32, height: u32 },

    #[error("non-finite keypoint coordinates ({x}, {y})")]
    NonFiniteCoordinates { x: f64, y: f64 },

    #[error("label-map scale must be positive, got {0}")]
    InvalidScale(f64),

    #[error("no label map for image {0:?}")]
    MissingLabelMap(String),

    #[error("label maps have different dimensions: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),

    #[error("observation references missing point {0}")]
    DanglingObservation(Point3dId),

    #[error(transparent)]
    Model(#[from] ModelIoError),
}

/// One semantic class with its priors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub class_id: u8,
    pub name: String,
    pub opaque: bool,
    pub dynamic: bool,
}

/// Registry of semantic classes: id ↔ name ↔ opacity ↔ dynamic.
///
/// The reserved [`UNKNOWN_CLASS_ID`] entry is always present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTable {
    entries: BTreeMap<u8, ClassEntry>,
}

impl ClassTable {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self, SemanticsError> {
        let mut map = BTreeMap::new();
        let mut names = HashMap::new();
        for entry in entries {
            if entry.class_id == UNKNOWN_CLASS_ID {
                return Err(SemanticsError::InvalidTable(format!(
                    "class id {UNKNOWN_CLASS_ID} is reserved for unknown"
                )));
            }
            if entry.name.is_empty() {
                return Err(SemanticsError::InvalidTable(format!(
                    "class {} has an empty name",
                    entry.class_id
                )));
            }
            if let Some(prev) = names.insert(entry.name.clone(), entry.class_id) {
                return Err(SemanticsError::InvalidTable(format!(
                    "duplicate class name {:?} (ids {} and {})",
                    entry.name, prev, entry.class_id
                )));
            }
            if map.insert(entry.class_id, entry.clone()).is_some() {
                return Err(SemanticsError::InvalidTable(format!(
                    "duplicate class id {}",
                    entry.class_id
                )));
            }
        }
        map.insert(
            UNKNOWN_CLASS_ID,
            ClassEntry {
                class_id: UNKNOWN_CLASS_ID,
                name: "unknown".to_string(),
                opaque: false,
                dynamic: false,
            },
        );
        Ok(ClassTable { entries: map })
    }

    /// The CityScapes street-scene schema with the usual label ids.
    ///
    /// Construction classes (building, wall, fence, bridge, tunnel) carry
    /// the opaque prior; sky, humans and vehicles carry the dynamic prior.
    pub fn cityscapes() -> Self {
        let spec: &[(u8, &str, bool, bool)] = &[
            (4, "static", false, false),
            (5, "dynamic", false, true),
            (6, "ground", false, false),
            (7, "road", false, false),
            (8, "sidewalk", false, false),
            (9, "parking", false, false),
            (10, "rail track", false, false),
            (11, "building", true, false),
            (12, "wall", true, false),
            (13, "fence", true, false),
            (14, "guard rail", false, false),
            (15, "bridge", true, false),
            (16, "tunnel", true, false),
            (17, "pole", false, false),
            (18, "polegroup", false, false),
            (19, "traffic light", false, false),
            (20, "traffic sign", false, false),
            (21, "vegetation", false, false),
            (22, "terrain", false, false),
            (23, "sky", false, true),
            (24, "person", false, true),
            (25, "rider", false, true),
            (26, "car", false, true),
            (27, "truck", false, true),
            (28, "bus", false, true),
            (29, "caravan", false, true),
            (30, "trailer", false, true),
            (31, "train", false, true),
            (32, "motorcycle", false, true),
            (33, "bicycle", false, true),
        ];
        Self::from_spec(spec)
    }

    /// The compact id scheme of the labelled-points CSV extract
    /// (road=1, building=2, sky=3, car=4, foliage=6, dynamic=9).
    pub fn csv_extract_preset() -> Self {
        let spec: &[(u8, &str, bool, bool)] = &[
            (1, "road", false, false),
            (2, "building", true, false),
            (3, "sky", false, true),
            (4, "car", false, true),
            (6, "foliage", false, false),
            (9, "dynamic", false, true),
        ];
        Self::from_spec(spec)
    }

    fn from_spec(spec: &[(u8, &str, bool, bool)]) -> Self {
        ClassTable::new(
            spec.iter()
                .map(|&(class_id, name, opaque, dynamic)| ClassEntry {
                    class_id,
                    name: name.to_string(),
                    opaque,
                    dynamic,
                })
                .collect(),
        )
        .expect("builtin tables are valid")
    }

    /// Parses a table from key-value text: one class per line, e.g.
    /// `id=11 name=building opaque=true dynamic=false`. Blank lines and
    /// `#` comments are skipped; names with spaces use quotes.
    pub fn from_file(path: &Path) -> Result<Self, SemanticsError> {
        let content = std::fs::read_to_string(path).map_err(|e| SemanticsError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg_err = |line: usize, message: String| SemanticsError::Config {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut entries = Vec::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let n = idx + 1;
            let mut id = None;
            let mut name = None;
            let mut opaque = None;
            let mut dynamic = None;
            for token in split_config_tokens(line) {
                let (key, value) = token
                    .split_once('=')
                    .ok_or_else(|| cfg_err(n, format!("expected key=value, got {token:?}")))?;
                let value = value.trim_matches('"');
                match key {
                    "id" => {
                        id = Some(value.parse::<u8>().map_err(|_| {
                            cfg_err(n, format!("invalid class id {value:?}"))
                        })?)
                    }
                    "name" => name = Some(value.to_string()),
                    "opaque" => {
                        opaque = Some(parse_bool(value).ok_or_else(|| {
                            cfg_err(n, format!("invalid opaque flag {value:?}"))
                        })?)
                    }
                    "dynamic" => {
                        dynamic = Some(parse_bool(value).ok_or_else(|| {
                            cfg_err(n, format!("invalid dynamic flag {value:?}"))
                        })?)
                    }
                    other => return Err(cfg_err(n, format!("unknown key {other:?}"))),
                }
            }
            entries.push(ClassEntry {
                class_id: id.ok_or_else(|| cfg_err(n, "missing id".into()))?,
                name: name.ok_or_else(|| cfg_err(n, "missing name".into()))?,
                opaque: opaque.unwrap_or(false),
                dynamic: dynamic.unwrap_or(false),
            });
        }
        ClassTable::new(entries)
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# semantic class table: id, name, opaque, dynamic")?;
        for e in self.entries.values() {
            if e.class_id == UNKNOWN_CLASS_ID {
                continue;
            }
            let name = if e.name.contains(' ') {
                format!("\"{}\"", e.name)
            } else {
                e.name.clone()
            };
            writeln!(
                w,
                "id={} name={} opaque={} dynamic={}",
                e.class_id, name, e.opaque, e.dynamic
            )?;
        }
        Ok(())
    }

    pub fn get(&self, class_id: u8) -> Option<&ClassEntry> {
        self.entries.get(&class_id)
    }

    pub fn contains(&self, class_id: u8) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn id_by_name(&self, name: &str) -> Option<u8> {
        self.entries
            .values()
            .find(|e| e.name == name)
            .map(|e| e.class_id)
    }

    pub fn name_of(&self, class_id: u8) -> Option<&str> {
        self.entries.get(&class_id).map(|e| e.name.as_str())
    }

    pub fn dynamic_ids(&self) -> Vec<u8> {
        self.entries
            .values()
            .filter(|e| e.dynamic)
            .map(|e| e.class_id)
            .collect()
    }

    pub fn opaque_ids(&self) -> Vec<u8> {
        self.entries
            .values()
            .filter(|e| e.opaque)
            .map(|e| e.class_id)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassEntry> {
        self.entries.values()
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Splits `a=b c="d e" f=g` into tokens, honoring double quotes.
fn split_config_tokens(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => {
                quoted = !quoted;
                current.push(ch);
            }
            c if c.is_whitespace() && !quoted => {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
            }
            c => current.push(c),
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Per-image raster of class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub name: String,
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl LabelMap {
    /// Validates dimensions and that every raster value is known.
    pub fn new(
        name: impl Into<String>,
        width: u32,
        height: u32,
        data: Vec<u8>,
        table: &ClassTable,
    ) -> Result<Self, SemanticsError> {
        if width == 0 || height == 0 {
            return Err(SemanticsError::InvalidDimensions { width, height });
        }
        assert_eq!(data.len(), (width as usize) * (height as usize));
        let name = name.into();
        for &id in &data {
            if !table.contains(id) {
                return Err(SemanticsError::UnknownClassId {
                    path: PathBuf::from(&name),
                    id,
                });
            }
        }
        Ok(LabelMap {
            name,
            width,
            height,
            data,
        })
    }

    /// Uniform raster of one class (handy for fixtures).
    pub fn uniform(
        name: impl Into<String>,
        width: u32,
        height: u32,
        class_id: u8,
        table: &ClassTable,
    ) -> Result<Self, SemanticsError> {
        LabelMap::new(name, width, height, vec![class_id; (width * height) as usize], table)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn at(&self, ix: u32, iy: u32) -> u8 {
        self.data[(iy as usize) * (self.width as usize) + ix as usize]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// RGB→class-id palette for colorized segmentation rasters.
///
/// File format: one `R G B ID` quadruple per line, `#` comments.
#[derive(Debug, Clone, Default)]
pub struct Palette {
    map: HashMap<[u8; 3], u8>,
}

impl Palette {
    pub fn new(map: HashMap<[u8; 3], u8>) -> Self {
        Palette { map }
    }

    pub fn from_file(path: &Path) -> Result<Self, SemanticsError> {
        let content = std::fs::read_to_string(path).map_err(|e| SemanticsError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut map = HashMap::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<Vec<u8>> =
                fields.iter().map(|f| f.parse::<u8>().ok()).collect();
            match parsed.as_deref() {
                Some([r, g, b, id]) => {
                    map.insert([*r, *g, *b], *id);
                }
                _ => {
                    return Err(SemanticsError::Config {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        message: format!("expected 'R G B ID', got {line:?}"),
                    })
                }
            }
        }
        Ok(Palette { map })
    }

    pub fn lookup(&self, rgb: [u8; 3]) -> Option<u8> {
        self.map.get(&rgb).copied()
    }
}

/// Loads a class-id raster (`.pgm` P5 or 8-bit grayscale `.png`).
pub fn load_label_map(path: &Path, table: &ClassTable) -> Result<LabelMap, SemanticsError> {
    load_label_map_impl(path, table, None)
}

/// Like [`load_label_map`], but colorized rasters are mapped through the
/// palette.
pub fn load_label_map_with_palette(
    path: &Path,
    table: &ClassTable,
    palette: &Palette,
) -> Result<LabelMap, SemanticsError> {
    load_label_map_impl(path, table, Some(palette))
}

fn load_label_map_impl(
    path: &Path,
    table: &ClassTable,
    palette: Option<&Palette>,
) -> Result<LabelMap, SemanticsError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = path
        .extension()
        .map(|s| s.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    let (width, height, data) = match ext.as_str() {
        "pgm" => read_pgm(path)?,
        "png" => read_png(path, palette)?,
        other => {
            return Err(SemanticsError::UnsupportedRaster {
                path: path.to_path_buf(),
                message: format!("unsupported raster extension {other:?} (want pgm or png)"),
            })
        }
    };
    LabelMap::new(name, width, height, data, table).map_err(|e| match e {
        // Attach the real path instead of the stem.
        SemanticsError::UnknownClassId { id, .. } => SemanticsError::UnknownClassId {
            path: path.to_path_buf(),
            id,
        },
        other => other,
    })
}

/// Minimal P5 reader: `P5`, whitespace/comments, width, height, maxval,
/// one whitespace byte, then raw rows.
fn read_pgm(path: &Path) -> Result<(u32, u32, Vec<u8>), SemanticsError> {
    let bytes = std::fs::read(path).map_err(|e| SemanticsError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let bad = |message: String| SemanticsError::UnsupportedRaster {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(bad("not a P5 PGM file".to_string()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        // Skip whitespace and '#' comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header".to_string()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| bad("invalid PGM header field".to_string()))?;
    }
    let [width, height, maxval] = fields;
    if maxval > 255 {
        return Err(bad(format!("maxval {maxval} exceeds 8-bit depth")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing whitespace after PGM header".to_string()));
    }
    pos += 1;
    let expected = (width as usize) * (height as usize);
    let data = bytes[pos..].to_vec();
    if data.len() != expected {
        return Err(bad(format!(
            "raster holds {} bytes, header promises {expected}",
            data.len()
        )));
    }
    Ok((width, height, data))
}

fn read_png(
    path: &Path,
    palette: Option<&Palette>,
) -> Result<(u32, u32, Vec<u8>), SemanticsError> {
    let img = image::open(path).map_err(|e| SemanticsError::UnsupportedRaster {
        path: path.to_path_buf(),
        message: format!("cannot decode: {e}"),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(gray) => {
            Ok((gray.width(), gray.height(), gray.into_raw()))
        }
        // Paletted PNGs decode to RGB; resolve them through the palette.
        image::DynamicImage::ImageRgb8(rgb) if palette.is_some() => {
            let palette = palette.unwrap();
            let (w, h) = (rgb.width(), rgb.height());
            let mut data = Vec::with_capacity((w as usize) * (h as usize));
            for p in rgb.pixels() {
                let id = palette.lookup(p.0).ok_or(SemanticsError::UnsupportedRaster {
                    path: path.to_path_buf(),
                    message: format!("color {:?} not in palette", p.0),
                })?;
                data.push(id);
            }
            Ok((w, h, data))
        }
        other => Err(SemanticsError::UnsupportedRaster {
            path: path.to_path_buf(),
            message: format!(
                "unsupported pixel format {:?} (want 8-bit grayscale, or RGB with a palette)",
                other.color()
            ),
        }),
    }
}

/// Writes a label map as a P5 PGM (used to materialize fixtures).
pub fn write_pgm(map: &LabelMap, path: &Path) -> Result<(), SemanticsError> {
    let mut out = Vec::with_capacity(map.data().len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", map.width(), map.height()).as_bytes());
    out.extend_from_slice(map.data());
    std::fs::write(path, out).map_err(|e| SemanticsError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Class id under a keypoint.
///
/// Keypoint coordinates follow the convention that the centre of the
/// upper-left pixel is (0.5, 0.5), so the raster index is the floor of the
/// coordinate. `scale` is label-map resolution over image resolution;
/// indices are clamped to the raster bounds.
pub fn label_at(map: &LabelMap, x: f64, y: f64, scale: f64) -> Result<u8, SemanticsError> {
    if !(x.is_finite() && y.is_finite()) {
        return Err(SemanticsError::NonFiniteCoordinates { x, y });
    }
    if !(scale > 0.0) {
        return Err(SemanticsError::InvalidScale(scale));
    }
    let ix = ((x * scale).floor() as i64).clamp(0, map.width() as i64 - 1) as u32;
    let iy = ((y * scale).floor() as i64).clamp(0, map.height() as i64 - 1) as u32;
    Ok(map.at(ix, iy))
}

/// A 2D observation annotated with its semantic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledObservation {
    pub image_id: ImageId,
    pub point2d_idx: u32,
    pub x: f64,
    pub y: f64,
    pub point3d_id: Point3dId,
    pub class_id: u8,
}

/// What to do when an image has no label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingMapPolicy {
    /// Fail.
    #[default]
    Strict,
    /// Label the image's observations [`UNKNOWN_CLASS_ID`].
    Unknown,
}

#[derive(Debug, Clone)]
pub struct LabelOptions {
    pub scale: f64,
    pub policy: MissingMapPolicy,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            scale: 1.0,
            policy: MissingMapPolicy::Strict,
        }
    }
}

/// Labels every 2D observation that belongs to a track.
///
/// Maps are keyed by image name; a lookup falls back to the file stem of
/// the image name, since label rasters usually swap the photo extension.
/// The result is ordered by `(image_id, point2d_idx)` and has exactly one
/// entry per track element of the model.
pub fn label_model(
    model: &SparseModel,
    maps: &BTreeMap<String, LabelMap>,
    opts: &LabelOptions,
) -> Result<Vec<LabeledObservation>, SemanticsError> {
    if !(opts.scale > 0.0) {
        return Err(SemanticsError::InvalidScale(opts.scale));
    }
    let images: Vec<_> = model.images.values().collect();
    let per_image: Vec<Result<Vec<LabeledObservation>, SemanticsError>> = images
        .par_iter()
        .map(|image| {
            let map = maps.get(&image.name).or_else(|| {
                let stem = Path::new(&image.name)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())?;
                maps.get(&stem)
            });
            if map.is_none() && opts.policy == MissingMapPolicy::Strict {
                return Err(SemanticsError::MissingLabelMap(image.name.clone()));
            }
            let mut out = Vec::new();
            for (idx, p2d) in image.points2d.iter().enumerate() {
                let Some(point3d_id) = p2d.point3d_id else { continue };
                let class_id = match map {
                    Some(m) => label_at(m, p2d.x, p2d.y, opts.scale)?,
                    None => UNKNOWN_CLASS_ID,
                };
                out.push(LabeledObservation {
                    image_id: image.image_id,
                    point2d_idx: idx as u32,
                    x: p2d.x,
                    y: p2d.y,
                    point3d_id,
                    class_id,
                });
            }
            Ok(out)
        })
        .collect();
    let mut observations = Vec::new();
    for r in per_image {
        observations.extend(r?);
    }
    Ok(observations)
}

/// Writes the labelled-points CSV:
/// `imageid,X2D,Y2D,X3D,Y3D,Z3D,INTENSITY,SEMANTIC_LABEL`, one row per
/// observation in `(imageid, point2d_idx)` order. INTENSITY is the class
/// id, SEMANTIC_LABEL the class name.
pub fn export_labeled_csv<W: Write>(
    observations: &[LabeledObservation],
    model: &SparseModel,
    table: &ClassTable,
    mut w: W,
) -> Result<(), SemanticsError> {
    let io_err = |source: std::io::Error| SemanticsError::Io {
        path: PathBuf::from("<csv stream>"),
        source,
    };
    let mut sorted: Vec<&LabeledObservation> = observations.iter().collect();
    sorted.sort_by_key(|o| (o.image_id, o.point2d_idx));
    writeln!(w, "imageid,X2D,Y2D,X3D,Y3D,Z3D,INTENSITY,SEMANTIC_LABEL").map_err(io_err)?;
    for obs in sorted {
        let point = model
            .points
            .get(&obs.point3d_id)
            .ok_or(SemanticsError::DanglingObservation(obs.point3d_id))?;
        let label = table
            .name_of(obs.class_id)
            .ok_or_else(|| SemanticsError::InvalidTable(format!("class id {} unknown", obs.class_id)))?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            obs.image_id, obs.x, obs.y, point.xyz.x, point.xyz.y, point.xyz.z, obs.class_id, label
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Intersection-over-union of one class between two equally sized rasters:
/// `TP / (TP + FP + FN)`. `None` when the class is absent from both.
pub fn compute_iou(
    pred: &LabelMap,
    truth: &LabelMap,
    class_id: u8,
) -> Result<Option<f64>, SemanticsError> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(SemanticsError::DimensionMismatch(
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height(),
        ));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fneg = 0u64;
    for (p, t) in pred.data().iter().zip(truth.data()) {
        match (*p == class_id, *t == class_id) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = tp + fp + fneg;
    Ok((denom > 0).then(|| tp as f64 / denom as f64))
}

/// Mean IoU over the table's classes; classes absent from both rasters are
/// excluded. `None` when no class is defined on the pair.
pub fn mean_iou(
    pred: &LabelMap,
    truth: &LabelMap,
    table: &ClassTable,
) -> Result<Option<f64>, SemanticsError> {
    let mut sum = 0.0;
    let mut n = 0u32;
    for entry in table.iter() {
        if let Some(v) = compute_iou(pred, truth, entry.class_id)? {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
