//! Text encoding of the sparse model (`cameras.txt`, `images.txt`,
//! `points3D.txt`). Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;

use super::{
    format_real, CameraIntrinsics, CameraModelKind, ImageRecord, ModelIoError, Point2D, Point3D,
    SparseModel, TrackElement,
};

struct LineReader {
    lines: std::iter::Enumerate<std::io::Lines<BufReader<File>>>,
    path: std::path::PathBuf,
}

impl LineReader {
    fn open(path: &Path) -> Result<Self, ModelIoError> {
        if !path.exists() {
            return Err(ModelIoError::MissingFile(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| ModelIoError::io(path, e))?;
        Ok(LineReader {
            lines: BufReader::new(file).lines().enumerate(),
            path: path.to_path_buf(),
        })
    }

    /// Next non-comment line (may be empty), with its 1-based number.
    fn next_data_line(&mut self) -> Result<Option<(usize, String)>, ModelIoError> {
        for (idx, line) in self.lines.by_ref() {
            let line = line.map_err(|e| ModelIoError::io(&self.path, e))?;
            if line.trim_start().starts_with('#') {
                continue;
            }
            return Ok(Some((idx + 1, line)));
        }
        Ok(None)
    }

    /// Next non-comment, non-empty line.
    fn next_record_line(&mut self) -> Result<Option<(usize, String)>, ModelIoError> {
        loop {
            match self.next_data_line()? {
                None => return Ok(None),
                Some((n, line)) => {
                    if !line.trim().is_empty() {
                        return Ok(Some((n, line)));
                    }
                }
            }
        }
    }

    fn err(&self, line: usize, message: impl Into<String>) -> ModelIoError {
        ModelIoError::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }
}

fn parse<T: FromStr>(
    reader: &LineReader,
    line: usize,
    token: &str,
    what: &str,
) -> Result<T, ModelIoError> {
    token
        .parse::<T>()
        .map_err(|_| reader.err(line, format!("invalid {what}: {token:?}")))
}

pub(super) fn read_model(dir: &Path) -> Result<SparseModel, ModelIoError> {
    Ok(SparseModel {
        cameras: read_cameras(&dir.join("cameras.txt"))?,
        images: read_images(&dir.join("images.txt"))?,
        points: read_points(&dir.join("points3D.txt"))?,
    })
}

fn read_cameras(path: &Path) -> Result<BTreeMap<u32, CameraIntrinsics>, ModelIoError> {
    let mut reader = LineReader::open(path)?;
    let mut cameras = BTreeMap::new();
    while let Some((n, line)) = reader.next_record_line()? {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 4 {
            return Err(reader.err(n, "camera record needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]"));
        }
        let camera_id: u32 = parse(&reader, n, tokens[0], "camera id")?;
        let model = CameraModelKind::from_name(tokens[1])
            .ok_or_else(|| ModelIoError::UnknownCameraModel(tokens[1].to_string()))?;
        let width: u64 = parse(&reader, n, tokens[2], "width")?;
        let height: u64 = parse(&reader, n, tokens[3], "height")?;
        let params = tokens[4..]
            .iter()
            .map(|t| parse::<f64>(&reader, n, t, "camera parameter"))
            .collect::<Result<Vec<_>, _>>()?;
        let camera = CameraIntrinsics {
            camera_id,
            model,
            width,
            height,
            params,
        };
        camera.validate()?;
        if cameras.insert(camera_id, camera).is_some() {
            return Err(reader.err(n, format!("duplicate camera id {camera_id}")));
        }
    }
    Ok(cameras)
}

fn read_images(path: &Path) -> Result<BTreeMap<u32, ImageRecord>, ModelIoError> {
    let mut reader = LineReader::open(path)?;
    let mut images = BTreeMap::new();
    while let Some((n, line)) = reader.next_record_line()? {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 10 {
            return Err(reader.err(
                n,
                "image record needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME",
            ));
        }
        let image_id: u32 = parse(&reader, n, tokens[0], "image id")?;
        let mut qvec = [0.0; 4];
        for (i, q) in qvec.iter_mut().enumerate() {
            *q = parse(&reader, n, tokens[1 + i], "quaternion component")?;
        }
        let tvec = Vector3::new(
            parse(&reader, n, tokens[5], "translation")?,
            parse(&reader, n, tokens[6], "translation")?,
            parse(&reader, n, tokens[7], "translation")?,
        );
        let camera_id: u32 = parse(&reader, n, tokens[8], "camera id")?;
        let name = tokens[9..].join(" ");

        // The observations line follows immediately; it may be empty.
        let Some((obs_n, obs_line)) = reader.next_data_line()? else {
            return Err(reader.err(n, format!("image {image_id}: missing observations line")));
        };
        let obs_tokens: Vec<&str> = obs_line.split_whitespace().collect();
        if obs_tokens.len() % 3 != 0 {
            return Err(reader.err(obs_n, "observations line must hold X Y POINT3D_ID triples"));
        }
        let mut points2d = Vec::with_capacity(obs_tokens.len() / 3);
        for chunk in obs_tokens.chunks_exact(3) {
            let x: f64 = parse(&reader, obs_n, chunk[0], "keypoint x")?;
            let y: f64 = parse(&reader, obs_n, chunk[1], "keypoint y")?;
            let raw: i64 = parse(&reader, obs_n, chunk[2], "point3d id")?;
            let point3d_id = if raw < 0 { None } else { Some(raw as u64) };
            points2d.push(Point2D { x, y, point3d_id });
        }
        if images
            .insert(
                image_id,
                ImageRecord {
                    image_id,
                    qvec,
                    tvec,
                    camera_id,
                    name,
                    points2d,
                },
            )
            .is_some()
        {
            return Err(reader.err(n, format!("duplicate image id {image_id}")));
        }
    }
    Ok(images)
}

fn read_points(path: &Path) -> Result<BTreeMap<u64, Point3D>, ModelIoError> {
    let mut reader = LineReader::open(path)?;
    let mut points = BTreeMap::new();
    while let Some((n, line)) = reader.next_record_line()? {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 8 || (tokens.len() - 8) % 2 != 0 {
            return Err(reader.err(
                n,
                "point record needs POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID POINT2D_IDX)",
            ));
        }
        let point3d_id: u64 = parse(&reader, n, tokens[0], "point3d id")?;
        let xyz = Vector3::new(
            parse(&reader, n, tokens[1], "coordinate")?,
            parse(&reader, n, tokens[2], "coordinate")?,
            parse(&reader, n, tokens[3], "coordinate")?,
        );
        let rgb = [
            parse::<u8>(&reader, n, tokens[4], "color")?,
            parse::<u8>(&reader, n, tokens[5], "color")?,
            parse::<u8>(&reader, n, tokens[6], "color")?,
        ];
        let error: f64 = parse(&reader, n, tokens[7], "error")?;
        let mut track = Vec::with_capacity((tokens.len() - 8) / 2);
        for chunk in tokens[8..].chunks_exact(2) {
            track.push(TrackElement {
                image_id: parse(&reader, n, chunk[0], "track image id")?,
                point2d_idx: parse(&reader, n, chunk[1], "track keypoint index")?,
            });
        }
        if track.is_empty() {
            return Err(reader.err(n, format!("point {point3d_id} has an empty track")));
        }
        if points
            .insert(
                point3d_id,
                Point3D {
                    point3d_id,
                    xyz,
                    rgb,
                    error,
                    track,
                },
            )
            .is_some()
        {
            return Err(reader.err(n, format!("duplicate point3d id {point3d_id}")));
        }
    }
    Ok(points)
}

pub(super) fn write_model(model: &SparseModel, dir: &Path) -> Result<(), ModelIoError> {
    std::fs::create_dir_all(dir).map_err(|e| ModelIoError::io(dir, e))?;
    write_cameras(model, &dir.join("cameras.txt"))?;
    write_images(model, &dir.join("images.txt"))?;
    write_points(model, &dir.join("points3D.txt"))
}

fn writer(path: &Path) -> Result<BufWriter<File>, ModelIoError> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| ModelIoError::io(path, e))?,
    ))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), ModelIoError> {
    w.flush().map_err(|e| ModelIoError::io(path, e))
}

fn write_cameras(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = writer(path)?;
    let io = |e| ModelIoError::io(path, e);
    writeln!(w, "# Camera list with one line of data per camera:").map_err(io)?;
    writeln!(w, "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]").map_err(io)?;
    writeln!(w, "# Number of cameras: {}", model.cameras.len()).map_err(io)?;
    for cam in model.cameras.values() {
        write!(w, "{} {} {} {}", cam.camera_id, cam.model, cam.width, cam.height).map_err(io)?;
        for p in &cam.params {
            write!(w, " {}", format_real(*p)).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    finish(w, path)
}

fn write_images(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = writer(path)?;
    let io = |e| ModelIoError::io(path, e);
    let mean_obs = if model.images.is_empty() {
        0.0
    } else {
        model.observation_count() as f64 / model.images.len() as f64
    };
    writeln!(w, "# Image list with two lines of data per image:").map_err(io)?;
    writeln!(w, "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME").map_err(io)?;
    writeln!(w, "#   POINTS2D[] as (X, Y, POINT3D_ID)").map_err(io)?;
    writeln!(
        w,
        "# Number of images: {}, mean observations per image: {}",
        model.images.len(),
        format_real(mean_obs)
    )
    .map_err(io)?;
    for image in model.images.values() {
        write!(w, "{}", image.image_id).map_err(io)?;
        for q in &image.qvec {
            write!(w, " {}", format_real(*q)).map_err(io)?;
        }
        for t in image.tvec.iter() {
            write!(w, " {}", format_real(*t)).map_err(io)?;
        }
        writeln!(w, " {} {}", image.camera_id, image.name).map_err(io)?;
        let mut first = true;
        for p in &image.points2d {
            if !first {
                write!(w, " ").map_err(io)?;
            }
            first = false;
            let pid = p.point3d_id.map(|v| v as i64).unwrap_or(-1);
            write!(w, "{} {} {}", format_real(p.x), format_real(p.y), pid).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    finish(w, path)
}

fn write_points(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = writer(path)?;
    let io = |e| ModelIoError::io(path, e);
    let mean_track = if model.points.is_empty() {
        0.0
    } else {
        model.observation_count() as f64 / model.points.len() as f64
    };
    writeln!(w, "# 3D point list with one line of data per point:").map_err(io)?;
    writeln!(
        w,
        "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"
    )
    .map_err(io)?;
    writeln!(
        w,
        "# Number of points: {}, mean track length: {}",
        model.points.len(),
        format_real(mean_track)
    )
    .map_err(io)?;
    for point in model.points.values() {
        write!(
            w,
            "{} {} {} {} {} {} {} {}",
            point.point3d_id,
            format_real(point.xyz.x),
            format_real(point.xyz.y),
            format_real(point.xyz.z),
            point.rgb[0],
            point.rgb[1],
            point.rgb[2],
            format_real(point.error)
        )
        .map_err(io)?;
        for el in &point.track {
            write!(w, " {} {}", el.image_id, el.point2d_idx).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    finish(w, path)
}
