//! Binary encoding of the sparse model.
//!
//! Little-endian throughout, matching the layout of COLMAP's model writer:
//! counts are `u64`, camera/image ids `u32`, model ids `i32`, coordinates
//! `f64`, and a keypoint's missing 3D link is `-1` as a signed 64-bit value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Seek, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use super::{
    CameraIntrinsics, CameraModelKind, ImageRecord, ModelIoError, Point2D, Point3D, SparseModel,
    TrackElement,
};

struct BinReader {
    inner: BufReader<File>,
    path: std::path::PathBuf,
}

impl BinReader {
    fn open(path: &Path) -> Result<Self, ModelIoError> {
        if !path.exists() {
            return Err(ModelIoError::MissingFile(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| ModelIoError::io(path, e))?;
        Ok(BinReader {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
        })
    }

    fn err(&mut self, message: impl Into<String>) -> ModelIoError {
        let offset = self.inner.stream_position().unwrap_or(u64::MAX);
        ModelIoError::Binary {
            path: self.path.clone(),
            offset,
            message: message.into(),
        }
    }

    fn wrap<T>(&mut self, r: std::io::Result<T>, what: &str) -> Result<T, ModelIoError> {
        match r {
            Ok(v) => Ok(v),
            Err(e) => Err(self.err(format!("failed to read {what}: {e}"))),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelIoError> {
        let r = self.inner.read_u64::<LittleEndian>();
        self.wrap(r, what)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelIoError> {
        let r = self.inner.read_u32::<LittleEndian>();
        self.wrap(r, what)
    }

    fn i32(&mut self, what: &str) -> Result<i32, ModelIoError> {
        let r = self.inner.read_i32::<LittleEndian>();
        self.wrap(r, what)
    }

    fn i64(&mut self, what: &str) -> Result<i64, ModelIoError> {
        let r = self.inner.read_i64::<LittleEndian>();
        self.wrap(r, what)
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelIoError> {
        let r = self.inner.read_f64::<LittleEndian>();
        self.wrap(r, what)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelIoError> {
        let r = self.inner.read_u8();
        self.wrap(r, what)
    }

    fn cstring(&mut self, what: &str) -> Result<String, ModelIoError> {
        let mut bytes = Vec::new();
        loop {
            let b = self.u8(what)?;
            if b == 0 {
                break;
            }
            bytes.push(b);
        }
        String::from_utf8(bytes).map_err(|e| self.err(format!("{what} is not UTF-8: {e}")))
    }
}

pub(super) fn read_model(dir: &Path) -> Result<SparseModel, ModelIoError> {
    Ok(SparseModel {
        cameras: read_cameras(&dir.join("cameras.bin"))?,
        images: read_images(&dir.join("images.bin"))?,
        points: read_points(&dir.join("points3D.bin"))?,
    })
}

fn read_cameras(path: &Path) -> Result<BTreeMap<u32, CameraIntrinsics>, ModelIoError> {
    let mut r = BinReader::open(path)?;
    let count = r.u64("camera count")?;
    let mut cameras = BTreeMap::new();
    for _ in 0..count {
        let camera_id = r.u32("camera id")?;
        let model_id = r.i32("camera model id")?;
        let model = CameraModelKind::from_model_id(model_id)
            .ok_or_else(|| ModelIoError::UnknownCameraModel(model_id.to_string()))?;
        let width = r.u64("camera width")?;
        let height = r.u64("camera height")?;
        let mut params = Vec::with_capacity(model.param_count());
        for _ in 0..model.param_count() {
            params.push(r.f64("camera parameter")?);
        }
        let camera = CameraIntrinsics {
            camera_id,
            model,
            width,
            height,
            params,
        };
        camera.validate()?;
        if cameras.insert(camera_id, camera).is_some() {
            return Err(r.err(format!("duplicate camera id {camera_id}")));
        }
    }
    Ok(cameras)
}

fn read_images(path: &Path) -> Result<BTreeMap<u32, ImageRecord>, ModelIoError> {
    let mut r = BinReader::open(path)?;
    let count = r.u64("image count")?;
    let mut images = BTreeMap::new();
    for _ in 0..count {
        let image_id = r.u32("image id")?;
        let qvec = [
            r.f64("qw")?,
            r.f64("qx")?,
            r.f64("qy")?,
            r.f64("qz")?,
        ];
        let tvec = Vector3::new(r.f64("tx")?, r.f64("ty")?, r.f64("tz")?);
        let camera_id = r.u32("camera id")?;
        let name = r.cstring("image name")?;
        let num_points = r.u64("keypoint count")?;
        let mut points2d = Vec::with_capacity(num_points as usize);
        for _ in 0..num_points {
            let x = r.f64("keypoint x")?;
            let y = r.f64("keypoint y")?;
            let raw = r.i64("point3d id")?;
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
            return Err(r.err(format!("duplicate image id {image_id}")));
        }
    }
    Ok(images)
}

fn read_points(path: &Path) -> Result<BTreeMap<u64, Point3D>, ModelIoError> {
    let mut r = BinReader::open(path)?;
    let count = r.u64("point count")?;
    let mut points = BTreeMap::new();
    for _ in 0..count {
        let point3d_id = r.u64("point3d id")?;
        let xyz = Vector3::new(r.f64("x")?, r.f64("y")?, r.f64("z")?);
        let rgb = [r.u8("r")?, r.u8("g")?, r.u8("b")?];
        let error = r.f64("error")?;
        let track_len = r.u64("track length")?;
        if track_len == 0 {
            return Err(r.err(format!("point {point3d_id} has an empty track")));
        }
        let mut track = Vec::with_capacity(track_len as usize);
        for _ in 0..track_len {
            track.push(TrackElement {
                image_id: r.u32("track image id")?,
                point2d_idx: r.u32("track keypoint index")?,
            });
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
            return Err(r.err(format!("duplicate point3d id {point3d_id}")));
        }
    }
    Ok(points)
}

pub(super) fn write_model(model: &SparseModel, dir: &Path) -> Result<(), ModelIoError> {
    std::fs::create_dir_all(dir).map_err(|e| ModelIoError::io(dir, e))?;
    write_cameras(model, &dir.join("cameras.bin"))?;
    write_images(model, &dir.join("images.bin"))?;
    write_points(model, &dir.join("points3D.bin"))
}

fn out(path: &Path) -> Result<BufWriter<File>, ModelIoError> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| ModelIoError::io(path, e))?,
    ))
}

fn write_cameras(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = out(path)?;
    (|| -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(model.cameras.len() as u64)?;
        for cam in model.cameras.values() {
            w.write_u32::<LittleEndian>(cam.camera_id)?;
            w.write_i32::<LittleEndian>(cam.model.model_id())?;
            w.write_u64::<LittleEndian>(cam.width)?;
            w.write_u64::<LittleEndian>(cam.height)?;
            for p in &cam.params {
                w.write_f64::<LittleEndian>(*p)?;
            }
        }
        w.flush()
    })()
    .map_err(|e| ModelIoError::io(path, e))
}

fn write_images(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = out(path)?;
    (|| -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(model.images.len() as u64)?;
        for image in model.images.values() {
            w.write_u32::<LittleEndian>(image.image_id)?;
            for q in &image.qvec {
                w.write_f64::<LittleEndian>(*q)?;
            }
            for t in image.tvec.iter() {
                w.write_f64::<LittleEndian>(*t)?;
            }
            w.write_u32::<LittleEndian>(image.camera_id)?;
            w.write_all(image.name.as_bytes())?;
            w.write_u8(0)?;
            w.write_u64::<LittleEndian>(image.points2d.len() as u64)?;
            for p in &image.points2d {
                w.write_f64::<LittleEndian>(p.x)?;
                w.write_f64::<LittleEndian>(p.y)?;
                w.write_i64::<LittleEndian>(p.point3d_id.map(|v| v as i64).unwrap_or(-1))?;
            }
        }
        w.flush()
    })()
    .map_err(|e| ModelIoError::io(path, e))
}

fn write_points(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = out(path)?;
    (|| -> std::io::Result<()> {
        w.write_u64::<LittleEndian>(model.points.len() as u64)?;
        for point in model.points.values() {
            w.write_u64::<LittleEndian>(point.point3d_id)?;
            for c in point.xyz.iter() {
                w.write_f64::<LittleEndian>(*c)?;
            }
            w.write_all(&point.rgb)?;
            w.write_f64::<LittleEndian>(point.error)?;
            w.write_u64::<LittleEndian>(point.track.len() as u64)?;
            for el in &point.track {
                w.write_u32::<LittleEndian>(el.image_id)?;
                w.write_u32::<LittleEndian>(el.point2d_idx)?;
            }
        }
        w.flush()
    })()
    .map_err(|e| ModelIoError::io(path, e))
}
