//! End-to-end tests of the `sfm-semval` binary: exit codes, artifacts,
//! report determinism.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;

use sfm_semval::camera::{project, Pose};
use sfm_semval::model_io::{load_model, pair_id, write_model_text, Format, SparseModel};
use sfm_semval::planes::sample_planar_points;
use sfm_semval::semantics::{write_pgm, ClassTable, LabelMap};
use sfm_semval::synthetic::exact_scene;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sfm-semval"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes a text model plus per-image PGM label maps. Labels split each
/// frame into a left "building" half and a right "car" half, so tracks
/// crossing the split exercise both filters.
fn write_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let model = exact_scene(4, 40, 2024);
    let model_dir = dir.join("sparse");
    write_model_text(&model, &model_dir).unwrap();

    let table = ClassTable::cityscapes();
    let labels_dir = dir.join("labels");
    std::fs::create_dir_all(&labels_dir).unwrap();
    for image in model.images.values() {
        let (w, h) = (1280u32, 720u32);
        let mut data = vec![0u8; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) as usize] = if x < w / 2 { 11 } else { 26 };
            }
        }
        let map = LabelMap::new(image.name.clone(), w, h, data, &table).unwrap();
        let stem = Path::new(&image.name).file_stem().unwrap().to_string_lossy();
        write_pgm(&map, &labels_dir.join(format!("{stem}.pgm"))).unwrap();
    }
    (model_dir, labels_dir)
}

/// A scene with a camera in front of a labelled wall and points hidden
/// behind it, for the occlusion command.
fn write_wall_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    use sfm_semval::model_io::{
        CameraIntrinsics, CameraModelKind, ImageRecord, Point2D, Point3D, TrackElement,
    };
    let camera = CameraIntrinsics::new(
        1,
        CameraModelKind::SimplePinhole,
        1280,
        720,
        vec![400.0, 640.0, 360.0],
    )
    .unwrap();
    let mut model = SparseModel::empty();
    model.cameras.insert(1, camera.clone());
    for image_id in 1..=2u32 {
        model.images.insert(
            image_id,
            ImageRecord {
                image_id,
                qvec: [1.0, 0.0, 0.0, 0.0],
                tvec: Vector3::new(0.2 * image_id as f64 - 0.3, 0.0, 0.0),
                camera_id: 1,
                name: format!("wall{image_id}.jpg"),
                points2d: Vec::new(),
            },
        );
    }
    // Dense wall at z = 4, sparse hidden points around z = 8.
    let mut spec: Vec<Vector3<f64>> =
        sample_planar_points(Vector3::z(), Vector3::new(0.0, 0.0, 4.0), 2.5, 1.8, 60, 0.0, 7);
    let wall_count = spec.len();
    for i in 0..12 {
        spec.push(Vector3::new(
            -1.5 + 0.25 * i as f64,
            -1.0 + 0.17 * i as f64,
            7.5 + 0.21 * ((i * 7) % 5) as f64,
        ));
    }
    let poses: BTreeMap<u32, Pose> = model
        .images
        .values()
        .map(|img| (img.image_id, Pose::of_image(img).unwrap()))
        .collect();
    for (i, xyz) in spec.iter().enumerate() {
        let pid = i as u64 + 1;
        let mut track = Vec::new();
        for (&image_id, pose) in &poses {
            let Ok(pix) = project(pose, &camera, xyz) else { continue };
            let image = model.images.get_mut(&image_id).unwrap();
            track.push(TrackElement {
                image_id,
                point2d_idx: image.points2d.len() as u32,
            });
            image.points2d.push(Point2D {
                x: pix.x,
                y: pix.y,
                point3d_id: Some(pid),
            });
        }
        assert!(track.len() >= 2);
        model.points.insert(
            pid,
            Point3D {
                point3d_id: pid,
                xyz: *xyz,
                rgb: [128, 128, 128],
                error: 0.0,
                track,
            },
        );
    }
    model.check_integrity().unwrap();
    let model_dir = dir.join("wall-sparse");
    write_model_text(&model, &model_dir).unwrap();

    // Uniform "road" rasters with "building" stamped around wall keypoints.
    let table = ClassTable::cityscapes();
    let labels_dir = dir.join("wall-labels");
    std::fs::create_dir_all(&labels_dir).unwrap();
    for image in model.images.values() {
        let (w, h) = (1280u32, 720u32);
        let mut data = vec![7u8; (w * h) as usize];
        for p2d in &image.points2d {
            let Some(pid) = p2d.point3d_id else { continue };
            if pid as usize > wall_count {
                continue;
            }
            let cx = p2d.x.floor() as i64;
            let cy = p2d.y.floor() as i64;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let x = (cx + dx).clamp(0, w as i64 - 1) as u32;
                    let y = (cy + dy).clamp(0, h as i64 - 1) as u32;
                    data[(y * w + x) as usize] = 11;
                }
            }
        }
        let map = LabelMap::new(image.name.clone(), w, h, data, &table).unwrap();
        let stem = Path::new(&image.name).file_stem().unwrap().to_string_lossy();
        write_pgm(&map, &labels_dir.join(format!("{stem}.pgm"))).unwrap();
    }
    (model_dir, labels_dir)
}

#[test]
fn stats_prints_table_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, _) = write_fixture(dir.path());
    let out = run(&["stats", "--model-dir", model_dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    for row in [
        "Cameras",
        "Images",
        "Registered Images",
        "Points",
        "Observations",
        "Mean Track Length",
        "Mean Observations per Image",
        "Mean Re-projection Error",
    ] {
        assert!(text.contains(row), "missing row {row:?} in:\n{text}");
    }
}

#[test]
fn unknown_command_exits_one_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn missing_model_dir_is_input_error() {
    let out = run(&["stats", "--model-dir", "/no/such/model"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["stats"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn export_csv_streams_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, labels_dir) = write_fixture(dir.path());
    let out = run(&[
        "export-csv",
        "--model-dir",
        model_dir.to_str().unwrap(),
        "--labels-dir",
        labels_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.starts_with("imageid,X2D,Y2D,X3D,Y3D,Z3D,INTENSITY,SEMANTIC_LABEL\n"));
    let model = load_model(&model_dir, Format::Text).unwrap();
    assert_eq!(text.lines().count() as u64, 1 + model.observation_count());
}

#[test]
fn label_reports_class_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, labels_dir) = write_fixture(dir.path());
    let out_dir = dir.path().join("out-label");
    let out = run(&[
        "label",
        "--model-dir",
        model_dir.to_str().unwrap(),
        "--labels-dir",
        labels_dir.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("building"));
    assert!(out_dir.join("labeled_points.csv").exists());
}

#[test]
fn consistency_filter_writes_model_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, labels_dir) = write_fixture(dir.path());
    let out_dir = dir.path().join("out-consistency");
    let out = run(&[
        "consistency-filter",
        "--model-dir",
        model_dir.to_str().unwrap(),
        "--labels-dir",
        labels_dir.to_str().unwrap(),
        "--min-track",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_of(&out).contains("Semantic Consistency Constraint Violation Points"));
    let filtered = load_model(&out_dir.join("model"), Format::Text).unwrap();
    filtered.check_integrity().unwrap();
    let report = sfm_semval::report::parse_report_json(
        &std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    report.check_arithmetic().unwrap();
    assert_eq!(report.stages.len(), 1);
    assert_eq!(
        report.stages[0].report.points_after,
        filtered.points.len() as u64
    );
    // Every surviving track is label-pure, so a second pass is a no-op.
    let out2_dir = dir.path().join("out-consistency-2");
    let out2 = run(&[
        "consistency-filter",
        "--model-dir",
        out_dir.join("model").to_str().unwrap(),
        "--labels-dir",
        labels_dir.to_str().unwrap(),
        "--out",
        out2_dir.to_str().unwrap(),
    ]);
    assert!(out2.status.success());
    let report2 = sfm_semval::report::parse_report_json(
        &std::fs::read_to_string(out2_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report2.stages[0].report.observations_removed, 0);
}

#[test]
fn motion_filter_removes_dynamic_points() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, labels_dir) = write_fixture(dir.path());
    let out_dir = dir.path().join("out-motion");
    let out = run(&[
        "motion-filter",
        "--model-dir",
        model_dir.to_str().unwrap(),
        "--labels-dir",
        labels_dir.to_str().unwrap(),
        "--motion-policy",
        "any",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout_of(&out).contains("Motion Points Removed"));
    let before = load_model(&model_dir, Format::Text).unwrap();
    let after = load_model(&out_dir.join("model"), Format::Text).unwrap();
    assert!(after.points.len() < before.points.len());
}

#[test]
fn occlusion_flags_points_behind_the_wall() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, labels_dir) = write_wall_fixture(dir.path());
    let out_dir = dir.path().join("out-occlusion");
    let out = run(&[
        "occlusion",
        "--model-dir",
        model_dir.to_str().unwrap(),
        "--labels-dir",
        labels_dir.to_str().unwrap(),
        "--eps",
        "0.05",
        "--min-inliers",
        "10",
        "--cluster-dist",
        "1.5",
        "--seed",
        "3",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let verdicts = std::fs::read_to_string(out_dir.join("occlusion_verdicts.csv")).unwrap();
    assert!(verdicts.starts_with("point3d_id,image_id,status,plane_id,d\n"));
    // Hidden points (ids > 60) are occluded, wall points are not.
    let mut occluded_hidden = 0;
    for line in verdicts.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let pid: u64 = fields[0].parse().unwrap();
        if fields[2] == "occluded" {
            assert!(pid > 60, "wall point {pid} flagged");
            occluded_hidden += 1;
        }
    }
    assert!(occluded_hidden > 0, "no hidden point flagged:\n{verdicts}");
    assert!(out_dir.join("planes.txt").exists());
    let ply = std::fs::read_to_string(out_dir.join("points.ply")).unwrap();
    assert!(ply.contains("property uchar status"));
    let report = sfm_semval::report::parse_report_json(
        &std::fs::read_to_string(out_dir.join("report.json")).unwrap(),
    )
    .unwrap();
    let occ = report.occlusion.unwrap();
    assert!(occ.opaque_planes >= 1);
    assert!(occ.points_flagged > 0);
}

#[test]
fn match_matrix_reads_synthetic_database() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("database.db");
    let conn = rusqlite::Connection::open(&db).unwrap();
    conn.execute_batch(
        "CREATE TABLE images (image_id INTEGER PRIMARY KEY, name TEXT, camera_id INTEGER);
         CREATE TABLE matches (pair_id INTEGER PRIMARY KEY, rows INTEGER, cols INTEGER, data BLOB);
         CREATE TABLE two_view_geometries (pair_id INTEGER PRIMARY KEY, rows INTEGER, cols INTEGER, data BLOB);",
    )
    .unwrap();
    for id in 1..=3 {
        conn.execute("INSERT INTO images (image_id, name, camera_id) VALUES (?1, ?2, 1)",
            rusqlite::params![id, format!("f{id}.jpg")]).unwrap();
    }
    conn.execute(
        "INSERT INTO matches (pair_id, rows, cols) VALUES (?1, 10, 2)",
        rusqlite::params![pair_id(1, 2).unwrap()],
    )
    .unwrap();
    drop(conn);
    let out = run(&["match-matrix", "--database", db.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_of(&out), "image_id,1,2,3\n1,0,10,0\n2,10,0,0\n3,0,0,0\n");
}

#[test]
fn pipeline_produces_all_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (model_dir, labels_dir) = write_fixture(dir.path());
    let config = dir.path().join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "model_dir={}\nlabels_dir={}\nseed=11\nmin_track=2\nmotion_policy=majority\n",
            model_dir.display(),
            labels_dir.display()
        ),
    )
    .unwrap();

    let run_pipeline = |out_dir: &Path| {
        let out = run(&[
            "pipeline",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out
    };
    // Identical config (including the out dir), two runs.
    let out_a = dir.path().join("run");
    let first = run_pipeline(&out_a);
    let first_report = std::fs::read_to_string(out_a.join("report.json")).unwrap();
    run_pipeline(&out_a);
    let second_report = std::fs::read_to_string(out_a.join("report.json")).unwrap();

    for artifact in [
        "model/cameras.txt",
        "model/images.txt",
        "model/points3D.txt",
        "labeled_points.csv",
        "planes.txt",
        "occlusion_verdicts.csv",
        "points.ply",
        "report.txt",
        "report.json",
    ] {
        assert!(out_a.join(artifact).exists(), "missing {artifact}");
    }
    let text = stdout_of(&first);
    assert!(text.contains("Motion Removal"));
    assert!(text.contains("Semantic Consistency"));
    assert!(text.contains("== Output Model =="));

    // Byte-identical reports modulo the provenance timestamp.
    let normalize = |json: &str| {
        let mut report = sfm_semval::report::parse_report_json(json).unwrap();
        report.check_arithmetic().unwrap();
        report.provenance.timestamp = None;
        sfm_semval::report::render_report(&report, sfm_semval::report::ReportFormat::Json)
    };
    assert_eq!(normalize(&first_report), normalize(&second_report));

    // The filtered model is intact and the stage chain composes.
    let filtered = load_model(&out_a.join("model"), Format::Text).unwrap();
    filtered.check_integrity().unwrap();
    let report = sfm_semval::report::parse_report_json(
        &std::fs::read_to_string(out_a.join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report.stages.len(), 3);
    assert_eq!(
        report.stages[0].report.observations_after,
        report.stages[1].report.observations_before
    );
}
