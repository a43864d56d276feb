//! Command-line surface.
//!
//! One subcommand per pipeline stage plus `pipeline` for the whole chain.
//! Options come from a flat `key=value` config file overridden by CLI
//! flags; the merged configuration is echoed into the report's provenance
//! block. Exit codes: 0 success, 1 invalid input, 2 internal error.
//! `SFMSEMVAL_THREADS` caps intra-stage parallelism.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::camera::mean_reprojection_stats;
use crate::filters::{
    consistency_filter, motion_filter_with, retain_observations, ConsistencyOptions,
    CoveragePolicy, MotionPolicy,
};
use crate::model_io::{load_match_matrix, load_model, write_model_text, Format, MatchSource};
use crate::planes::{
    extract_semantic_planes, load_plane_file, occlusion_validate, write_plane_file,
    LabeledPlane, OcclusionOptions, OcclusionStatus, OcclusionVerdict, PlaneExtractionOptions,
};
use crate::report::{
    render_report, write_ply, OcclusionSummary, Provenance, ReportFormat, StageKind, StageReport,
    ValidationReport,
};
use crate::semantics::{
    export_labeled_csv, label_model, load_label_map, ClassTable, LabelMap, LabelOptions,
    LabeledObservation, MissingMapPolicy,
};

#[derive(Debug)]
enum CliError {
    /// Bad configuration or malformed/missing input (exit 1).
    Input(String),
    /// Failure past input validation (exit 2).
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Internal(m) => m,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

fn internal<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Parser, Debug)]
#[command(
    name = "sfm-semval",
    version,
    about = "Semantic validation and correction of COLMAP sparse reconstructions",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct CommonArgs {
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,

    /// COLMAP sparse model directory.
    #[arg(long)]
    model_dir: Option<PathBuf>,

    /// Model encoding: auto, text or binary.
    #[arg(long)]
    format: Option<String>,

    /// Directory of per-image label rasters (.pgm or .png).
    #[arg(long)]
    labels_dir: Option<PathBuf>,

    /// Label-map resolution over image resolution.
    #[arg(long)]
    label_scale: Option<f64>,

    /// Class table file; defaults to the builtin CityScapes schema.
    #[arg(long)]
    class_table: Option<PathBuf>,

    /// Missing-label-map policy: strict or unknown.
    #[arg(long)]
    policy: Option<String>,

    /// Motion-point policy: majority or any.
    #[arg(long)]
    motion_policy: Option<String>,

    /// Minimum surviving track length of the consistency filter.
    #[arg(long)]
    min_track: Option<u32>,

    /// Plane-fit RANSAC inlier distance (scene units).
    #[arg(long)]
    eps: Option<f64>,

    /// Plane-fit RANSAC trial count.
    #[arg(long)]
    trials: Option<u64>,

    /// Seed of every randomized step.
    #[arg(long)]
    seed: Option<u64>,

    /// Minimum cluster size that yields a plane.
    #[arg(long)]
    min_inliers: Option<usize>,

    /// Point clustering distance for plane extraction.
    #[arg(long)]
    cluster_dist: Option<f64>,

    /// Comma-separated class names to fit planes for (default: the opaque classes).
    #[arg(long)]
    plane_classes: Option<String>,

    /// Load planes from this file instead of fitting them.
    #[arg(long)]
    planes: Option<PathBuf>,

    /// Depth margin excluded at ray endpoints.
    #[arg(long)]
    depth_margin: Option<f64>,

    /// Lateral tolerance added to plane extents.
    #[arg(long)]
    extent_margin: Option<f64>,

    /// Fraction of occluded observations that flags a point.
    #[arg(long)]
    aggregation: Option<f64>,

    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print model statistics.
    Stats(CommonArgs),
    /// Attach labels to every observation and print a class histogram.
    Label(CommonArgs),
    /// Export the labelled-points CSV.
    ExportCsv(CommonArgs),
    /// Remove points dominated by dynamic classes.
    MotionFilter(CommonArgs),
    /// Prune semantically inconsistent observations and short tracks.
    ConsistencyFilter(CommonArgs),
    /// Fit labelled planes and flag occluded points.
    Occlusion(CommonArgs),
    /// Export the image-by-image match-count matrix from a database.
    MatchMatrix {
        #[command(flatten)]
        common: CommonArgs,
        /// COLMAP SQLite database.
        #[arg(long)]
        database: Option<PathBuf>,
        /// Table to count: matches or two-view-geometries.
        #[arg(long)]
        source: Option<String>,
    },
    /// Full chain: label, motion filter, consistency filter, planes, occlusion.
    Pipeline(CommonArgs),
}

/// Merged, validated configuration of a run.
#[derive(Debug)]
struct PipelineConfig {
    model_dir: Option<PathBuf>,
    format: Format,
    labels_dir: Option<PathBuf>,
    label_scale: f64,
    table: ClassTable,
    policy: MissingMapPolicy,
    motion_policy: MotionPolicy,
    min_track: u32,
    eps: f64,
    trials: u64,
    seed: u64,
    min_inliers: usize,
    cluster_dist: f64,
    plane_classes: Option<Vec<String>>,
    planes_file: Option<PathBuf>,
    depth_margin: Option<f64>,
    extent_margin: Option<f64>,
    aggregation: f64,
    out: Option<PathBuf>,
    /// Echo of the merged key=value map for provenance.
    echo: BTreeMap<String, String>,
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| input(format!("config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            input(format!(
                "config {}:{}: expected key=value, got {line:?}",
                path.display(),
                idx + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn merge_args(map: &mut BTreeMap<String, String>, args: &CommonArgs) {
    let mut set = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    };
    set("model_dir", args.model_dir.as_ref().map(|p| p.display().to_string()));
    set("format", args.format.clone());
    set("labels_dir", args.labels_dir.as_ref().map(|p| p.display().to_string()));
    set("label_scale", args.label_scale.map(|v| v.to_string()));
    set("class_table", args.class_table.as_ref().map(|p| p.display().to_string()));
    set("policy", args.policy.clone());
    set("motion_policy", args.motion_policy.clone());
    set("min_track", args.min_track.map(|v| v.to_string()));
    set("eps", args.eps.map(|v| v.to_string()));
    set("trials", args.trials.map(|v| v.to_string()));
    set("seed", args.seed.map(|v| v.to_string()));
    set("min_inliers", args.min_inliers.map(|v| v.to_string()));
    set("cluster_dist", args.cluster_dist.map(|v| v.to_string()));
    set("plane_classes", args.plane_classes.clone());
    set("planes_file", args.planes.as_ref().map(|p| p.display().to_string()));
    set("depth_margin", args.depth_margin.map(|v| v.to_string()));
    set("extent_margin", args.extent_margin.map(|v| v.to_string()));
    set("aggregation", args.aggregation.map(|v| v.to_string()));
    set("out", args.out.as_ref().map(|p| p.display().to_string()));
}

fn parse_key<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, CliError> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| input(format!("invalid value for {key}: {raw:?}"))),
    }
}

impl PipelineConfig {
    fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let mut map = match &args.config {
            Some(path) => parse_config_file(path)?,
            None => BTreeMap::new(),
        };
        merge_args(&mut map, args);

        let format = match map.get("format").map(String::as_str) {
            None | Some("auto") => Format::Auto,
            Some("text") => Format::Text,
            Some("binary") => Format::Binary,
            Some(other) => return Err(input(format!("unknown format {other:?}"))),
        };
        let policy = match map.get("policy").map(String::as_str) {
            None | Some("strict") => MissingMapPolicy::Strict,
            Some("unknown") => MissingMapPolicy::Unknown,
            Some(other) => return Err(input(format!("unknown policy {other:?}"))),
        };
        let motion_policy = match map.get("motion_policy").map(String::as_str) {
            None | Some("majority") => MotionPolicy::Majority,
            Some("any") => MotionPolicy::Any,
            Some(other) => return Err(input(format!("unknown motion policy {other:?}"))),
        };
        let table = match map.get("class_table") {
            Some(path) => {
                let path = PathBuf::from(path);
                ClassTable::from_file(&path).map_err(input)?
            }
            None => ClassTable::cityscapes(),
        };
        let model_dir = map.get("model_dir").map(PathBuf::from);
        if let Some(dir) = &model_dir {
            if !dir.is_dir() {
                return Err(input(format!("model directory {} does not exist", dir.display())));
            }
        }
        let labels_dir = map.get("labels_dir").map(PathBuf::from);
        if let Some(dir) = &labels_dir {
            if !dir.is_dir() {
                return Err(input(format!("labels directory {} does not exist", dir.display())));
            }
        }
        let planes_file = map.get("planes_file").map(PathBuf::from);
        if let Some(file) = &planes_file {
            if !file.is_file() {
                return Err(input(format!("plane file {} does not exist", file.display())));
            }
        }

        let config = PipelineConfig {
            model_dir,
            format,
            labels_dir,
            label_scale: parse_key(&map, "label_scale")?.unwrap_or(1.0),
            table,
            policy,
            motion_policy,
            min_track: parse_key(&map, "min_track")?.unwrap_or(2),
            eps: parse_key(&map, "eps")?.unwrap_or(0.05),
            trials: parse_key(&map, "trials")?.unwrap_or(256),
            seed: parse_key(&map, "seed")?.unwrap_or(0),
            min_inliers: parse_key(&map, "min_inliers")?.unwrap_or(10),
            cluster_dist: parse_key(&map, "cluster_dist")?.unwrap_or(1.0),
            plane_classes: map
                .get("plane_classes")
                .map(|s| s.split(',').map(|c| c.trim().to_string()).collect()),
            planes_file,
            depth_margin: parse_key(&map, "depth_margin")?,
            extent_margin: parse_key(&map, "extent_margin")?,
            aggregation: parse_key(&map, "aggregation")?.unwrap_or(0.5),
            out: map.get("out").map(PathBuf::from),
            echo: map,
        };
        for (name, value, minimum) in [
            ("label_scale", config.label_scale, f64::MIN_POSITIVE),
            ("eps", config.eps, f64::MIN_POSITIVE),
            ("cluster_dist", config.cluster_dist, f64::MIN_POSITIVE),
            ("aggregation", config.aggregation, f64::MIN_POSITIVE),
        ] {
            if !(value >= minimum) {
                return Err(input(format!("{name} must be positive, got {value}")));
            }
        }
        if config.aggregation > 1.0 {
            return Err(input(format!(
                "aggregation must be in (0, 1], got {}",
                config.aggregation
            )));
        }
        if config.min_track < 1 {
            return Err(input("min_track must be at least 1"));
        }
        if config.trials < 1 {
            return Err(input("trials must be at least 1"));
        }
        Ok(config)
    }

    fn model_dir(&self) -> Result<&Path, CliError> {
        self.model_dir
            .as_deref()
            .ok_or_else(|| input("--model-dir is required"))
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| input("--out is required"))
    }

    fn provenance(&self) -> Provenance {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs().to_string())
            .ok();
        Provenance {
            config: self.echo.clone(),
            seed: self.seed,
            timestamp,
        }
    }

    fn load_model(&self) -> Result<crate::model_io::SparseModel, CliError> {
        load_model(self.model_dir()?, self.format).map_err(input)
    }

    fn load_labels(&self) -> Result<BTreeMap<String, LabelMap>, CliError> {
        let dir = self
            .labels_dir
            .as_deref()
            .ok_or_else(|| input("--labels-dir is required"))?;
        let mut maps = BTreeMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| input(format!("labels directory {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("pgm") | Some("png")
                )
            })
            .collect();
        entries.sort();
        for path in entries {
            let map = load_label_map(&path, &self.table).map_err(input)?;
            maps.insert(map.name.clone(), map);
        }
        if maps.is_empty() {
            return Err(input(format!(
                "labels directory {} holds no .pgm or .png rasters",
                dir.display()
            )));
        }
        Ok(maps)
    }

    fn label_options(&self) -> LabelOptions {
        LabelOptions {
            scale: self.label_scale,
            policy: self.policy,
        }
    }

    fn label(
        &self,
        model: &crate::model_io::SparseModel,
    ) -> Result<Vec<LabeledObservation>, CliError> {
        let maps = self.load_labels()?;
        label_model(model, &maps, &self.label_options()).map_err(input)
    }

    fn plane_class_ids(&self) -> Result<Vec<u8>, CliError> {
        match &self.plane_classes {
            Some(names) => names
                .iter()
                .map(|name| {
                    self.table
                        .id_by_name(name)
                        .ok_or_else(|| input(format!("unknown plane class {name:?}")))
                })
                .collect(),
            None => Ok(self.table.opaque_ids()),
        }
    }

    fn obtain_planes(
        &self,
        model: &crate::model_io::SparseModel,
        observations: &[LabeledObservation],
    ) -> Result<Vec<LabeledPlane>, CliError> {
        if let Some(file) = &self.planes_file {
            return load_plane_file(file).map_err(input);
        }
        let opts = PlaneExtractionOptions {
            eps: self.eps,
            min_inliers: self.min_inliers,
            classes: self.plane_class_ids()?,
            cluster_dist: self.cluster_dist,
            trials: self.trials,
            seed: self.seed,
        };
        extract_semantic_planes(model, observations, &self.table, &opts).map_err(input)
    }

    fn occlusion_options(&self) -> OcclusionOptions {
        OcclusionOptions {
            depth_margin: self.depth_margin,
            extent_margin: self.extent_margin,
            aggregation_threshold: self.aggregation,
        }
    }
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| internal(format!("creating {}: {e}", dir.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content).map_err(|e| internal(format!("writing {}: {e}", path.display())))
}

fn verdicts_csv(verdicts: &[OcclusionVerdict]) -> String {
    let mut out = String::from("point3d_id,image_id,status,plane_id,d\n");
    for v in verdicts {
        let status = match v.status {
            OcclusionStatus::Valid => "valid",
            OcclusionStatus::Occluded => "occluded",
        };
        let plane = v.blocking_plane.map(|i| i.to_string()).unwrap_or_default();
        let d = v.d.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", v.point3d_id, v.image_id, status, plane, d);
    }
    out
}

fn occlusion_summary(
    planes: &[LabeledPlane],
    verdicts: &[OcclusionVerdict],
    report: &crate::filters::FilterReport,
    aggregation: f64,
) -> OcclusionSummary {
    OcclusionSummary {
        planes: planes.len() as u64,
        opaque_planes: planes.iter().filter(|p| p.opaque).count() as u64,
        rays_checked: verdicts.len() as u64,
        rays_occluded: verdicts
            .iter()
            .filter(|v| v.status == OcclusionStatus::Occluded)
            .count() as u64,
        points_flagged: report.violation_points,
        aggregation_threshold: aggregation,
    }
}

fn flagged_points(
    verdicts: &[OcclusionVerdict],
    aggregation: f64,
) -> BTreeSet<crate::model_io::Point3dId> {
    let mut per_point: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for v in verdicts {
        let e = per_point.entry(v.point3d_id).or_insert((0, 0));
        e.1 += 1;
        if v.status == OcclusionStatus::Occluded {
            e.0 += 1;
        }
    }
    per_point
        .into_iter()
        .filter(|(_, (occ, total))| *total > 0 && (*occ as f64 / *total as f64) >= aggregation)
        .map(|(pid, _)| pid)
        .collect()
}

fn cmd_stats(config: &PipelineConfig) -> Result<(), CliError> {
    let model = config.load_model()?;
    let stats = mean_reprojection_stats(&model).map_err(input)?;
    let mut report = ValidationReport::new(config.provenance());
    report.initial_stats = Some(stats);
    print!("{}", render_report(&report, ReportFormat::Text));
    if let Some(out) = &config.out {
        ensure_out(out)?;
        write_file(&out.join("report.json"), &render_report(&report, ReportFormat::Json))?;
    }
    Ok(())
}

fn cmd_label(config: &PipelineConfig) -> Result<(), CliError> {
    let model = config.load_model()?;
    let observations = config.label(&model)?;
    let mut histogram: BTreeMap<u8, u64> = BTreeMap::new();
    for obs in &observations {
        *histogram.entry(obs.class_id).or_default() += 1;
    }
    println!("Labelled {} observations across {} classes", observations.len(), histogram.len());
    for (class_id, count) in &histogram {
        let name = config.table.name_of(*class_id).unwrap_or("?");
        println!("{class_id:>4}  {name:<24} {count:>10}");
    }
    if let Some(out) = &config.out {
        ensure_out(out)?;
        let mut buf = Vec::new();
        export_labeled_csv(&observations, &model, &config.table, &mut buf).map_err(internal)?;
        std::fs::write(out.join("labeled_points.csv"), buf)
            .map_err(|e| internal(format!("writing labeled_points.csv: {e}")))?;
    }
    Ok(())
}

fn cmd_export_csv(config: &PipelineConfig) -> Result<(), CliError> {
    let model = config.load_model()?;
    let observations = config.label(&model)?;
    let mut buf = Vec::new();
    export_labeled_csv(&observations, &model, &config.table, &mut buf).map_err(internal)?;
    match &config.out {
        Some(out) => {
            ensure_out(out)?;
            std::fs::write(out.join("labeled_points.csv"), buf)
                .map_err(|e| internal(format!("writing labeled_points.csv: {e}")))?;
        }
        None => {
            let text = String::from_utf8(buf).map_err(internal)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn cmd_single_filter(config: &PipelineConfig, stage: StageKind) -> Result<(), CliError> {
    let model = config.load_model()?;
    let observations = config.label(&model)?;
    let coverage = match config.policy {
        MissingMapPolicy::Strict => CoveragePolicy::Strict,
        MissingMapPolicy::Unknown => CoveragePolicy::Unknown,
    };
    let (filtered, stage_report) = match stage {
        StageKind::MotionFilter => motion_filter_with(
            &model,
            &observations,
            &config.table,
            config.motion_policy,
            coverage,
        )
        .map_err(input)?,
        StageKind::ConsistencyFilter => consistency_filter(
            &model,
            &observations,
            &ConsistencyOptions {
                min_track: config.min_track,
                coverage,
            },
        )
        .map_err(input)?,
        StageKind::Occlusion => unreachable!("occlusion has its own command"),
    };
    let mut report = ValidationReport::new(config.provenance());
    report.initial_stats = Some(mean_reprojection_stats(&model).map_err(input)?);
    report.stages.push(StageReport {
        stage,
        report: stage_report,
    });
    report.final_stats = Some(mean_reprojection_stats(&filtered).map_err(internal)?);
    report.check_arithmetic().map_err(internal)?;

    print!("{}", render_report(&report, ReportFormat::Text));
    let out = config.out_dir()?;
    ensure_out(out)?;
    write_model_text(&filtered, &out.join("model")).map_err(internal)?;
    write_file(&out.join("report.txt"), &render_report(&report, ReportFormat::Text))?;
    write_file(&out.join("report.json"), &render_report(&report, ReportFormat::Json))?;
    Ok(())
}

fn cmd_occlusion(config: &PipelineConfig) -> Result<(), CliError> {
    let model = config.load_model()?;
    let observations = config.label(&model)?;
    let planes = config.obtain_planes(&model, &observations)?;
    let (verdicts, stage_report) =
        occlusion_validate(&model, &planes, &config.occlusion_options()).map_err(input)?;

    let mut report = ValidationReport::new(config.provenance());
    report.initial_stats = Some(mean_reprojection_stats(&model).map_err(input)?);
    report.occlusion = Some(occlusion_summary(&planes, &verdicts, &stage_report, config.aggregation));
    report.stages.push(StageReport {
        stage: StageKind::Occlusion,
        report: stage_report,
    });
    report.check_arithmetic().map_err(internal)?;

    print!("{}", render_report(&report, ReportFormat::Text));
    let out = config.out_dir()?;
    ensure_out(out)?;
    write_plane_file(&planes, &out.join("planes.txt")).map_err(internal)?;
    write_file(&out.join("occlusion_verdicts.csv"), &verdicts_csv(&verdicts))?;
    write_file(&out.join("report.txt"), &render_report(&report, ReportFormat::Text))?;
    write_file(&out.join("report.json"), &render_report(&report, ReportFormat::Json))?;
    let flagged = flagged_points(&verdicts, config.aggregation);
    let mut ply = Vec::new();
    write_ply(&model, &flagged, &mut ply).map_err(internal)?;
    std::fs::write(out.join("points.ply"), ply)
        .map_err(|e| internal(format!("writing points.ply: {e}")))?;
    Ok(())
}

fn cmd_match_matrix(
    config: &PipelineConfig,
    database: Option<&Path>,
    source: Option<&str>,
) -> Result<(), CliError> {
    let db = database.ok_or_else(|| input("--database is required"))?;
    let source = match source {
        None | Some("matches") => MatchSource::Matches,
        Some("two-view-geometries") => MatchSource::TwoViewGeometries,
        Some(other) => return Err(input(format!("unknown source {other:?}"))),
    };
    let matrix = load_match_matrix(db, source).map_err(input)?;
    let mut buf = Vec::new();
    matrix.write_csv(&mut buf).map_err(internal)?;
    match &config.out {
        Some(out) => {
            ensure_out(out)?;
            std::fs::write(out.join("match_matrix.csv"), buf)
                .map_err(|e| internal(format!("writing match_matrix.csv: {e}")))?;
        }
        None => print!("{}", String::from_utf8(buf).map_err(internal)?),
    }
    Ok(())
}

fn cmd_pipeline(config: &PipelineConfig) -> Result<(), CliError> {
    let model = config.load_model()?;
    let observations = config.label(&model)?;
    let coverage = match config.policy {
        MissingMapPolicy::Strict => CoveragePolicy::Strict,
        MissingMapPolicy::Unknown => CoveragePolicy::Unknown,
    };

    let mut report = ValidationReport::new(config.provenance());
    report.initial_stats = Some(mean_reprojection_stats(&model).map_err(input)?);

    // Motion removal first, then semantic consistency.
    let (after_motion, motion_report) = motion_filter_with(
        &model,
        &observations,
        &config.table,
        config.motion_policy,
        coverage,
    )
    .map_err(input)?;
    report.stages.push(StageReport {
        stage: StageKind::MotionFilter,
        report: motion_report,
    });
    let observations = retain_observations(&observations, &after_motion);

    let (filtered, consistency_report) = consistency_filter(
        &after_motion,
        &observations,
        &ConsistencyOptions {
            min_track: config.min_track,
            coverage,
        },
    )
    .map_err(input)?;
    report.stages.push(StageReport {
        stage: StageKind::ConsistencyFilter,
        report: consistency_report,
    });
    let observations = retain_observations(&observations, &filtered);

    let planes = config.obtain_planes(&filtered, &observations)?;
    let (verdicts, occlusion_report) =
        occlusion_validate(&filtered, &planes, &config.occlusion_options()).map_err(internal)?;
    report.occlusion = Some(occlusion_summary(
        &planes,
        &verdicts,
        &occlusion_report,
        config.aggregation,
    ));
    report.stages.push(StageReport {
        stage: StageKind::Occlusion,
        report: occlusion_report,
    });
    report.final_stats = Some(mean_reprojection_stats(&filtered).map_err(internal)?);
    report.check_arithmetic().map_err(internal)?;

    print!("{}", render_report(&report, ReportFormat::Text));
    let out = config.out_dir()?;
    ensure_out(out)?;
    write_model_text(&filtered, &out.join("model")).map_err(internal)?;
    let mut csv = Vec::new();
    export_labeled_csv(&observations, &filtered, &config.table, &mut csv).map_err(internal)?;
    std::fs::write(out.join("labeled_points.csv"), csv)
        .map_err(|e| internal(format!("writing labeled_points.csv: {e}")))?;
    write_plane_file(&planes, &out.join("planes.txt")).map_err(internal)?;
    write_file(&out.join("occlusion_verdicts.csv"), &verdicts_csv(&verdicts))?;
    write_file(&out.join("report.txt"), &render_report(&report, ReportFormat::Text))?;
    write_file(&out.join("report.json"), &render_report(&report, ReportFormat::Json))?;
    let flagged = flagged_points(&verdicts, config.aggregation);
    let mut ply = Vec::new();
    write_ply(&filtered, &flagged, &mut ply).map_err(internal)?;
    std::fs::write(out.join("points.ply"), ply)
        .map_err(|e| internal(format!("writing points.ply: {e}")))?;
    Ok(())
}

struct StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, metadata: &log::Metadata) -> bool {
        metadata.level() <= log::Level::Warn
    }

    fn log(&self, record: &log::Record) {
        if self.enabled(record.metadata()) {
            eprintln!("[{}] {}", record.level(), record.args());
        }
    }

    fn flush(&self) {}
}

fn init_runtime() {
    static LOGGER: StderrLogger = StderrLogger;
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(log::LevelFilter::Warn));
    if let Ok(threads) = std::env::var("SFMSEMVAL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        } else {
            eprintln!("ignoring invalid SFMSEMVAL_THREADS={threads:?}");
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Stats(args) => cmd_stats(&PipelineConfig::resolve(args)?),
        Command::Label(args) => cmd_label(&PipelineConfig::resolve(args)?),
        Command::ExportCsv(args) => cmd_export_csv(&PipelineConfig::resolve(args)?),
        Command::MotionFilter(args) => {
            cmd_single_filter(&PipelineConfig::resolve(args)?, StageKind::MotionFilter)
        }
        Command::ConsistencyFilter(args) => {
            cmd_single_filter(&PipelineConfig::resolve(args)?, StageKind::ConsistencyFilter)
        }
        Command::Occlusion(args) => cmd_occlusion(&PipelineConfig::resolve(args)?),
        Command::MatchMatrix {
            common,
            database,
            source,
        } => cmd_match_matrix(
            &PipelineConfig::resolve(common)?,
            database.as_deref(),
            source.as_deref(),
        ),
        Command::Pipeline(args) => cmd_pipeline(&PipelineConfig::resolve(args)?),
    }
}

/// Runs the CLI on explicit arguments; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    init_runtime();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; they are not failures.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// Runs the CLI on `std::env::args`.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parses_and_flags_override() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        std::fs::write(&cfg, "# run\nseed=7\nmin_track=3\neps=0.25\n").unwrap();
        let args = CommonArgs {
            config: Some(cfg),
            seed: Some(9),
            ..Default::default()
        };
        let config = PipelineConfig::resolve(&args).unwrap();
        assert_eq!(config.seed, 9); // flag wins
        assert_eq!(config.min_track, 3);
        assert_eq!(config.eps, 0.25);
        assert_eq!(config.echo["seed"], "9");
    }

    #[test]
    fn invalid_values_are_input_errors() {
        let args = CommonArgs {
            eps: Some(-1.0),
            ..Default::default()
        };
        let err = PipelineConfig::resolve(&args).unwrap_err();
        assert_eq!(err.exit_code(), 1);

        let args = CommonArgs {
            model_dir: Some(PathBuf::from("/definitely/not/here")),
            ..Default::default()
        };
        let err = PipelineConfig::resolve(&args).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn plane_classes_default_to_opaque_set() {
        let config = PipelineConfig::resolve(&CommonArgs::default()).unwrap();
        let ids = config.plane_class_ids().unwrap();
        assert_eq!(ids, config.table.opaque_ids());
        let named = CommonArgs {
            plane_classes: Some("building,wall".to_string()),
            ..Default::default()
        };
        let config = PipelineConfig::resolve(&named).unwrap();
        assert_eq!(config.plane_class_ids().unwrap(), vec![11, 12]);
        let bad = CommonArgs {
            plane_classes: Some("warp-core".to_string()),
            ..Default::default()
        };
        let config = PipelineConfig::resolve(&bad).unwrap();
        assert!(config.plane_class_ids().is_err());
    }

    #[test]
    fn unknown_command_exits_one() {
        assert_eq!(run_from(["sfm-semval", "no-such-command"]), 1);
        assert_eq!(run_from(["sfm-semval", "--help"]), 0);
    }
}
