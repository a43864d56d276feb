//! Track-level semantic filters.
//!
//! The consistency filter prunes observations that disagree with the
//! majority label of their point's track and deletes points whose track
//! falls below the minimum length. The motion filter deletes points
//! dominated by (or touching, under the `any` policy) classes flagged as
//! dynamic. Both rewrite the model without renumbering: removed links are
//! nulled in the image records, keeping keypoint indices aligned with the
//! reconstruction database.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{mean_reprojection_stats, GeometryError, Stats};
use crate::model_io::{ImageId, ModelIoError, Point3dId, SparseModel};
use crate::semantics::{ClassTable, LabeledObservation, UNKNOWN_CLASS_ID};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("majority of an empty label set is undefined")]
    EmptyLabels,

    #[error("min_track must be at least 1, got {0}")]
    InvalidMinTrack(u32),

    #[error("no label for observation ({image_id}, {point2d_idx}) of point {point3d_id}")]
    MissingObservationLabel {
        image_id: ImageId,
        point2d_idx: u32,
        point3d_id: Point3dId,
    },

    #[error("duplicate label for observation ({image_id}, {point2d_idx})")]
    DuplicateObservationLabel { image_id: ImageId, point2d_idx: u32 },

    #[error(transparent)]
    Model(#[from] ModelIoError),

    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Before/after accounting of one filter stage.
///
/// `violation_points` is the number of points the stage deleted;
/// `observations_removed + observations_after = observations_before`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub points_before: u64,
    pub points_after: u64,
    pub violation_points: u64,
    pub observations_before: u64,
    pub observations_after: u64,
    pub observations_removed: u64,
    pub mean_track_length_before: Option<f64>,
    pub mean_track_length_after: Option<f64>,
}

impl FilterReport {
    /// Derives the removal tallies and means of one stage from its raw
    /// before/after counts.
    pub fn from_stage_counts(
        points_before: u64,
        obs_before: u64,
        points_after: u64,
        obs_after: u64,
    ) -> Self {
        FilterReport {
            points_before,
            points_after,
            violation_points: points_before - points_after,
            observations_before: obs_before,
            observations_after: obs_after,
            observations_removed: obs_before - obs_after,
            mean_track_length_before: (points_before > 0)
                .then(|| obs_before as f64 / points_before as f64),
            mean_track_length_after: (points_after > 0)
                .then(|| obs_after as f64 / points_after as f64),
        }
    }

    /// Arithmetic identities that must hold for any stage.
    pub fn check(&self) -> Result<(), String> {
        if self.points_before != self.points_after + self.violation_points {
            return Err(format!(
                "points: {} != {} + {}",
                self.points_before, self.points_after, self.violation_points
            ));
        }
        if self.observations_before != self.observations_after + self.observations_removed {
            return Err(format!(
                "observations: {} != {} + {}",
                self.observations_before, self.observations_after, self.observations_removed
            ));
        }
        Ok(())
    }
}

/// Most common label; ties break to the smallest class id.
pub fn majority_label(labels: &[u8]) -> Result<(u8, usize), FilterError> {
    if labels.is_empty() {
        return Err(FilterError::EmptyLabels);
    }
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    // BTreeMap iterates ids ascending, so `>` keeps the smallest on ties.
    let (winner, count) = counts
        .into_iter()
        .fold((0u8, 0usize), |best, (id, n)| if n > best.1 { (id, n) } else { best });
    Ok((winner, count))
}

/// How uncovered observations are treated by the filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoveragePolicy {
    /// Every linked observation must carry a label.
    #[default]
    Strict,
    /// Uncovered observations count as [`UNKNOWN_CLASS_ID`].
    Unknown,
}

/// Label lookup keyed by (image, keypoint index).
struct LabelIndex {
    map: HashMap<(ImageId, u32), u8>,
    policy: CoveragePolicy,
}

impl LabelIndex {
    fn build(
        observations: &[LabeledObservation],
        policy: CoveragePolicy,
    ) -> Result<Self, FilterError> {
        let mut map = HashMap::with_capacity(observations.len());
        for obs in observations {
            if map.insert((obs.image_id, obs.point2d_idx), obs.class_id).is_some() {
                return Err(FilterError::DuplicateObservationLabel {
                    image_id: obs.image_id,
                    point2d_idx: obs.point2d_idx,
                });
            }
        }
        Ok(LabelIndex { map, policy })
    }

    fn get(&self, image_id: ImageId, point2d_idx: u32, point3d_id: Point3dId) -> Result<u8, FilterError> {
        match self.map.get(&(image_id, point2d_idx)) {
            Some(&id) => Ok(id),
            None => match self.policy {
                CoveragePolicy::Strict => Err(FilterError::MissingObservationLabel {
                    image_id,
                    point2d_idx,
                    point3d_id,
                }),
                CoveragePolicy::Unknown => Ok(UNKNOWN_CLASS_ID),
            },
        }
    }
}

fn unlink(model: &mut SparseModel, image_id: ImageId, point2d_idx: u32) {
    model.images.get_mut(&image_id).expect("image exists").points2d[point2d_idx as usize]
        .point3d_id = None;
}

#[derive(Debug, Clone)]
pub struct ConsistencyOptions {
    /// Points with fewer surviving observations are deleted entirely.
    pub min_track: u32,
    pub coverage: CoveragePolicy,
}

impl Default for ConsistencyOptions {
    fn default() -> Self {
        ConsistencyOptions {
            min_track: 2,
            coverage: CoveragePolicy::Strict,
        }
    }
}

/// Enforces semantic consistency across every track.
///
/// Per point: observations whose label differs from the track's majority
/// label are unlinked; if fewer than `min_track` observations remain the
/// point is deleted. The returned model is referentially intact.
pub fn consistency_filter(
    model: &SparseModel,
    observations: &[LabeledObservation],
    opts: &ConsistencyOptions,
) -> Result<(SparseModel, FilterReport), FilterError> {
    if opts.min_track < 1 {
        return Err(FilterError::InvalidMinTrack(opts.min_track));
    }
    model.check_integrity()?;
    let labels = LabelIndex::build(observations, opts.coverage)?;
    let points_before = model.points.len() as u64;
    let obs_before = model.observation_count();

    let mut out = model.clone();
    let point_ids: Vec<Point3dId> = out.points.keys().copied().collect();
    for pid in point_ids {
        let point = &out.points[&pid];
        let mut track_labels = Vec::with_capacity(point.track.len());
        for el in &point.track {
            track_labels.push(labels.get(el.image_id, el.point2d_idx, pid)?);
        }
        let (winner, _) = majority_label(&track_labels)?;
        let track = point.track.clone();
        let keep: Vec<bool> = track_labels.iter().map(|&l| l == winner).collect();
        let kept = keep.iter().filter(|k| **k).count();
        if kept < opts.min_track as usize {
            // Delete the whole point.
            for el in &track {
                unlink(&mut out, el.image_id, el.point2d_idx);
            }
            out.points.remove(&pid);
        } else {
            for (el, keep) in track.iter().zip(&keep) {
                if !keep {
                    unlink(&mut out, el.image_id, el.point2d_idx);
                }
            }
            let point = out.points.get_mut(&pid).unwrap();
            point.track = track
                .into_iter()
                .zip(keep)
                .filter_map(|(el, k)| k.then_some(el))
                .collect();
        }
    }
    debug_assert!(out.check_integrity().is_ok());
    let report = FilterReport::from_stage_counts(
        points_before,
        obs_before,
        out.points.len() as u64,
        out.observation_count(),
    );
    Ok((out, report))
}

/// When a point counts as dynamic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MotionPolicy {
    /// Its majority label is a dynamic class.
    #[default]
    Majority,
    /// Any observation carries a dynamic class.
    Any,
}

/// Removes points associated with motion.
///
/// A deleted point's observations are all unlinked; surviving points keep
/// their full track.
pub fn motion_filter(
    model: &SparseModel,
    observations: &[LabeledObservation],
    table: &ClassTable,
    policy: MotionPolicy,
) -> Result<(SparseModel, FilterReport), FilterError> {
    motion_filter_with(model, observations, table, policy, CoveragePolicy::Strict)
}

pub fn motion_filter_with(
    model: &SparseModel,
    observations: &[LabeledObservation],
    table: &ClassTable,
    policy: MotionPolicy,
    coverage: CoveragePolicy,
) -> Result<(SparseModel, FilterReport), FilterError> {
    model.check_integrity()?;
    let labels = LabelIndex::build(observations, coverage)?;
    let is_dynamic =
        |id: u8| table.get(id).map(|e| e.dynamic).unwrap_or(false);
    let points_before = model.points.len() as u64;
    let obs_before = model.observation_count();

    let mut out = model.clone();
    let point_ids: Vec<Point3dId> = out.points.keys().copied().collect();
    for pid in point_ids {
        let point = &out.points[&pid];
        let mut track_labels = Vec::with_capacity(point.track.len());
        for el in &point.track {
            track_labels.push(labels.get(el.image_id, el.point2d_idx, pid)?);
        }
        let remove = match policy {
            MotionPolicy::Majority => is_dynamic(majority_label(&track_labels)?.0),
            MotionPolicy::Any => track_labels.iter().any(|&l| is_dynamic(l)),
        };
        if remove {
            let track = point.track.clone();
            for el in &track {
                unlink(&mut out, el.image_id, el.point2d_idx);
            }
            out.points.remove(&pid);
        }
    }
    debug_assert!(out.check_integrity().is_ok());
    let report = FilterReport::from_stage_counts(
        points_before,
        obs_before,
        out.points.len() as u64,
        out.observation_count(),
    );
    Ok((out, report))
}

/// Keeps the observations that still link into `model` (use between
/// pipeline stages, where a filter may have unlinked some of them).
pub fn retain_observations(
    observations: &[LabeledObservation],
    model: &SparseModel,
) -> Vec<LabeledObservation> {
    observations
        .iter()
        .filter(|obs| {
            model
                .images
                .get(&obs.image_id)
                .and_then(|img| img.points2d.get(obs.point2d_idx as usize))
                .map(|p2d| p2d.point3d_id == Some(obs.point3d_id))
                .unwrap_or(false)
        })
        .copied()
        .collect()
}

/// Exhaustive matching workload: `n(n−1)/2` image pairs.
pub fn exhaustive_pair_count(n: u64) -> u64 {
    ((n as u128) * (n as u128 - n.min(1) as u128) / 2) as u64
}

/// Model statistics (counts, means, reprojection error).
pub fn model_stats(model: &SparseModel) -> Result<Stats, FilterError> {
    Ok(mean_reprojection_stats(model)?)
}
