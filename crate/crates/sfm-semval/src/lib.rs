//! Validation and correction of structure-from-motion sparse reconstructions
//! using per-pixel semantic labels.
//!
//! The crate ingests a COLMAP sparse model (text or binary), attaches a
//! semantic class to every 2D observation from per-image label rasters, and
//! then enforces semantic priors on the 3D points:
//!
//! * [`filters::consistency_filter`] prunes observations that disagree with
//!   the majority label of their track and drops points whose track becomes
//!   too short.
//! * [`filters::motion_filter`] removes points dominated by classes
//!   associated with motion (people, vehicles, sky, ...).
//! * [`planes::occlusion_validate`] fits labelled planes to the cloud and
//!   flags points whose viewing rays pass through an opaque plane.
//!
//! A self-contained two-view-geometry ([`two_view`]) and bundle-adjustment
//! ([`bundle`]) core is included for synthetic-scene verification of the
//! underlying math.
//!
//! Each major capability has a runnable demo under `examples/`; the `sfm-semval`
//! binary exposes the same stages as subcommands (see [`cli`]).

pub mod bundle;
pub mod camera;
pub mod cli;
pub mod filters;
pub mod model_io;
pub mod planes;
pub mod report;
pub mod semantics;
pub mod synthetic;
pub mod two_view;

pub use camera::{Pose, Rotation, Stats};
pub use filters::FilterReport;
pub use model_io::{CameraIntrinsics, ImageRecord, MatchMatrix, Point3D, SparseModel};
pub use report::ValidationReport;
pub use semantics::{ClassTable, LabelMap, LabeledObservation};
