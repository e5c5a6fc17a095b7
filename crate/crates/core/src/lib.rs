//! Post-detection processing for aerial highway recordings.
//!
//! The pipeline turns per-frame vehicle detections into smoothed tracks,
//! derives surround metrics (DHW/THW/TTC), labels maneuvers, fits a
//! polynomial lane-change model and aggregates dataset statistics. A
//! synthetic scene generator provides exact ground truth for every stage.

pub mod dataset;
pub mod error;
pub mod fmt;
pub mod kinematics;
pub mod lane_change;
pub mod maneuvers;
pub mod model;
pub mod pipeline;
pub mod stats;
pub mod surround;
pub mod synth;
pub mod tracker;

pub use error::ContractViolation;
pub use model::{
    ahead_of, lane_id_of, Detection, DrivingDirection, KinematicState, LaneAssignment,
    RecordingMeta, SpeedLimit, Track, VehicleClass,
};
