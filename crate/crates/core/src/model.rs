//! Shared domain types, units and coordinate conventions.
//!
//! Units are SI throughout (meters, seconds, m/s, m/s²). The road-aligned
//! frame has `x` along the carriageway and `y` lateral, right-handed: `+y`
//! is to the left of a driver travelling towards `+x`. Positions are
//! bounding-box centers.
//!
//! Lane markings of one carriageway are listed in ascending `y`; lane `k`
//! (1-based) is the half-open interval `[markings[k-1], markings[k])`.

use serde::{Deserialize, Serialize};

use crate::error::ContractViolation;

/// Default ground footprint of one image pixel, meters.
pub const DEFAULT_PIXEL_SIZE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VehicleClass {
    Car,
    Truck,
}

impl VehicleClass {
    pub fn as_str(self) -> &'static str {
        match self {
            VehicleClass::Car => "Car",
            VehicleClass::Truck => "Truck",
        }
    }
}

impl std::str::FromStr for VehicleClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Car" => Ok(VehicleClass::Car),
            "Truck" => Ok(VehicleClass::Truck),
            other => Err(format!("unknown vehicle class {other:?}")),
        }
    }
}

/// Carriageway, which fixes the direction of travel.
///
/// Vehicles on the upper carriageway travel towards `-x`, vehicles on the
/// lower carriageway towards `+x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DrivingDirection {
    UpperCarriageway,
    LowerCarriageway,
}

impl DrivingDirection {
    /// Sign of longitudinal travel along `x`.
    pub fn sign(self) -> f64 {
        match self {
            DrivingDirection::UpperCarriageway => -1.0,
            DrivingDirection::LowerCarriageway => 1.0,
        }
    }

    /// File code: 1 = upper, 2 = lower.
    pub fn code(self) -> u8 {
        match self {
            DrivingDirection::UpperCarriageway => 1,
            DrivingDirection::LowerCarriageway => 2,
        }
    }

    pub fn from_code(code: i64) -> Option<Self> {
        match code {
            1 => Some(DrivingDirection::UpperCarriageway),
            2 => Some(DrivingDirection::LowerCarriageway),
            _ => None,
        }
    }

    /// Lane id change that moves one lane to the driver's left.
    ///
    /// Left is `+y` when travelling towards `+x` and `-y` otherwise.
    pub fn left_step(self) -> i32 {
        match self {
            DrivingDirection::LowerCarriageway => 1,
            DrivingDirection::UpperCarriageway => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpeedLimit {
    Limited(f64),
    Unlimited,
}

impl SpeedLimit {
    /// File encoding: speed in m/s, `-1` for unlimited.
    pub fn to_file_value(self) -> f64 {
        match self {
            SpeedLimit::Limited(v) => v,
            SpeedLimit::Unlimited => -1.0,
        }
    }

    pub fn from_file_value(v: f64) -> Self {
        if v == -1.0 {
            SpeedLimit::Unlimited
        } else {
            SpeedLimit::Limited(v)
        }
    }
}

/// Site geometry and timing of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub recording_id: u32,
    pub location_id: u32,
    pub frame_rate: f64,
    pub duration: f64,
    pub upper_lane_markings: Vec<f64>,
    pub lower_lane_markings: Vec<f64>,
    /// Upper carriageway lanes first, then lower, each in lane-id order.
    pub speed_limits: Vec<SpeedLimit>,
    pub pixel_size: f64,
}

impl RecordingMeta {
    pub fn markings(&self, dir: DrivingDirection) -> &[f64] {
        match dir {
            DrivingDirection::UpperCarriageway => &self.upper_lane_markings,
            DrivingDirection::LowerCarriageway => &self.lower_lane_markings,
        }
    }

    pub fn lane_count(&self, dir: DrivingDirection) -> usize {
        self.markings(dir).len().saturating_sub(1)
    }

    /// Speed limit of `lane` on `dir`, if the lane exists.
    pub fn speed_limit(&self, dir: DrivingDirection, lane: i32) -> Option<SpeedLimit> {
        if lane < 1 || lane as usize > self.lane_count(dir) {
            return None;
        }
        let offset = match dir {
            DrivingDirection::UpperCarriageway => 0,
            DrivingDirection::LowerCarriageway => self.lane_count(DrivingDirection::UpperCarriageway),
        };
        self.speed_limits.get(offset + lane as usize - 1).copied()
    }

    /// Lateral center of a lane.
    pub fn lane_center(&self, dir: DrivingDirection, lane: i32) -> Option<f64> {
        let m = self.markings(dir);
        if lane < 1 || lane as usize >= m.len() {
            return None;
        }
        let k = lane as usize;
        Some(0.5 * (m[k - 1] + m[k]))
    }

    /// Carriageway whose marking span contains `y`.
    pub fn carriageway_of(&self, y: f64) -> Option<DrivingDirection> {
        [DrivingDirection::UpperCarriageway, DrivingDirection::LowerCarriageway]
            .into_iter()
            .find(|&d| matches!(lane_id_of(y, self, d), LaneAssignment::Lane(_)))
    }

    /// Number of frames covered by the recording.
    pub fn frame_count(&self) -> u32 {
        (self.duration * self.frame_rate).round() as u32
    }

    /// Every violated invariant, as human-readable messages.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            out.push(format!("frameRate must be positive, got {}", self.frame_rate));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            out.push(format!("duration must be positive, got {}", self.duration));
        }
        for (name, m) in [
            ("upperLaneMarkings", &self.upper_lane_markings),
            ("lowerLaneMarkings", &self.lower_lane_markings),
        ] {
            if m.len() < 3 {
                out.push(format!("{name} needs at least 3 markings, got {}", m.len()));
            }
            if m.iter().any(|v| !v.is_finite()) || m.windows(2).any(|w| w[1] <= w[0]) {
                out.push(format!("{name} must be finite and strictly increasing"));
            }
        }
        let lanes = self.lane_count(DrivingDirection::UpperCarriageway)
            + self.lane_count(DrivingDirection::LowerCarriageway);
        if self.speed_limits.len() != lanes {
            out.push(format!(
                "speedLimits has {} entries for {} lanes",
                self.speed_limits.len(),
                lanes
            ));
        }
        if !(self.pixel_size > 0.0) {
            out.push("pixel size must be positive".to_string());
        }
        out
    }
}

/// Result of assigning a lateral position to a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaneAssignment {
    Lane(i32),
    OffRoad,
}

impl LaneAssignment {
    /// File encoding: lane id, or 0 when off the road.
    pub fn id(self) -> i32 {
        match self {
            LaneAssignment::Lane(id) => id,
            LaneAssignment::OffRoad => 0,
        }
    }
}

/// Lane of `dir` containing `y` under the half-open convention.
pub fn lane_id_of(y: f64, meta: &RecordingMeta, dir: DrivingDirection) -> LaneAssignment {
    lane_in(y, meta.markings(dir))
}

pub(crate) fn lane_in(y: f64, markings: &[f64]) -> LaneAssignment {
    if markings.len() < 2 || !(y >= markings[0]) || y >= markings[markings.len() - 1] {
        return LaneAssignment::OffRoad;
    }
    // number of markings <= y, at least 1 here
    let k = markings.partition_point(|&m| m <= y);
    LaneAssignment::Lane(k as i32)
}

/// Smoothed kinematics of one vehicle in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
    /// 1-based lane within the carriageway, 0 when off the road.
    pub lane_id: i32,
}

impl KinematicState {
    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.vx, self.vy, self.ax, self.ay]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Whether `a` is strictly ahead of `b` along the travel direction.
pub fn ahead_of(
    a: &KinematicState,
    b: &KinematicState,
    dir: DrivingDirection,
) -> Result<bool, ContractViolation> {
    if a.frame != b.frame {
        return Err(ContractViolation::new(format!(
            "ahead_of compares frames {} and {}",
            a.frame, b.frame
        )));
    }
    Ok(dir.sign() * (a.x - b.x) > 0.0)
}

/// One vehicle's trajectory and summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u32,
    pub class: VehicleClass,
    pub direction: DrivingDirection,
    pub length: f64,
    pub width: f64,
    pub states: Vec<KinematicState>,
    pub mean_speed: f64,
}

impl Track {
    /// Mean of the per-frame longitudinal speed magnitudes.
    pub fn compute_mean_speed(states: &[KinematicState]) -> f64 {
        if states.is_empty() {
            return 0.0;
        }
        states.iter().map(|s| s.vx.abs()).sum::<f64>() / states.len() as f64
    }

    pub fn first_frame(&self) -> Option<u32> {
        self.states.first().map(|s| s.frame)
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.states.last().map(|s| s.frame)
    }

    /// State at `frame`, relying on consecutive frame indices.
    pub fn state_at(&self, frame: u32) -> Option<&KinematicState> {
        let first = self.first_frame()?;
        let idx = frame.checked_sub(first)? as usize;
        self.states.get(idx).filter(|s| s.frame == frame)
    }

    /// Number of frames at which the lane id differs from the previous frame.
    pub fn lane_transitions(&self) -> usize {
        self.states
            .windows(2)
            .filter(|w| w[0].lane_id != w[1].lane_id)
            .count()
    }
}

/// A single-frame vehicle observation from the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u32,
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub class_hint: Option<VehicleClass>,
}
