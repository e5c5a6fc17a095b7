//! Synthetic highway scenes with exact ground truth, and their corruption
//! into detection streams.
//!
//! A [`ScenarioScript`] is read from TOML:
//!
//! ```toml
//! seed = 7
//! duration = 20.0        # seconds
//! frame_rate = 25.0
//!
//! [road]
//! upper_lane_markings = [1.0, 4.75, 8.5]
//! lower_lane_markings = [12.0, 15.75, 19.5]
//! speed_limits = []      # m/s per lane, upper lanes first, -1 unlimited; empty = all unlimited
//! x_min = 0.0
//! x_max = 400.0
//!
//! [noise]
//! position_sigma = 0.1
//! dropout_probability = 0.0
//! dropout_burst = 1      # frames dropped per dropout event
//! false_positive_rate = 0.0
//! bursts = [{ vehicle = 1, start_frame = 10, frames = 3 }]
//!
//! [[vehicles]]
//! entry_time = 0.0
//! direction = "lower"    # or "upper"
//! lane = 1
//! class = "Car"
//! speed = 30.0
//! accelerations = [{ start = 2.0, duration = 3.0, accel = 0.5 }]
//! lane_changes = [{ start = 6.0, duration = 5.0, to_lane = 2 }]
//! ```
//!
//! Vehicle `i` (0-based) becomes track `i + 1`. It enters at the road end
//! it drives away from and is observed while its center is within
//! `[x_min, x_max]`. Times in accelerations and lane changes are absolute.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::lane_change::{evaluate_model, lateral_side, CutInScenario, CutInSide, LaneChangeParams};
use crate::maneuvers::{LaneChangeInfo, ManeuverEpisode, ManeuverKind};
use crate::model::{
    lane_id_of, Detection, DrivingDirection, KinematicState, RecordingMeta, SpeedLimit, Track, VehicleClass,
    DEFAULT_PIXEL_SIZE,
};
use crate::surround::{gap_size, headway_metrics, FrameVehicle};

fn default_frame_rate() -> f64 {
    25.0
}
fn one_u32() -> u32 {
    1
}
fn default_x_max() -> f64 {
    400.0
}
fn default_length() -> f64 {
    4.5
}
fn default_width() -> f64 {
    1.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub seed: u64,
    pub duration: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    #[serde(default = "one_u32")]
    pub recording_id: u32,
    #[serde(default = "one_u32")]
    pub location_id: u32,
    pub road: RoadSpec,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub labels: LabelRules,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSpec {
    pub upper_lane_markings: Vec<f64>,
    pub lower_lane_markings: Vec<f64>,
    #[serde(default)]
    pub speed_limits: Vec<f64>,
    #[serde(default)]
    pub x_min: f64,
    #[serde(default = "default_x_max")]
    pub x_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub position_sigma: f64,
    pub dropout_probability: f64,
    pub dropout_burst: u32,
    /// Mean number of single-frame false positives per frame.
    pub false_positive_rate: f64,
    pub bursts: Vec<DropoutBurst>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { position_sigma: 0.0, dropout_probability: 0.0, dropout_burst: 1, false_positive_rate: 0.0, bursts: Vec::new() }
    }
}

/// Frames `start_frame .. start_frame + frames` of track `vehicle` are
/// never detected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutBurst {
    pub vehicle: u32,
    pub start_frame: u32,
    pub frames: u32,
}

/// Labelling rules the truth episodes follow. They mirror the maneuver
/// detector's dwell and settle parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelRules {
    pub min_dwell: usize,
    pub settle_speed: f64,
}

impl Default for LabelRules {
    fn default() -> Self {
        LabelRules { min_dwell: 25, settle_speed: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carriageway {
    Upper,
    Lower,
}

impl From<Carriageway> for DrivingDirection {
    fn from(c: Carriageway) -> Self {
        match c {
            Carriageway::Upper => DrivingDirection::UpperCarriageway,
            Carriageway::Lower => DrivingDirection::LowerCarriageway,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub entry_time: f64,
    pub direction: Carriageway,
    pub lane: i32,
    #[serde(default = "car")]
    pub class: VehicleClass,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    pub speed: f64,
    /// Lateral offset from the lane center, meters.
    #[serde(default)]
    pub lateral_offset: f64,
    /// Entry position; defaults to the road end the vehicle starts from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_x: Option<f64>,
    #[serde(default)]
    pub accelerations: Vec<AccelSegment>,
    #[serde(default)]
    pub lane_changes: Vec<ScriptedLaneChange>,
}

fn car() -> VehicleClass {
    VehicleClass::Car
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccelSegment {
    pub start: f64,
    pub duration: f64,
    pub accel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedLaneChange {
    pub start: f64,
    pub duration: f64,
    pub to_lane: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
pub enum ScriptError {
    #[error("script syntax error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid script: {0}")]
    Invalid(String),
    #[error("vehicles {first} and {second} overlap at frame {frame}")]
    Overlap { first: u32, second: u32, frame: u32 },
}

impl ScenarioScript {
    pub fn from_toml_str(text: &str) -> Result<Self, ScriptError> {
        toml::from_str(text).map_err(|e| {
            let offset = e.span().map_or(0, |s| s.start);
            let before = &text[..offset.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            ScriptError::Parse { line, column, message: e.message().trim().to_string() }
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScriptError::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("script serializes")
    }

    pub fn meta(&self) -> RecordingMeta {
        let lanes = self.road.upper_lane_markings.len().saturating_sub(1) + self.road.lower_lane_markings.len().saturating_sub(1);
        let speed_limits = if self.road.speed_limits.is_empty() {
            vec![SpeedLimit::Unlimited; lanes]
        } else {
            self.road.speed_limits.iter().map(|&v| SpeedLimit::from_file_value(v)).collect()
        };
        RecordingMeta {
            recording_id: self.recording_id,
            location_id: self.location_id,
            frame_rate: self.frame_rate,
            duration: self.duration,
            upper_lane_markings: self.road.upper_lane_markings.clone(),
            lower_lane_markings: self.road.lower_lane_markings.clone(),
            speed_limits,
            pixel_size: DEFAULT_PIXEL_SIZE,
        }
    }
}

/// Analytic motion of one scripted vehicle.
#[derive(Debug, Clone)]
struct Motion {
    dir: DrivingDirection,
    entry_time: f64,
    entry_x: f64,
    speed: f64,
    accels: Vec<AccelSegment>,
    /// (start time, params, crossed marking, lane before, lane after)
    changes: Vec<(f64, LaneChangeParams, f64, i32, i32)>,
    entry_lane: i32,
    offset: f64,
    markings: Vec<f64>,
}

impl Motion {
    /// Distance travelled, speed and acceleration at `tau` frames after
    /// time zero. Working in frame units keeps constant-speed positions
    /// exact multiples of `v / frame_rate`.
    fn longitudinal(&self, tau: f64, fr: f64) -> (f64, f64, f64) {
        let mut tc = self.entry_time * fr;
        let mut s = 0.0;
        let mut v = self.speed;
        for seg in &self.accels {
            let start = seg.start * fr;
            if tau <= start {
                break;
            }
            s += v * (start - tc) / fr;
            let end = (seg.start + seg.duration) * fr;
            let d = tau.min(end) - start;
            s += v * d / fr + 0.5 * seg.accel * d * d / (fr * fr);
            v += seg.accel * d / fr;
            tc = start + d;
            if tau < end {
                return (s, v, seg.accel);
            }
        }
        (s + v * (tau - tc) / fr, v, 0.0)
    }

    fn lane_center(&self, lane: i32) -> f64 {
        let k = lane as usize;
        0.5 * (self.markings[k - 1] + self.markings[k])
    }

    /// `y`, `vy`, `ay` at absolute time `t`.
    fn lateral(&self, t: f64) -> (f64, f64, f64) {
        let mut lane = self.entry_lane;
        for &(start, p, marking, _, to) in &self.changes {
            if t < start {
                break;
            }
            if t <= start + p.duration {
                let m = evaluate_model(&p, t - start).expect("inside maneuver");
                return (marking + m.y, m.vy, m.ay);
            }
            lane = to;
        }
        (self.lane_center(lane) + self.offset, 0.0, 0.0)
    }

    fn state(&self, frame: u32, frame_rate: f64, meta: &RecordingMeta) -> KinematicState {
        let t = frame as f64 / frame_rate;
        let (s, v, a) = self.longitudinal(frame as f64, frame_rate);
        let (y, vy, ay) = self.lateral(t);
        let sign = self.dir.sign();
        KinematicState {
            frame,
            x: self.entry_x + sign * s,
            y,
            vx: sign * v,
            vy,
            ax: sign * a,
            ay,
            lane_id: lane_id_of(y, meta, self.dir).id(),
        }
    }
}

/// A scripted lane change with the frames it labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthLaneChange {
    pub episode: ManeuverEpisode,
    pub params: LaneChangeParams,
    /// Absolute maneuver start time, seconds.
    pub t0: f64,
    pub marking: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub meta: RecordingMeta,
    pub x_range: (f64, f64),
    pub tracks: Vec<Track>,
    pub lane_changes: Vec<TruthLaneChange>,
    pub cut_ins: Vec<CutInScenario>,
}

impl Truth {
    pub fn episodes(&self) -> Vec<ManeuverEpisode> {
        self.lane_changes.iter().map(|l| l.episode).collect()
    }
}

fn invalid(msg: impl Into<String>) -> ScriptError {
    ScriptError::Invalid(msg.into())
}

fn check_script(script: &ScenarioScript, meta: &RecordingMeta) -> Result<(), ScriptError> {
    if let Some(v) = meta.invariant_violations().first() {
        return Err(invalid(format!("road: {v}")));
    }
    if !(script.road.x_max > script.road.x_min) {
        return Err(invalid("road: x_max must exceed x_min"));
    }
    let n = &script.noise;
    if !(n.position_sigma >= 0.0) || !(0.0..=1.0).contains(&n.dropout_probability) || !(n.false_positive_rate >= 0.0) {
        return Err(invalid("noise: sigma and rate must be non-negative, dropout probability within [0, 1]"));
    }
    if n.dropout_burst == 0 {
        return Err(invalid("noise: dropout_burst must be at least 1"));
    }
    if script.labels.min_dwell == 0 || !(script.labels.settle_speed > 0.0) {
        return Err(invalid("labels: min_dwell and settle_speed must be positive"));
    }
    Ok(())
}

fn build_motion(i: usize, v: &VehicleSpec, script: &ScenarioScript, meta: &RecordingMeta) -> Result<Motion, ScriptError> {
    let who = format!("vehicle {}", i + 1);
    let dir: DrivingDirection = v.direction.into();
    let markings = meta.markings(dir).to_vec();
    let lanes = markings.len() as i32 - 1;
    if !(1..=lanes).contains(&v.lane) {
        return Err(invalid(format!("{who}: lane {} does not exist", v.lane)));
    }
    if !(v.length > 0.0 && v.width > 0.0 && v.speed > 0.0) {
        return Err(invalid(format!("{who}: length, width and speed must be positive")));
    }
    if !(0.0..script.duration).contains(&v.entry_time) {
        return Err(invalid(format!("{who}: entry_time outside the recording")));
    }
    let half_lane = markings.windows(2).map(|w| 0.5 * (w[1] - w[0])).fold(f64::INFINITY, f64::min);
    if v.lateral_offset.abs() >= half_lane {
        return Err(invalid(format!("{who}: lateral_offset leaves the lane")));
    }
    let mut accels = v.accelerations.clone();
    accels.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut t_prev = v.entry_time;
    let mut speed = v.speed;
    for seg in &accels {
        if !(seg.duration > 0.0) || seg.start < t_prev {
            return Err(invalid(format!("{who}: acceleration segments must have positive duration, start after entry and not overlap")));
        }
        t_prev = seg.start + seg.duration;
        speed += seg.accel * seg.duration;
        if !(speed > 0.0) {
            return Err(invalid(format!("{who}: speed drops to {speed} at t = {t_prev}")));
        }
    }
    let entry_x = v.entry_x.unwrap_or(match dir {
        DrivingDirection::LowerCarriageway => script.road.x_min,
        DrivingDirection::UpperCarriageway => script.road.x_max,
    });
    let mut motion = Motion {
        dir,
        entry_time: v.entry_time,
        entry_x,
        speed: v.speed,
        accels,
        changes: Vec::new(),
        entry_lane: v.lane,
        offset: v.lateral_offset,
        markings,
    };
    let mut changes = v.lane_changes.clone();
    changes.sort_by(|a, b| a.start.total_cmp(&b.start));
    let mut lane = v.lane;
    let mut t_prev = v.entry_time;
    for lc in changes {
        if (lc.to_lane - lane).abs() != 1 || !(1..=lanes).contains(&lc.to_lane) {
            return Err(invalid(format!("{who}: lane change from {lane} to {} is not to an adjacent lane", lc.to_lane)));
        }
        if !(lc.duration > 0.0) || lc.start < t_prev {
            return Err(invalid(format!("{who}: lane changes must have positive duration, start after entry and not overlap")));
        }
        let marking = motion.markings[lane.max(lc.to_lane) as usize - 1];
        let y0 = motion.lane_center(lane) + v.lateral_offset;
        let y1 = motion.lane_center(lc.to_lane) + v.lateral_offset;
        let (_, v0, _) = motion.longitudinal(lc.start * script.frame_rate, script.frame_rate);
        let (_, v1, _) = motion.longitudinal((lc.start + lc.duration) * script.frame_rate, script.frame_rate);
        let params = LaneChangeParams {
            d_start: (y0 - marking).abs(),
            d_end: (y1 - marking).abs(),
            v_start: v0,
            v_end: v1,
            duration: lc.duration,
            side: lateral_side(lane, lc.to_lane),
        };
        motion.changes.push((lc.start, params, marking, lane, lc.to_lane));
        lane = lc.to_lane;
        t_prev = lc.start + lc.duration;
    }
    Ok(motion)
}

/// Frames during which the vehicle is on the road section.
fn observed_states(m: &Motion, script: &ScenarioScript, meta: &RecordingMeta) -> Vec<KinematicState> {
    let fr = script.frame_rate;
    let n = meta.frame_count();
    let k0 = (m.entry_time * fr - 1e-9).ceil().max(0.0) as u32;
    let mut out = Vec::new();
    for k in k0..n {
        let s = m.state(k, fr, meta);
        if s.x < script.road.x_min || s.x > script.road.x_max {
            if out.is_empty() {
                continue;
            }
            break;
        }
        out.push(s);
    }
    out
}

fn check_overlaps(tracks: &[Track]) -> Result<(), ScriptError> {
    let mut by_frame: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (si, s) in t.states.iter().enumerate() {
            by_frame.entry(s.frame).or_default().push((ti, si));
        }
    }
    let max_len = tracks.iter().map(|t| t.length).fold(0.0, f64::max);
    let mut frames: Vec<u32> = by_frame.keys().copied().collect();
    frames.sort_unstable();
    for f in frames {
        let mut list = by_frame.remove(&f).expect("key present");
        list.sort_by(|a, b| tracks[a.0].states[a.1].x.total_cmp(&tracks[b.0].states[b.1].x));
        for i in 0..list.len() {
            let (ta, sa) = list[i];
            let a = &tracks[ta];
            let pa = &a.states[sa];
            for &(tb, sb) in &list[i + 1..] {
                let b = &tracks[tb];
                let pb = &b.states[sb];
                if pb.x - pa.x >= 0.5 * (a.length + max_len) {
                    break;
                }
                if a.direction == b.direction
                    && (pb.x - pa.x).abs() < 0.5 * (a.length + b.length)
                    && (pb.y - pa.y).abs() < 0.5 * (a.width + b.width)
                {
                    let (first, second) = (a.track_id.min(b.track_id), a.track_id.max(b.track_id));
                    return Err(ScriptError::Overlap { first, second, frame: f });
                }
            }
        }
    }
    Ok(())
}

/// Exact trajectories, lane-change episodes and cut-ins of a script.
pub fn generate_truth(script: &ScenarioScript) -> Result<Truth, ScriptError> {
    if !(script.frame_rate > 0.0 && script.duration > 0.0) {
        return Err(invalid("frame_rate and duration must be positive"));
    }
    let meta = script.meta();
    check_script(script, &meta)?;
    let motions = script
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, v)| build_motion(i, v, script, &meta))
        .collect::<Result<Vec<_>, _>>()?;

    let mut tracks = Vec::new();
    let mut track_motion = Vec::new();
    for (i, (m, spec)) in motions.iter().zip(&script.vehicles).enumerate() {
        let states = observed_states(m, script, &meta);
        if states.is_empty() {
            continue;
        }
        tracks.push(Track {
            track_id: i as u32 + 1,
            class: spec.class,
            direction: m.dir,
            length: spec.length,
            width: spec.width,
            mean_speed: Track::compute_mean_speed(&states),
            states,
        });
        track_motion.push(i);
    }
    check_overlaps(&tracks)?;

    let mut lane_changes = Vec::new();
    for (t, &mi) in tracks.iter().zip(&track_motion) {
        lane_changes.extend(truth_lane_changes(t, &motions[mi], script)?);
    }
    let cut_ins = truth_cut_ins(&tracks, &lane_changes);
    Ok(Truth { meta, x_range: (script.road.x_min, script.road.x_max), tracks, lane_changes, cut_ins })
}

fn truth_lane_changes(track: &Track, m: &Motion, script: &ScenarioScript) -> Result<Vec<TruthLaneChange>, ScriptError> {
    let fr = script.frame_rate;
    let rules = &script.labels;
    let states = &track.states;
    let n = states.len();
    let settled = |k: usize| m.lateral(states[k].frame as f64 / fr).1.abs() < rules.settle_speed;
    // (crossing index, scripted change)
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (ci, &(start, _, _, from, to)) in m.changes.iter().enumerate() {
        let Some(c) = states.iter().position(|s| {
            let t = s.frame as f64 / fr;
            t >= start && s.lane_id == to
        }) else {
            continue;
        };
        if c == 0 || states[c - 1].lane_id != from {
            // the change happened before the vehicle was observed
            continue;
        }
        let held = states[c..].iter().take_while(|s| s.lane_id == to).count();
        let leaves = c + held < n;
        if held < rules.min_dwell {
            if leaves {
                return Err(invalid(format!(
                    "vehicle {}: lane {to} held for {held} frames after the change at t = {start}",
                    track.track_id
                )));
            }
            continue;
        }
        found.push((c, ci));
    }
    let mut extents: Vec<(usize, bool, usize, bool)> = found
        .iter()
        .map(|&(c, _)| {
            let mut s = c;
            while s > 0 && !settled(s) {
                s -= 1;
            }
            let mut e = c;
            while e + 1 < n && !settled(e) {
                e += 1;
            }
            (s, settled(s) && s > 0, e, settled(e) && e + 1 < n)
        })
        .collect();
    for i in 1..extents.len() {
        if extents[i - 1].2 >= extents[i].0 {
            let (c0, c1) = (found[i - 1].0, found[i].0);
            let vy = |k: usize| m.lateral(states[k].frame as f64 / fr).1.abs();
            let split = (c0..c1).min_by(|&a, &b| vy(a).total_cmp(&vy(b))).unwrap_or(c0);
            extents[i - 1].2 = split;
            extents[i - 1].3 = settled(split);
            extents[i].0 = split + 1;
            extents[i].1 = settled(split + 1);
        }
    }
    Ok(found
        .iter()
        .zip(&extents)
        .map(|(&(c, ci), &(s, s_ok, e, e_ok))| {
            let (start, params, marking, from, to) = m.changes[ci];
            TruthLaneChange {
                episode: ManeuverEpisode {
                    track_id: track.track_id,
                    kind: ManeuverKind::LaneChange,
                    start_frame: states[s].frame,
                    end_frame: states[e].frame,
                    lane_change: Some(LaneChangeInfo {
                        from_lane: from,
                        to_lane: to,
                        crossing_frame: states[c].frame,
                        complete: s_ok && e_ok,
                    }),
                },
                params,
                t0: start,
                marking,
            }
        })
        .collect())
}

fn frame_vehicle(t: &Track, frame: u32) -> Option<FrameVehicle> {
    t.state_at(frame).map(|s| FrameVehicle { track_id: t.track_id, direction: t.direction, length: t.length, width: t.width, state: *s })
}

fn along(v: &FrameVehicle) -> f64 {
    v.direction.sign() * v.state.x
}

/// Nearest vehicle strictly ahead (`ahead`) or behind in `lane` at the
/// frame of `ego`, scanning every track. Ties go to the lower id.
fn nearest_in_lane(tracks: &[Track], ego: &FrameVehicle, lane: i32, ahead: bool) -> Option<FrameVehicle> {
    let s = along(ego);
    tracks
        .iter()
        .filter(|t| t.track_id != ego.track_id && t.direction == ego.direction)
        .filter_map(|t| frame_vehicle(t, ego.state.frame))
        .filter(|v| v.state.lane_id == lane && if ahead { along(v) > s } else { along(v) < s })
        .min_by(|a, b| (along(a) - s).abs().total_cmp(&(along(b) - s).abs()).then(a.track_id.cmp(&b.track_id)))
}

fn truth_cut_ins(tracks: &[Track], lane_changes: &[TruthLaneChange]) -> Vec<CutInScenario> {
    let index: HashMap<u32, usize> = tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
    let mut out = Vec::new();
    for lc in lane_changes {
        let ep = lc.episode;
        let info = ep.lane_change.expect("lane change episode");
        let changer = &tracks[index[&ep.track_id]];
        let dir = changer.direction;
        let cv = frame_vehicle(changer, info.crossing_frame).expect("changer present at crossing");
        let Some(tail) = nearest_in_lane(tracks, &cv, info.to_lane, false) else { continue };
        let lead = nearest_in_lane(tracks, &cv, info.to_lane, true);
        let entry_thw = headway_metrics(&tail, &cv, dir).expect("changer ahead of tail").thw;
        let gap = lead.and_then(|l| gap_size(&tail, &l, dir).ok());
        let tail_track = &tracks[index[&tail.track_id]];
        let mut metrics = Vec::new();
        for f in ep.start_frame..=ep.end_frame {
            let (Some(tv), Some(c)) = (frame_vehicle(tail_track, f), frame_vehicle(changer, f)) else { continue };
            let own_lead = nearest_in_lane(tracks, &tv, tv.state.lane_id, true);
            if tv.state.lane_id > 0 && own_lead.is_some_and(|l| l.track_id == changer.track_id) {
                metrics.push(headway_metrics(&tv, &c, dir).expect("lead ahead"));
            }
        }
        let min_of = |it: Vec<Option<f64>>| it.into_iter().flatten().min_by(f64::total_cmp);
        out.push(CutInScenario {
            lane_change_track_id: changer.track_id,
            tailing_track_id: tail.track_id,
            preceding_track_id: lead.map_or(0, |l| l.track_id),
            crossing_frame: info.crossing_frame,
            entry_thw,
            tail_speed_at_entry: tail.state.vx.abs(),
            min_dhw: min_of(metrics.iter().map(|h| Some(h.dhw)).collect()),
            min_thw: min_of(metrics.iter().map(|h| h.thw).collect()),
            min_ttc: min_of(metrics.iter().map(|h| h.ttc).collect()),
            gap_size: gap,
            side: if info.from_lane == info.to_lane + dir.left_step() { CutInSide::FromLeft } else { CutInSide::FromRight },
        });
    }
    out
}

/// Detection stream for `truth`: per-vehicle dropouts (random bursts and
/// scripted ones), Gaussian center noise and single-frame false positives
/// placed uniformly on the marked lanes.
pub fn corrupt(truth: &Truth, noise: &NoiseSpec, seed: u64) -> Vec<Vec<Detection>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_frames = truth.meta.frame_count() as usize;
    let gauss = Normal::new(0.0, noise.position_sigma.max(0.0)).expect("finite sigma");
    let fp_count = (noise.false_positive_rate > 0.0).then(|| Poisson::new(noise.false_positive_rate).expect("positive rate"));
    let mut frames: Vec<Vec<(u32, usize)>> = vec![Vec::new(); n_frames];
    for t in &truth.tracks {
        for (si, s) in t.states.iter().enumerate() {
            if let Some(list) = frames.get_mut(s.frame as usize) {
                list.push((t.track_id, si));
            }
        }
    }
    let index: HashMap<u32, usize> = truth.tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
    let mut scripted: HashMap<u32, Vec<(u32, u32)>> = HashMap::new();
    for b in &noise.bursts {
        scripted.entry(b.vehicle).or_default().push((b.start_frame, b.start_frame.saturating_add(b.frames)));
    }
    let spans: Vec<(f64, f64)> = [&truth.meta.upper_lane_markings, &truth.meta.lower_lane_markings]
        .iter()
        .map(|m| (m[0], m[m.len() - 1]))
        .collect();
    let road_width: f64 = spans.iter().map(|(a, b)| b - a).sum();
    let mut burst_left: HashMap<u32, u32> = HashMap::new();

    let mut out = Vec::with_capacity(n_frames);
    for (f, present) in frames.iter_mut().enumerate() {
        present.sort_unstable();
        let frame = f as u32;
        let mut dets = Vec::with_capacity(present.len());
        for &(id, si) in present.iter() {
            let left = burst_left.entry(id).or_insert(0);
            let random_drop = if *left > 0 {
                *left -= 1;
                true
            } else if noise.dropout_probability > 0.0 && rng.random_bool(noise.dropout_probability) {
                *left = noise.dropout_burst - 1;
                true
            } else {
                false
            };
            let scripted_drop = scripted.get(&id).is_some_and(|v| v.iter().any(|&(a, b)| frame >= a && frame < b));
            if random_drop || scripted_drop {
                continue;
            }
            let t = &truth.tracks[index[&id]];
            let s = &t.states[si];
            let (dx, dy) = if noise.position_sigma > 0.0 { (gauss.sample(&mut rng), gauss.sample(&mut rng)) } else { (0.0, 0.0) };
            dets.push(Detection { frame, cx: s.x + dx, cy: s.y + dy, length: t.length, width: t.width, class_hint: Some(t.class) });
        }
        if let Some(p) = &fp_count {
            let k = p.sample(&mut rng) as usize;
            for _ in 0..k {
                let cx = rng.random_range(truth.x_range.0..=truth.x_range.1);
                let mut u = rng.random_range(0.0..road_width);
                let mut cy = spans[0].0;
                for &(a, b) in &spans {
                    if u < b - a {
                        cy = a + u;
                        break;
                    }
                    u -= b - a;
                }
                let length = rng.random_range(3.5..5.0);
                let width = rng.random_range(1.6..2.0);
                dets.push(Detection { frame, cx, cy, length, width, class_hint: Some(VehicleClass::Car) });
            }
        }
        out.push(dets);
    }
    out
}

/// Parameters of [`random_script`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomScriptConfig {
    pub vehicles: usize,
    pub frame_rate: f64,
    pub lanes_per_direction: usize,
    pub lane_width: f64,
    pub road_length: f64,
    /// Entry interval range per lane, seconds.
    pub headway: (f64, f64),
    pub speed: (f64, f64),
    pub truck_share: f64,
    pub lane_change_probability: f64,
    pub lane_change_duration: (f64, f64),
    pub accel_probability: f64,
}

impl Default for RandomScriptConfig {
    fn default() -> Self {
        RandomScriptConfig {
            vehicles: 100,
            frame_rate: 25.0,
            lanes_per_direction: 3,
            lane_width: 3.75,
            road_length: 400.0,
            headway: (0.6, 4.0),
            speed: (22.0, 36.0),
            truck_share: 0.2,
            lane_change_probability: 0.3,
            lane_change_duration: (4.0, 7.0),
            accel_probability: 0.2,
        }
    }
}

/// A random collision-free script with `cfg.vehicles` vehicles. Candidate
/// vehicles that would overlap an accepted one are redrawn.
pub fn random_script(cfg: &RandomScriptConfig, seed: u64) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lanes = cfg.lanes_per_direction.max(2);
    let upper: Vec<f64> = (0..=lanes).map(|k| 1.0 + k as f64 * cfg.lane_width).collect();
    let lower_base = upper[lanes] + 3.0;
    let lower: Vec<f64> = (0..=lanes).map(|k| lower_base + k as f64 * cfg.lane_width).collect();
    let travel_max = cfg.road_length / cfg.speed.0 + 60.0;
    let mut script = ScenarioScript {
        seed,
        duration: 1e9,
        frame_rate: cfg.frame_rate,
        recording_id: 1,
        location_id: 1,
        road: RoadSpec { upper_lane_markings: upper, lower_lane_markings: lower, speed_limits: Vec::new(), x_min: 0.0, x_max: cfg.road_length },
        noise: NoiseSpec::default(),
        labels: LabelRules::default(),
        vehicles: Vec::new(),
    };
    let meta = script.meta();
    // next entry time per (direction, lane)
    let mut next_entry = vec![0.0f64; 2 * lanes];
    let mut accepted: Vec<(Vec<KinematicState>, f64, f64, DrivingDirection)> = Vec::new();
    let mut attempts = 0usize;
    while script.vehicles.len() < cfg.vehicles && attempts < 50 * cfg.vehicles.max(1) {
        attempts += 1;
        let slot = (0..2 * lanes).min_by(|&a, &b| next_entry[a].total_cmp(&next_entry[b])).expect("lanes");
        let direction = if slot < lanes { Carriageway::Upper } else { Carriageway::Lower };
        let lane = (slot % lanes) as i32 + 1;
        let entry_time = next_entry[slot];
        next_entry[slot] += rng.random_range(cfg.headway.0..=cfg.headway.1);
        let truck = rng.random_bool(cfg.truck_share.clamp(0.0, 1.0));
        let (class, length, width) = if truck {
            (VehicleClass::Truck, rng.random_range(10.0..18.0), rng.random_range(2.3..2.6))
        } else {
            (VehicleClass::Car, rng.random_range(3.8..5.2), rng.random_range(1.7..2.0))
        };
        let speed = rng.random_range(cfg.speed.0..=cfg.speed.1) * if truck { 0.8 } else { 1.0 };
        let road_time = cfg.road_length / speed;
        let mut accelerations = Vec::new();
        if rng.random_bool(cfg.accel_probability.clamp(0.0, 1.0)) {
            let duration = rng.random_range(2.0..5.0);
            let accel = rng.random_range(-1.0..1.0);
            let start = entry_time + rng.random_range(0.5..(road_time * 0.5).max(1.0));
            if speed + accel * duration > 5.0 {
                accelerations.push(AccelSegment { start, duration, accel });
            }
        }
        let mut lane_changes = Vec::new();
        if rng.random_bool(cfg.lane_change_probability.clamp(0.0, 1.0)) {
            let duration = rng.random_range(cfg.lane_change_duration.0..=cfg.lane_change_duration.1);
            let to_lane = if lane == 1 || (lane < lanes as i32 && rng.random_bool(0.5)) { lane + 1 } else { lane - 1 };
            let room = road_time - duration - 3.0;
            if room > 1.0 {
                let start = entry_time + rng.random_range(1.0..room);
                lane_changes.push(ScriptedLaneChange { start, duration, to_lane });
            }
        }
        let spec = VehicleSpec {
            entry_time,
            direction,
            lane,
            class,
            length,
            width,
            speed,
            lateral_offset: 0.0,
            entry_x: None,
            accelerations,
            lane_changes,
        };
        let Ok(m) = build_motion(script.vehicles.len(), &spec, &script, &meta) else { continue };
        let states = observed_states_until(&m, &script, &meta, entry_time + travel_max);
        let dir: DrivingDirection = direction.into();
        let clash = accepted.iter().any(|(other, l, w, d)| *d == dir && overlaps_any(&states, other, length, width, *l, *w));
        if clash || states.len() < 2 {
            continue;
        }
        accepted.push((states, length, width, dir));
        script.vehicles.push(spec);
    }
    let last = accepted.iter().filter_map(|(s, ..)| s.last()).map(|s| s.frame).max().unwrap_or(0);
    script.duration = (last as f64 + 1.0) / cfg.frame_rate;
    script
}

fn observed_states_until(m: &Motion, script: &ScenarioScript, meta: &RecordingMeta, t_end: f64) -> Vec<KinematicState> {
    let fr = script.frame_rate;
    let k0 = (m.entry_time * fr - 1e-9).ceil().max(0.0) as u32;
    let k1 = (t_end * fr).ceil() as u32;
    let mut out = Vec::new();
    for k in k0..k1 {
        let s = m.state(k, fr, meta);
        if s.x < script.road.x_min || s.x > script.road.x_max {
            if out.is_empty() {
                continue;
            }
            break;
        }
        out.push(s);
    }
    out
}

/// Whether two frame-aligned state lists ever overlap, with one vehicle
/// length of margin longitudinally.
fn overlaps_any(a: &[KinematicState], b: &[KinematicState], la: f64, wa: f64, lb: f64, wb: f64) -> bool {
    let (Some(fa), Some(fb)) = (a.first(), b.first()) else { return false };
    let lo = fa.frame.max(fb.frame);
    let hi = a.last().expect("non-empty").frame.min(b.last().expect("non-empty").frame);
    (lo..=hi).any(|f| {
        let sa = &a[(f - fa.frame) as usize];
        let sb = &b[(f - fb.frame) as usize];
        (sa.x - sb.x).abs() < 0.5 * (la + lb) + la.max(lb) && (sa.y - sb.y).abs() < 0.5 * (wa + wb)
    })
}
