//! Rule-based maneuver labelling: free driving, vehicle following,
//! critical headways and lane changes.

use serde::{Deserialize, Serialize};

use crate::error::ContractViolation;
use crate::model::Track;
use crate::surround::SurroundFrame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverConfig {
    /// Enter vehicle following below this THW, seconds.
    pub following_thw_max: f64,
    /// Leave vehicle following only above `following_thw_max` plus this.
    pub following_hysteresis: f64,
    pub critical_ttc_max: f64,
    pub critical_thw_max: f64,
    /// Frames a new lane must be held to count as a lane change.
    pub lane_change_min_dwell: usize,
    /// Lateral speed under which a lane change has settled, m/s.
    pub lateral_settle_speed: f64,
}

impl Default for ManeuverConfig {
    fn default() -> Self {
        ManeuverConfig {
            following_thw_max: 3.0,
            following_hysteresis: 0.5,
            critical_ttc_max: 4.0,
            critical_thw_max: 1.0,
            lane_change_min_dwell: 25,
            lateral_settle_speed: 0.1,
        }
    }
}

impl ManeuverConfig {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        let positive = [
            self.following_thw_max,
            self.following_hysteresis,
            self.critical_ttc_max,
            self.critical_thw_max,
            self.lateral_settle_speed,
        ]
        .iter()
        .all(|v| *v > 0.0);
        if !positive || self.lane_change_min_dwell == 0 || self.following_hysteresis >= self.following_thw_max {
            return Err(ContractViolation::new(format!("invalid maneuver config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ManeuverKind {
    FreeDriving,
    VehicleFollowing,
    Critical,
    LaneChange,
}

impl ManeuverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ManeuverKind::FreeDriving => "FreeDriving",
            ManeuverKind::VehicleFollowing => "VehicleFollowing",
            ManeuverKind::Critical => "Critical",
            ManeuverKind::LaneChange => "LaneChange",
        }
    }
}

impl std::str::FromStr for ManeuverKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ManeuverKind::FreeDriving,
            ManeuverKind::VehicleFollowing,
            ManeuverKind::Critical,
            ManeuverKind::LaneChange,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("unknown maneuver kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneChangeInfo {
    pub from_lane: i32,
    pub to_lane: i32,
    /// First frame on the new lane.
    pub crossing_frame: u32,
    /// Both lateral settle points lie inside the observed window.
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManeuverEpisode {
    pub track_id: u32,
    pub kind: ManeuverKind,
    pub start_frame: u32,
    pub end_frame: u32,
    pub lane_change: Option<LaneChangeInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LongitudinalLabel {
    FreeDriving,
    VehicleFollowing,
}

fn check_aligned(track: &Track, surround: &[SurroundFrame]) -> Result<(), ContractViolation> {
    if track.states.len() != surround.len()
        || track.states.iter().zip(surround).any(|(s, f)| s.frame != f.frame)
    {
        return Err(ContractViolation::new(format!(
            "surround frames of track {} are not aligned with its states",
            track.track_id
        )));
    }
    Ok(())
}

/// Per-frame free driving / vehicle following with THW hysteresis.
pub fn label_longitudinal(
    track: &Track,
    surround: &[SurroundFrame],
    cfg: &ManeuverConfig,
) -> Result<Vec<LongitudinalLabel>, ContractViolation> {
    check_aligned(track, surround)?;
    let exit = cfg.following_thw_max + cfg.following_hysteresis;
    let mut following = false;
    Ok(surround
        .iter()
        .map(|sf| {
            let thw = if sf.preceding != 0 { sf.thw } else { None };
            following = match thw {
                None => false,
                Some(t) if following => t <= exit,
                Some(t) => t < cfg.following_thw_max,
            };
            if following {
                LongitudinalLabel::VehicleFollowing
            } else {
                LongitudinalLabel::FreeDriving
            }
        })
        .collect())
}

/// Maximal runs of `flags == true` as (start index, end index) pairs.
fn runs(flags: impl IntoIterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut len = 0;
    for (i, f) in flags.into_iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
        len = i + 1;
    }
    if let Some(s) = start {
        out.push((s, len - 1));
    }
    out
}

/// Free driving and vehicle following episodes of one track.
pub fn longitudinal_episodes(track: &Track, labels: &[LongitudinalLabel]) -> Vec<ManeuverEpisode> {
    let mut out = Vec::new();
    for (label, kind) in [
        (LongitudinalLabel::FreeDriving, ManeuverKind::FreeDriving),
        (LongitudinalLabel::VehicleFollowing, ManeuverKind::VehicleFollowing),
    ] {
        for (s, e) in runs(labels.iter().map(|l| *l == label)) {
            out.push(episode(track, kind, s, e, None));
        }
    }
    out.sort_by_key(|e| e.start_frame);
    out
}

fn episode(track: &Track, kind: ManeuverKind, s: usize, e: usize, lc: Option<LaneChangeInfo>) -> ManeuverEpisode {
    ManeuverEpisode {
        track_id: track.track_id,
        kind,
        start_frame: track.states[s].frame,
        end_frame: track.states[e].frame,
        lane_change: lc,
    }
}

/// Runs of frames with a low TTC or THW to the preceding vehicle.
pub fn detect_critical(
    track: &Track,
    surround: &[SurroundFrame],
    cfg: &ManeuverConfig,
) -> Result<Vec<ManeuverEpisode>, ContractViolation> {
    check_aligned(track, surround)?;
    let critical = surround.iter().map(|sf| {
        let ttc = sf.ttc.is_some_and(|t| t > 0.0 && t < cfg.critical_ttc_max);
        let thw = sf.thw.is_some_and(|t| t > 0.0 && t < cfg.critical_thw_max);
        sf.preceding != 0 && (ttc || thw)
    });
    Ok(runs(critical)
        .into_iter()
        .map(|(s, e)| episode(track, ManeuverKind::Critical, s, e, None))
        .collect())
}

/// Lane changes confirmed by holding the new lane for the dwell time.
///
/// Lane-id runs shorter than the dwell (other than the first run) are
/// bounces and ignored. Each change between consecutive held runs with
/// different lanes is one episode, extended from the crossing to the
/// nearest frames whose lateral speed is below the settle speed.
pub fn detect_lane_changes(track: &Track, cfg: &ManeuverConfig) -> Vec<ManeuverEpisode> {
    let states = &track.states;
    if states.is_empty() {
        return Vec::new();
    }
    // (start index, length, lane) of each lane-id run
    let mut lane_runs: Vec<(usize, usize, i32)> = Vec::new();
    for (i, s) in states.iter().enumerate() {
        match lane_runs.last_mut() {
            Some(r) if r.2 == s.lane_id => r.1 += 1,
            _ => lane_runs.push((i, 1, s.lane_id)),
        }
    }
    let held: Vec<&(usize, usize, i32)> = lane_runs
        .iter()
        .enumerate()
        .filter(|(k, r)| *k == 0 || r.1 >= cfg.lane_change_min_dwell)
        .map(|(_, r)| r)
        .collect();
    let crossings: Vec<(usize, i32, i32)> = held
        .windows(2)
        .filter(|w| w[0].2 != w[1].2)
        .map(|w| (w[1].0, w[0].2, w[1].2))
        .collect();

    let n = states.len();
    let settled = |k: usize| states[k].vy.abs() < cfg.lateral_settle_speed;
    // (start, start_settled, end, end_settled)
    let mut extents: Vec<(usize, bool, usize, bool)> = crossings
        .iter()
        .map(|&(c, _, _)| {
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
            let (c0, c1) = (crossings[i - 1].0, crossings[i].0);
            let split = (c0..c1)
                .min_by(|&a, &b| states[a].vy.abs().total_cmp(&states[b].vy.abs()))
                .unwrap_or(c0);
            extents[i - 1].2 = split;
            extents[i - 1].3 = settled(split);
            extents[i].0 = split + 1;
            extents[i].1 = settled(split + 1);
        }
    }

    crossings
        .iter()
        .zip(&extents)
        .map(|(&(c, from, to), &(s, s_ok, e, e_ok))| {
            let info = LaneChangeInfo {
                from_lane: from,
                to_lane: to,
                crossing_frame: states[c].frame,
                complete: s_ok && e_ok,
            };
            episode(track, ManeuverKind::LaneChange, s, e, Some(info))
        })
        .collect()
}

/// Every episode of one track, ordered by (start frame, kind).
pub fn extract_episodes(
    track: &Track,
    surround: &[SurroundFrame],
    cfg: &ManeuverConfig,
) -> Result<Vec<ManeuverEpisode>, ContractViolation> {
    let labels = label_longitudinal(track, surround, cfg)?;
    let mut out = longitudinal_episodes(track, &labels);
    out.extend(detect_critical(track, surround, cfg)?);
    out.extend(detect_lane_changes(track, cfg));
    out.sort_by_key(|e| (e.start_frame, e.kind, e.end_frame));
    Ok(out)
}
