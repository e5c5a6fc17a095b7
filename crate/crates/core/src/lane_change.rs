//! Symmetric lane-change model, its least-squares fit and cut-in
//! extraction.
//!
//! The lateral offset from the crossed marking follows the quintic
//! `10s³ - 15s⁴ + 6s⁵` of normalized time `s = t/T`, which has zero lateral
//! speed and acceleration at both ends. Longitudinal motion is quadratic,
//! i.e. constant acceleration from `v_start` to `v_end`. A maneuver has
//! five parameters: distances to the marking at start and end, speeds at
//! start and end, and the duration `T`.
//!
//! Fitting is separable: for fixed start time `t0` and duration `T` both
//! the lateral and the longitudinal model are linear in the remaining
//! unknowns, so only `(t0, T)` is searched numerically.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ContractViolation;
use crate::maneuvers::{ManeuverEpisode, ManeuverKind};
use crate::model::{DrivingDirection, Track};
use crate::surround::{gap_size, headway_metrics, FrameVehicle, SurroundFrame};

/// Direction of lateral motion in road coordinates; left is `+y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LaneChangeSide {
    ToLeft,
    ToRight,
}

impl LaneChangeSide {
    pub fn sign(self) -> f64 {
        match self {
            LaneChangeSide::ToLeft => 1.0,
            LaneChangeSide::ToRight => -1.0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            LaneChangeSide::ToLeft => LaneChangeSide::ToRight,
            LaneChangeSide::ToRight => LaneChangeSide::ToLeft,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LaneChangeSide::ToLeft => "toLeft",
            LaneChangeSide::ToRight => "toRight",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeParams {
    /// Lateral distance to the crossed marking at the start, meters.
    pub d_start: f64,
    /// Lateral distance beyond the marking at the end, meters.
    pub d_end: f64,
    pub v_start: f64,
    pub v_end: f64,
    /// Maneuver duration, seconds.
    pub duration: f64,
    pub side: LaneChangeSide,
}

impl LaneChangeParams {
    pub fn is_valid(&self) -> bool {
        self.duration > 0.0 && self.d_start > 0.0 && self.d_end > 0.0 && self.v_start > 0.0 && self.v_end > 0.0
    }
}

/// Model state relative to the maneuver start and the crossed marking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSample {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
}

/// Quintic shape `10s³ - 15s⁴ + 6s⁵` with its first two derivatives in `s`.
pub fn lateral_shape(s: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - s) * (1.0 - s),
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
    )
}

/// Evaluates the model at `t` seconds after the maneuver start.
///
/// `x` runs along the direction of travel from the start point; `y` is the
/// signed lateral offset from the crossed marking.
pub fn evaluate_model(p: &LaneChangeParams, t: f64) -> Result<ModelSample, ContractViolation> {
    let big_t = p.duration;
    if !(0.0..=big_t).contains(&t) {
        return Err(ContractViolation::new(format!("t = {t} outside [0, {big_t}]")));
    }
    let sign = p.side.sign();
    let span = sign * (p.d_start + p.d_end);
    let (h, dh, ddh) = lateral_shape(t / big_t);
    let accel = (p.v_end - p.v_start) / big_t;
    Ok(ModelSample {
        x: p.v_start * t + 0.5 * accel * t * t,
        y: -sign * p.d_start + span * h,
        vx: p.v_start + accel * t,
        vy: span * dh / big_t,
        ax: accel,
        ay: span * ddh / (big_t * big_t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Weight of longitudinal residuals relative to lateral ones.
    pub longitudinal_weight: f64,
    pub duration_min: f64,
    pub duration_max: f64,
    pub duration_step: f64,
    /// Golden-section bracket width at which refinement stops, seconds.
    pub time_tolerance: f64,
    pub max_iterations: usize,
    pub min_samples: usize,
    /// Fits moving less than this laterally are degenerate, meters.
    pub min_lateral_span: f64,
    /// Samples added before and after an episode when fitting tracks, seconds.
    pub episode_margin: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            longitudinal_weight: 0.1,
            duration_min: 1.0,
            duration_max: 15.0,
            duration_step: 0.5,
            time_tolerance: 1e-6,
            max_iterations: 200,
            min_samples: 10,
            min_lateral_span: 0.1,
            episode_margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("{found} samples, at least {needed} required")]
    InsufficientData { found: usize, needed: usize },
    #[error("degenerate episode: {0}")]
    DegenerateEpisode(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeFitResult {
    pub params: LaneChangeParams,
    /// Absolute maneuver start time, seconds.
    pub t0: f64,
    pub lateral_rmse: f64,
    pub longitudinal_rmse: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Objective after the grid search and after every refinement step.
    pub objective_history: Vec<f64>,
}

/// Inner linear solution for fixed `(t0, T)`.
#[derive(Debug, Clone, Copy)]
struct Inner {
    objective: f64,
    lat_ssr: f64,
    lon_ssr: f64,
    /// `side * d_start`, `side * d_end`
    lat: (f64, f64),
    /// `x0`, `v_start`, `v_end` (signed along travel)
    lon: (f64, f64, f64),
}

struct Problem<'a> {
    samples: &'a [TrajectorySample],
    marking: f64,
    travel: f64,
    weight: f64,
}

impl Problem<'_> {
    fn solve(&self, t0: f64, big_t: f64) -> Option<Inner> {
        if !(big_t > 0.0) {
            return None;
        }
        // lateral: y - m = a (h - 1) + b h
        let (mut g11, mut g12, mut g22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        // longitudinal: travel * (x - x0') = v_s phi1 + v_e phi2, x0' free
        let mut lon_n = Matrix3::<f64>::zeros();
        let mut lon_r = Vector3::<f64>::zeros();
        for p in self.samples {
            let u = p.t - t0;
            let s = (u / big_t).clamp(0.0, 1.0);
            let h = lateral_shape(s).0;
            let (f1, f2) = (h - 1.0, h);
            let r = p.y - self.marking;
            g11 += f1 * f1;
            g12 += f1 * f2;
            g22 += f2 * f2;
            r1 += f1 * r;
            r2 += f2 * r;

            let (phi1, phi2) = if u <= 0.0 {
                (u, 0.0)
            } else if u < big_t {
                (u - u * u / (2.0 * big_t), u * u / (2.0 * big_t))
            } else {
                (0.5 * big_t, 0.5 * big_t + (u - big_t))
            };
            let row = Vector3::new(1.0, self.travel * phi1, self.travel * phi2);
            lon_n += row * row.transpose();
            lon_r += row * p.x;
        }
        let det = g11 * g22 - g12 * g12;
        if !(det > 1e-12 * g11 * g22) {
            return None;
        }
        let a = (g22 * r1 - g12 * r2) / det;
        let b = (g11 * r2 - g12 * r1) / det;
        let lon = lon_n.cholesky()?.solve(&lon_r);

        let (mut lat_ssr, mut lon_ssr) = (0.0, 0.0);
        for p in self.samples {
            let u = p.t - t0;
            let h = lateral_shape((u / big_t).clamp(0.0, 1.0)).0;
            let ey = p.y - self.marking - (a * (h - 1.0) + b * h);
            lat_ssr += ey * ey;
            let (phi1, phi2) = if u <= 0.0 {
                (u, 0.0)
            } else if u < big_t {
                (u - u * u / (2.0 * big_t), u * u / (2.0 * big_t))
            } else {
                (0.5 * big_t, 0.5 * big_t + (u - big_t))
            };
            let ex = p.x - (lon[0] + self.travel * (lon[1] * phi1 + lon[2] * phi2));
            lon_ssr += ex * ex;
        }
        Some(Inner {
            objective: lat_ssr + self.weight * lon_ssr,
            lat_ssr,
            lon_ssr,
            lat: (a, b),
            lon: (lon[0], lon[1], lon[2]),
        })
    }

    fn objective(&self, t0: f64, big_t: f64) -> f64 {
        self.solve(t0, big_t).map_or(f64::INFINITY, |s| s.objective)
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the minimum of `f` on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Fits the lane-change model to a trajectory crossing `marking_y`.
///
/// Samples outside `[t0, t0 + T]` are matched by the model held at its
/// end states: constant lateral offset and constant speed.
pub fn fit_lane_change(
    samples: &[TrajectorySample],
    marking_y: f64,
    cfg: &FitConfig,
) -> Result<LaneChangeFitResult, FitError> {
    if samples.len() < cfg.min_samples.max(3) {
        return Err(FitError::InsufficientData { found: samples.len(), needed: cfg.min_samples.max(3) });
    }
    let first = samples.first().expect("non-empty");
    let last = samples.last().expect("non-empty");
    let travel = if last.x >= first.x { 1.0 } else { -1.0 };
    let problem = Problem { samples, marking: marking_y, travel, weight: cfg.longitudinal_weight };

    let mut gaps: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    gaps.sort_by(f64::total_cmp);
    let step = gaps[gaps.len() / 2];
    if !(step > 0.0) {
        return Err(FitError::DegenerateEpisode("sample times are not increasing".into()));
    }

    // coarse grid over start time and duration
    let mut best: Option<(f64, f64, f64)> = None;
    let n_t0 = ((last.t - first.t) / step).round() as usize;
    let n_dur = ((cfg.duration_max - cfg.duration_min) / cfg.duration_step).round() as usize;
    for i in 0..=n_t0 {
        let t0 = first.t + i as f64 * step;
        for j in 0..=n_dur {
            let big_t = cfg.duration_min + j as f64 * cfg.duration_step;
            let obj = problem.objective(t0, big_t);
            if obj.is_finite() && best.is_none_or(|b| obj < b.2) {
                best = Some((t0, big_t, obj));
            }
        }
    }
    let (t0, big_t, obj) =
        best.ok_or_else(|| FitError::DegenerateEpisode("no start time and duration gives a solvable fit".into()))?;

    // coordinate refinement in (center, duration), which are nearly
    // uncorrelated for the symmetric model
    let mut center = t0 + 0.5 * big_t;
    let mut dur = big_t;
    let mut current = obj;
    let mut history = vec![current];
    let mut half = (cfg.duration_step, cfg.duration_step);
    let mut iterations = 0;
    let mut converged = false;
    let min_dur = 0.5 * cfg.duration_min;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (c_new, f_c) = golden_section(
            |c| problem.objective(c - 0.5 * dur, dur),
            center - half.0,
            center + half.0,
            cfg.time_tolerance,
        );
        let dc = if f_c < current {
            let d = c_new - center;
            center = c_new;
            current = f_c;
            d
        } else {
            0.0
        };
        history.push(current);
        let (t_new, f_t) = golden_section(
            |d| problem.objective(center - 0.5 * d, d),
            (dur - half.1).max(min_dur),
            dur + half.1,
            cfg.time_tolerance,
        );
        let dt = if f_t < current {
            let d = t_new - dur;
            dur = t_new;
            current = f_t;
            d
        } else {
            0.0
        };
        history.push(current);
        if dc.abs() < cfg.time_tolerance && dt.abs() < cfg.time_tolerance {
            converged = true;
            break;
        }
        half = (
            (4.0 * (dc.abs() + dt.abs())).max(10.0 * cfg.time_tolerance),
            (4.0 * (dc.abs() + dt.abs())).max(10.0 * cfg.time_tolerance),
        );
    }

    let t0 = center - 0.5 * dur;
    let inner = problem
        .solve(t0, dur)
        .ok_or_else(|| FitError::DegenerateEpisode("refined fit is singular".into()))?;
    let (a, b) = inner.lat;
    if (a + b).abs() < cfg.min_lateral_span {
        return Err(FitError::DegenerateEpisode(format!("lateral span {:.3} m", (a + b).abs())));
    }
    let side = if a + b > 0.0 { LaneChangeSide::ToLeft } else { LaneChangeSide::ToRight };
    let sign = side.sign();
    let params = LaneChangeParams {
        d_start: sign * a,
        d_end: sign * b,
        v_start: inner.lon.1,
        v_end: inner.lon.2,
        duration: dur,
        side,
    };
    if !params.is_valid() {
        return Err(FitError::DegenerateEpisode(format!("fitted parameters out of range: {params:?}")));
    }
    let n = samples.len() as f64;
    Ok(LaneChangeFitResult {
        params,
        t0,
        lateral_rmse: (inner.lat_ssr / n).sqrt(),
        longitudinal_rmse: (inner.lon_ssr / n).sqrt(),
        converged,
        iterations,
        objective_history: history,
    })
}

/// Samples of `track` covering `episode`, widened by the configured margin.
pub fn episode_samples(track: &Track, episode: &ManeuverEpisode, frame_rate: f64, margin: f64) -> Vec<TrajectorySample> {
    let pad = (margin * frame_rate).round() as u32;
    let lo = episode.start_frame.saturating_sub(pad);
    let hi = episode.end_frame.saturating_add(pad);
    track
        .states
        .iter()
        .filter(|s| s.frame >= lo && s.frame <= hi)
        .map(|s| TrajectorySample { t: s.frame as f64 / frame_rate, x: s.x, y: s.y })
        .collect()
}

/// Lateral position of the marking between two adjacent lanes.
pub fn crossed_marking(markings: &[f64], from_lane: i32, to_lane: i32) -> Option<f64> {
    let k = from_lane.max(to_lane);
    if (from_lane - to_lane).abs() != 1 || k < 1 {
        return None;
    }
    markings.get(k as usize - 1).copied()
}

/// Side of the tailing vehicle the lane changer comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CutInSide {
    FromLeft,
    FromRight,
}

impl CutInSide {
    pub fn as_str(self) -> &'static str {
        match self {
            CutInSide::FromLeft => "fromLeft",
            CutInSide::FromRight => "fromRight",
        }
    }
}

/// A lane change seen from the vehicle it cuts in front of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutInScenario {
    pub lane_change_track_id: u32,
    pub tailing_track_id: u32,
    /// New-lane preceding vehicle at the crossing, 0 if none.
    pub preceding_track_id: u32,
    pub crossing_frame: u32,
    /// Tailing vehicle's THW to the lane changer at the crossing.
    pub entry_thw: Option<f64>,
    pub tail_speed_at_entry: f64,
    pub min_dhw: Option<f64>,
    pub min_thw: Option<f64>,
    pub min_ttc: Option<f64>,
    /// Gap between the new-lane preceding and tailing vehicles at the crossing.
    pub gap_size: Option<f64>,
    pub side: CutInSide,
}

fn vehicle_at(track: &Track, frame: u32) -> Option<FrameVehicle> {
    track.state_at(frame).map(|s| FrameVehicle {
        track_id: track.track_id,
        direction: track.direction,
        length: track.length,
        width: track.width,
        state: *s,
    })
}

fn min_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.flatten().min_by(f64::total_cmp)
}

/// Cut-in scenarios for lane changes that have a tailing vehicle on the
/// new lane at the crossing frame.
///
/// `surround[i]` must be aligned with `tracks[i].states`. Minima are taken
/// over the episode frames in which the lane changer is the tailing
/// vehicle's preceding vehicle.
pub fn extract_cut_ins(
    episodes: &[ManeuverEpisode],
    tracks: &[Track],
    surround: &[Vec<SurroundFrame>],
) -> Vec<CutInScenario> {
    let index: HashMap<u32, usize> = tracks.iter().enumerate().map(|(i, t)| (t.track_id, i)).collect();
    let mut out = Vec::new();
    for ep in episodes.iter().filter(|e| e.kind == ManeuverKind::LaneChange) {
        let Some(lc) = ep.lane_change else { continue };
        let Some(&li) = index.get(&ep.track_id) else { continue };
        let changer = &tracks[li];
        let Some(first) = changer.first_frame() else { continue };
        let Some(sf) = surround[li].get((lc.crossing_frame - first) as usize) else { continue };
        let Some(&ti) = index.get(&sf.following) else { continue };
        let tail = &tracks[ti];
        let dir = changer.direction;
        let (Some(tail_v), Some(changer_v)) = (vehicle_at(tail, lc.crossing_frame), vehicle_at(changer, lc.crossing_frame))
        else {
            continue;
        };
        let entry_thw = headway_metrics(&tail_v, &changer_v, dir).ok().and_then(|h| h.thw);
        let gap = index
            .get(&sf.preceding)
            .and_then(|&pi| vehicle_at(&tracks[pi], lc.crossing_frame))
            .and_then(|lead| gap_size(&tail_v, &lead, dir).ok());

        let tail_first = tail.first_frame().unwrap_or(0);
        let tail_frames: Vec<&SurroundFrame> = (ep.start_frame..=ep.end_frame)
            .filter_map(|f| f.checked_sub(tail_first).and_then(|k| surround[ti].get(k as usize)))
            .filter(|f| f.preceding == changer.track_id)
            .collect();

        let side = if lc.from_lane == lc.to_lane + dir.left_step() { CutInSide::FromLeft } else { CutInSide::FromRight };
        out.push(CutInScenario {
            lane_change_track_id: changer.track_id,
            tailing_track_id: tail.track_id,
            preceding_track_id: sf.preceding,
            crossing_frame: lc.crossing_frame,
            entry_thw,
            tail_speed_at_entry: tail_v.state.vx.abs(),
            min_dhw: min_defined(tail_frames.iter().map(|f| f.dhw)),
            min_thw: min_defined(tail_frames.iter().map(|f| f.thw)),
            min_ttc: min_defined(tail_frames.iter().map(|f| f.ttc)),
            gap_size: gap,
            side,
        });
    }
    out
}

/// Direction-aware helper: the side a lane change moves towards, in
/// road coordinates, for a change from `from_lane` to `to_lane`.
pub fn lateral_side(from_lane: i32, to_lane: i32) -> LaneChangeSide {
    // lane ids grow with y on both carriageways
    if to_lane > from_lane {
        LaneChangeSide::ToLeft
    } else {
        LaneChangeSide::ToRight
    }
}

/// Travel direction implied by a side, for documentation of the sign
/// convention in tests.
pub fn is_left_in_travel(side: LaneChangeSide, dir: DrivingDirection) -> bool {
    side.sign() * dir.sign() > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn params() -> LaneChangeParams {
        LaneChangeParams { d_start: 1.8, d_end: 1.7, v_start: 30.0, v_end: 31.0, duration: 5.0, side: LaneChangeSide::ToLeft }
    }

    /// Samples the model with 1 s of straight driving before and after.
    fn synth(p: &LaneChangeParams, t0: f64, marking: f64, x0: f64, travel: f64) -> Vec<TrajectorySample> {
        let dt = 0.04;
        let end = evaluate_model(p, p.duration).unwrap();
        (0..((p.duration + 2.0) / dt).round() as usize + 1)
            .map(|k| {
                let t = k as f64 * dt;
                let u = t - 1.0;
                let (x, y) = if u < 0.0 {
                    (p.v_start * u, -p.side.sign() * p.d_start)
                } else if u > p.duration {
                    (end.x + p.v_end * (u - p.duration), end.y)
                } else {
                    let m = evaluate_model(p, u).unwrap();
                    (m.x, m.y)
                };
                TrajectorySample { t: t0 + t, x: x0 + travel * x, y: marking + y }
            })
            .collect()
    }

    #[test]
    fn boundary_conditions() {
        let p = params();
        let s0 = evaluate_model(&p, 0.0).unwrap();
        assert_eq!((s0.x, s0.y, s0.vx, s0.vy, s0.ay), (0.0, -1.8, 30.0, 0.0, 0.0));
        let s1 = evaluate_model(&p, p.duration).unwrap();
        assert!((s1.y - 1.7).abs() < 1e-12 && s1.vy.abs() < 1e-12 && s1.ay.abs() < 1e-12);
        assert!((s1.vx - 31.0).abs() < 1e-12);
        assert!(evaluate_model(&p, -0.1).is_err());
        assert!(evaluate_model(&p, 5.1).is_err());
    }

    #[test]
    fn symmetric_midpoint_is_on_the_marking() {
        assert_eq!(lateral_shape(0.5).0, 0.5);
        let p = LaneChangeParams { d_end: 1.8, ..params() };
        assert!(evaluate_model(&p, 2.5).unwrap().y.abs() < 1e-15);
    }

    #[test]
    fn velocity_matches_finite_difference() {
        let p = params();
        let h = 1e-6;
        for k in 1..50 {
            let t = k as f64 * 0.1;
            let (a, b) = (evaluate_model(&p, t - h).unwrap(), evaluate_model(&p, t + h).unwrap());
            let m = evaluate_model(&p, t).unwrap();
            assert!(((b.y - a.y) / (2.0 * h) - m.vy).abs() < 1e-6);
            assert!(((b.vy - a.vy) / (2.0 * h) - m.ay).abs() < 1e-6);
            assert!(((b.x - a.x) / (2.0 * h) - m.vx).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_noise_round_trip() {
        let p = params();
        let samples = synth(&p, 12.0, 3.5, 100.0, 1.0);
        let fit = fit_lane_change(&samples, 3.5, &FitConfig::default()).unwrap();
        let q = fit.params;
        for (got, want) in [(q.d_start, 1.8), (q.d_end, 1.7), (q.v_start, 30.0), (q.v_end, 31.0), (q.duration, 5.0), (fit.t0, 13.0)] {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
        assert_eq!(q.side, LaneChangeSide::ToLeft);
        assert!(fit.lateral_rmse < 1e-6 && fit.longitudinal_rmse < 1e-6, "{fit:?}");
        assert!(fit.converged);
        assert!(fit.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn upper_carriageway_right_change() {
        let p = LaneChangeParams { side: LaneChangeSide::ToRight, ..params() };
        let samples = synth(&p, 0.0, -3.5, 400.0, -1.0);
        let fit = fit_lane_change(&samples, -3.5, &FitConfig::default()).unwrap();
        assert_eq!(fit.params.side, LaneChangeSide::ToRight);
        assert!((fit.params.v_start - 30.0).abs() < 1e-3);
        assert!((fit.params.d_start - 1.8).abs() < 1e-3);
    }

    #[test]
    fn noisy_fit_is_close() {
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut samples = synth(&p, 0.0, 3.5, 0.0, 1.0);
        for s in &mut samples {
            s.y += noise.sample(&mut rng);
        }
        let fit = fit_lane_change(&samples, 3.5, &FitConfig::default()).unwrap();
        assert!((fit.params.duration - 5.0).abs() < 0.2);
        assert!((fit.params.d_start - 1.8).abs() < 0.09);
        assert!(fit.objective_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn straight_line_is_degenerate() {
        let samples: Vec<_> = (0..100).map(|k| TrajectorySample { t: k as f64 * 0.04, x: k as f64, y: 1.75 }).collect();
        assert!(matches!(fit_lane_change(&samples, 3.5, &FitConfig::default()), Err(FitError::DegenerateEpisode(_))));
        assert!(matches!(
            fit_lane_change(&samples[..5], 3.5, &FitConfig::default()),
            Err(FitError::InsufficientData { found: 5, .. })
        ));
    }

    #[test]
    fn mirror_flips_side_only() {
        let p = params();
        let samples = synth(&p, 0.0, 3.5, 0.0, 1.0);
        let mirrored: Vec<_> = samples.iter().map(|s| TrajectorySample { y: -s.y, ..*s }).collect();
        let cfg = FitConfig::default();
        let a = fit_lane_change(&samples, 3.5, &cfg).unwrap();
        let b = fit_lane_change(&mirrored, -3.5, &cfg).unwrap();
        assert_eq!(b.params.side, a.params.side.flipped());
        assert_eq!((a.params.d_start, a.params.d_end), (b.params.d_start, b.params.d_end));
        assert_eq!(a.lateral_rmse, b.lateral_rmse);
    }

    #[test]
    fn marking_lookup() {
        let m = [0.0, 3.5, 7.0, 10.5];
        assert_eq!(crossed_marking(&m, 1, 2), Some(3.5));
        assert_eq!(crossed_marking(&m, 3, 2), Some(7.0));
        assert_eq!(crossed_marking(&m, 1, 3), None);
        assert_eq!(lateral_side(1, 2), LaneChangeSide::ToLeft);
        assert!(is_left_in_travel(LaneChangeSide::ToLeft, DrivingDirection::LowerCarriageway));
    }

    proptest! {
        #[test]
        fn boundary_exactness(d_s in 0.5f64..3.0, d_e in 0.5f64..3.0, v_s in 5.0f64..45.0, v_e in 5.0f64..45.0, dur in 1.0f64..15.0, left in any::<bool>()) {
            let side = if left { LaneChangeSide::ToLeft } else { LaneChangeSide::ToRight };
            let p = LaneChangeParams { d_start: d_s, d_end: d_e, v_start: v_s, v_end: v_e, duration: dur, side };
            for t in [0.0, dur] {
                let m = evaluate_model(&p, t).unwrap();
                prop_assert!(m.vy.abs() < 1e-12 && m.ay.abs() < 1e-12);
            }
            let mut prev = f64::NEG_INFINITY;
            for k in 0..=100 {
                let y = side.sign() * evaluate_model(&p, (dur * k as f64 / 100.0).min(dur)).unwrap().y;
                prop_assert!(y >= prev);
                prev = y;
            }
        }
    }
}
