//! Frame-to-frame association of detections into identity-stable tracks.
//!
//! Association is greedy nearest-neighbour inside a distance gate. New
//! tracks stay tentative until they collect `min_hits_to_confirm`
//! consecutive matches; a tentative track that misses a frame is dropped,
//! which removes single-frame false positives. Confirmed tracks coast on a
//! constant-velocity prediction for at most `max_coast` frames.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Detection, VehicleClass};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Maximum center distance between prediction and detection, meters.
    pub gate_radius: f64,
    pub min_hits_to_confirm: usize,
    pub max_coast: usize,
    pub frame_rate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { gate_radius: 2.5, min_hits_to_confirm: 5, max_coast: 12, frame_rate: 25.0 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        if !(self.gate_radius > 0.0) || self.min_hits_to_confirm < 1 || !(self.frame_rate > 0.0) {
            return Err(TrackerError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("detection for frame {found} passed while processing frame {expected}")]
    FrameSkew { expected: u32, found: u32 },
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
}

/// One per-frame entry of a raw track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: u32,
    pub x: f64,
    pub y: f64,
    /// `false` for coasted frames filled by prediction.
    pub measured: bool,
    /// Index of the matched detection within its frame's list.
    pub detection: Option<usize>,
}

/// Observations used for the one-frame prediction.
pub const PREDICTION_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub track_id: u32,
    pub observations: Vec<Observation>,
    pub car_votes: u32,
    pub truck_votes: u32,
    lengths: Vec<f64>,
    widths: Vec<f64>,
}

impl RawTrack {
    fn spawn(track_id: u32, det: &Detection, det_idx: usize) -> Self {
        let mut t = RawTrack {
            track_id,
            observations: Vec::new(),
            car_votes: 0,
            truck_votes: 0,
            lengths: Vec::new(),
            widths: Vec::new(),
        };
        t.push_measured(det, det_idx);
        t
    }

    /// Builds a track from explicit observations, e.g. for smoothing tests.
    pub fn from_observations(
        track_id: u32,
        observations: Vec<Observation>,
        class: VehicleClass,
        length: f64,
        width: f64,
    ) -> Self {
        let (car_votes, truck_votes) = match class {
            VehicleClass::Car => (1, 0),
            VehicleClass::Truck => (0, 1),
        };
        RawTrack {
            track_id,
            observations,
            car_votes,
            truck_votes,
            lengths: vec![length],
            widths: vec![width],
        }
    }

    fn push_measured(&mut self, det: &Detection, det_idx: usize) {
        self.observations.push(Observation {
            frame: det.frame,
            x: det.cx,
            y: det.cy,
            measured: true,
            detection: Some(det_idx),
        });
        match det.class_hint {
            Some(VehicleClass::Car) => self.car_votes += 1,
            Some(VehicleClass::Truck) => self.truck_votes += 1,
            None => {}
        }
        self.lengths.push(det.length);
        self.widths.push(det.width);
    }

    pub fn last_frame(&self) -> u32 {
        self.observations.last().map_or(0, |o| o.frame)
    }

    pub fn first_frame(&self) -> u32 {
        self.observations.first().map_or(0, |o| o.frame)
    }

    pub fn measured_count(&self) -> usize {
        self.observations.iter().filter(|o| o.measured).count()
    }

    /// Center one frame ahead, from a constant-velocity least-squares line
    /// through the last [`PREDICTION_WINDOW`] observations.
    pub fn predict_next(&self) -> (f64, f64) {
        let obs = &self.observations[self.observations.len().saturating_sub(PREDICTION_WINDOW)..];
        let Some(last) = obs.last() else {
            return (f64::NAN, f64::NAN);
        };
        let n = obs.len() as f64;
        let next = f64::from(last.frame + 1);
        let mean_t = obs.iter().map(|o| f64::from(o.frame)).sum::<f64>() / n;
        let stt: f64 = obs.iter().map(|o| (f64::from(o.frame) - mean_t).powi(2)).sum();
        let line = |z: &dyn Fn(&Observation) -> f64| {
            let mean_z = obs.iter().map(z).sum::<f64>() / n;
            if stt == 0.0 {
                return mean_z;
            }
            let slope = obs.iter().map(|o| (f64::from(o.frame) - mean_t) * (z(o) - mean_z)).sum::<f64>() / stt;
            mean_z + slope * (next - mean_t)
        };
        (line(&|o| o.x), line(&|o| o.y))
    }

    /// Majority class over detection hints; ties go to `Car`.
    pub fn class(&self) -> VehicleClass {
        if self.truck_votes > self.car_votes {
            VehicleClass::Truck
        } else {
            VehicleClass::Car
        }
    }

    /// Median detected (length, width).
    pub fn extent(&self) -> (f64, f64) {
        (median(&self.lengths), median(&self.widths))
    }

    fn trailing_coast(&self) -> usize {
        self.observations.iter().rev().take_while(|o| !o.measured).count()
    }

    fn trim_predicted_tail(&mut self) {
        let keep = self.observations.len() - self.trailing_coast();
        self.observations.truncate(keep);
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Outcome of matching one frame's detections against the active tracks.
///
/// Indices refer to positions in the `active` and `dets` slices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy gated nearest-neighbour matching.
///
/// Feasible pairs are taken in ascending distance; ties go to the lower
/// track id, then the lower detection index.
pub fn associate_frame(
    active: &[RawTrack],
    dets: &[Detection],
    cfg: &TrackerConfig,
) -> Result<Assignment, TrackerError> {
    if let Some(first) = dets.first() {
        if let Some(d) = dets.iter().find(|d| d.frame != first.frame) {
            return Err(TrackerError::FrameSkew { expected: first.frame, found: d.frame });
        }
        if let Some(t) = active.iter().find(|t| t.last_frame() + 1 != first.frame) {
            return Err(TrackerError::FrameSkew { expected: t.last_frame() + 1, found: first.frame });
        }
    }

    // detections sorted by x so each track only scans its gate window
    let mut by_x: Vec<usize> = (0..dets.len()).collect();
    by_x.sort_by(|&a, &b| dets[a].cx.total_cmp(&dets[b].cx).then(a.cmp(&b)));
    let xs: Vec<f64> = by_x.iter().map(|&i| dets[i].cx).collect();

    let mut candidates: Vec<(f64, u32, usize, usize)> = Vec::new();
    for (ti, track) in active.iter().enumerate() {
        let (px, py) = track.predict_next();
        let lo = xs.partition_point(|&x| x < px - cfg.gate_radius);
        for &di in &by_x[lo..] {
            let d = &dets[di];
            if d.cx > px + cfg.gate_radius {
                break;
            }
            let dist = (d.cx - px).hypot(d.cy - py);
            if dist <= cfg.gate_radius {
                candidates.push((dist, track.track_id, di, ti));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut track_used = vec![false; active.len()];
    let mut det_used = vec![false; dets.len()];
    let mut out = Assignment::default();
    for (_, _, di, ti) in candidates {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            out.matches.push((ti, di));
        }
    }
    out.matches.sort_unstable();
    out.unmatched_tracks = (0..active.len()).filter(|&i| !track_used[i]).collect();
    out.unmatched_detections = (0..dets.len()).filter(|&i| !det_used[i]).collect();
    Ok(out)
}

/// Stateful multi-frame tracker. Feed frames in order with [`Tracker::step`].
#[derive(Debug)]
pub struct Tracker {
    cfg: TrackerConfig,
    active: Vec<RawTrack>,
    finished: Vec<RawTrack>,
    next_id: u32,
    next_frame: u32,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Tracker { cfg, active: Vec::new(), finished: Vec::new(), next_id: 1, next_frame: 0 })
    }

    fn is_confirmed(&self, t: &RawTrack) -> bool {
        t.measured_count() >= self.cfg.min_hits_to_confirm
    }

    pub fn step(&mut self, frame: u32, dets: &[Detection]) -> Result<(), TrackerError> {
        if frame != self.next_frame {
            return Err(TrackerError::FrameSkew { expected: self.next_frame, found: frame });
        }
        if let Some(d) = dets.iter().find(|d| d.frame != frame) {
            return Err(TrackerError::FrameSkew { expected: frame, found: d.frame });
        }
        let assignment = associate_frame(&self.active, dets, &self.cfg)?;

        for &(ti, di) in &assignment.matches {
            self.active[ti].push_measured(&dets[di], di);
        }
        let mut drop = vec![false; self.active.len()];
        for &ti in &assignment.unmatched_tracks {
            if !self.is_confirmed(&self.active[ti]) {
                drop[ti] = true;
                continue;
            }
            let track = &mut self.active[ti];
            if track.trailing_coast() >= self.cfg.max_coast {
                drop[ti] = true;
                track.trim_predicted_tail();
                self.finished.push(track.clone());
                continue;
            }
            let (x, y) = track.predict_next();
            track.observations.push(Observation { frame, x, y, measured: false, detection: None });
        }
        let mut idx = 0;
        self.active.retain(|_| {
            let keep = !drop[idx];
            idx += 1;
            keep
        });
        for &di in &assignment.unmatched_detections {
            self.active.push(RawTrack::spawn(self.next_id, &dets[di], di));
            self.next_id += 1;
        }
        self.next_frame += 1;
        Ok(())
    }

    /// Ends the stream and returns confirmed tracks renumbered from 1 in
    /// spawn order.
    pub fn finish(mut self) -> Vec<RawTrack> {
        let min_hits = self.cfg.min_hits_to_confirm;
        for mut t in self.active.drain(..) {
            t.trim_predicted_tail();
            self.finished.push(t);
        }
        let mut out: Vec<RawTrack> = self
            .finished
            .into_iter()
            .filter(|t| t.measured_count() >= min_hits)
            .collect();
        out.sort_by_key(|t| t.track_id);
        for (i, t) in out.iter_mut().enumerate() {
            t.track_id = i as u32 + 1;
        }
        out
    }
}

/// Runs the tracker over frames indexed consecutively from 0.
pub fn build_tracks(frames: &[Vec<Detection>], cfg: &TrackerConfig) -> Result<Vec<RawTrack>, TrackerError> {
    let mut tracker = Tracker::new(cfg.clone())?;
    for (f, dets) in frames.iter().enumerate() {
        tracker.step(f as u32, dets)?;
    }
    Ok(tracker.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: u32, x: f64, y: f64) -> Detection {
        Detection { frame, cx: x, cy: y, length: 4.5, width: 1.8, class_hint: Some(VehicleClass::Car) }
    }

    fn track_at(id: u32, frame: u32, x: f64, y: f64) -> RawTrack {
        RawTrack::spawn(id, &det(frame, x, y), 0)
    }

    #[test]
    fn detection_inside_gate_matches() {
        let cfg = TrackerConfig::default();
        let a = associate_frame(&[track_at(1, 0, 100.0, 4.0)], &[det(1, 100.4, 4.0)], &cfg).unwrap();
        assert_eq!(a.matches, vec![(0, 0)]);
    }

    #[test]
    fn detection_outside_gate_spawns() {
        let cfg = TrackerConfig::default();
        let a = associate_frame(&[track_at(1, 0, 100.0, 4.0)], &[det(1, 103.0, 4.0)], &cfg).unwrap();
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_detections, vec![0]);
        assert_eq!(a.unmatched_tracks, vec![0]);
    }

    #[test]
    fn nearer_track_wins() {
        let cfg = TrackerConfig::default();
        let tracks = [track_at(1, 0, 100.0, 4.0), track_at(2, 0, 101.0, 4.0)];
        let dets = [det(1, 100.4, 4.0)];
        let a = associate_frame(&tracks, &dets, &cfg).unwrap();
        // enumerate both single-pair assignments and take the shorter one
        let best = (0..2)
            .min_by(|&i, &j| {
                let di = (tracks[i].predict_next().0 - 100.4).abs();
                let dj = (tracks[j].predict_next().0 - 100.4).abs();
                di.total_cmp(&dj)
            })
            .unwrap();
        assert_eq!(a.matches, vec![(best, 0)]);
        assert_eq!(best, 0);
    }

    #[test]
    fn equal_distance_goes_to_lower_id() {
        let cfg = TrackerConfig::default();
        let tracks = [track_at(7, 0, 101.0, 4.0), track_at(3, 0, 99.0, 4.0)];
        let a = associate_frame(&tracks, &[det(1, 100.0, 4.0)], &cfg).unwrap();
        assert_eq!(a.matches, vec![(1, 0)]);
    }

    #[test]
    fn skewed_frames_are_rejected() {
        let cfg = TrackerConfig::default();
        let err = associate_frame(&[track_at(1, 0, 0.0, 0.0)], &[det(2, 0.0, 0.0)], &cfg);
        assert!(matches!(err, Err(TrackerError::FrameSkew { .. })));
        let mut t = Tracker::new(cfg).unwrap();
        assert!(t.step(1, &[]).is_err());
    }

    #[test]
    fn prediction_is_exact_on_a_line_and_damps_jitter() {
        let mut t = track_at(1, 0, 0.0, 3.0);
        assert_eq!(t.predict_next(), (0.0, 3.0));
        for f in 1..8u32 {
            t.push_measured(&det(f, 1.5 * f as f64, 3.0 - 0.2 * f as f64), 0);
        }
        let (x, y) = t.predict_next();
        assert!((x - 12.0).abs() < 1e-12 && (y - 1.4).abs() < 1e-12);

        // one detection 0.3 m off: two-point extrapolation would miss by 0.6
        let mut j = track_at(2, 0, 0.0, 0.0);
        for f in 1..5u32 {
            j.push_measured(&det(f, f as f64 + if f == 4 { 0.3 } else { 0.0 }, 0.0), 0);
        }
        assert!((j.predict_next().0 - 5.0).abs() <= 0.24 + 1e-12);
    }

    #[test]
    fn short_lived_detection_is_dropped() {
        let cfg = TrackerConfig::default();
        let mut frames = vec![Vec::new(); 20];
        frames[3].push(det(3, 50.0, 2.0));
        frames[4].push(det(4, 50.5, 2.0));
        assert!(build_tracks(&frames, &cfg).unwrap().is_empty());
    }

    #[test]
    fn gap_is_filled_on_the_line() {
        let cfg = TrackerConfig::default();
        let frames: Vec<Vec<Detection>> = (0..40u32)
            .map(|f| if (10..=12).contains(&f) { vec![] } else { vec![det(f, 1.0 * f as f64, 3.0)] })
            .collect();
        let tracks = build_tracks(&frames, &cfg).unwrap();
        assert_eq!(tracks.len(), 1);
        let t = &tracks[0];
        assert_eq!(t.observations.len(), 40);
        for o in &t.observations {
            assert_eq!(o.measured, !(10..=12).contains(&o.frame));
            assert!((o.x - o.frame as f64).abs() < 1e-12);
            assert!((o.y - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn long_gap_terminates_and_trims() {
        let cfg = TrackerConfig::default();
        let frames: Vec<Vec<Detection>> = (0..60u32)
            .map(|f| if f < 20 { vec![det(f, f as f64, 3.0)] } else { vec![] })
            .collect();
        let tracks = build_tracks(&frames, &cfg).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].last_frame(), 19);
        assert!(tracks[0].observations.iter().all(|o| o.measured));
    }

    #[test]
    fn parallel_vehicles_keep_identity() {
        let cfg = TrackerConfig::default();
        let frames: Vec<Vec<Detection>> = (0..100u32)
            .map(|f| vec![det(f, f as f64, 1.75), det(f, 20.0 + f as f64, 1.75)])
            .collect();
        let tracks = build_tracks(&frames, &cfg).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.observations.len(), 100);
            let offset = t.observations[0].x;
            // identity check: every frame stays on the same vehicle
            for o in &t.observations {
                assert_eq!(o.x, offset + o.frame as f64);
            }
        }
    }

    #[test]
    fn class_vote_and_extent() {
        let mut t = track_at(1, 0, 0.0, 0.0);
        let truck = Detection { class_hint: Some(VehicleClass::Truck), length: 15.0, ..det(1, 1.0, 0.0) };
        t.push_measured(&truck, 0);
        assert_eq!(t.class(), VehicleClass::Car);
        t.push_measured(&Detection { length: 16.0, ..truck }, 0);
        assert_eq!(t.class(), VehicleClass::Truck);
        assert_eq!(t.extent(), (15.0, 1.8));
    }
}
