//! Neighbour assignment and headway metrics per vehicle per frame.
//!
//! DHW is the bumper-to-bumper gap to the preceding vehicle, THW divides
//! it by the ego speed and TTC by the closing speed. "Left" and "right"
//! are taken in each vehicle's own direction of travel.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::ContractViolation;
use crate::model::{ahead_of, DrivingDirection, KinematicState, Track};

/// Below this ego speed THW is undefined, m/s.
pub const MIN_SPEED: f64 = 0.1;
/// Below this closing speed TTC is undefined, m/s.
pub const MIN_CLOSING_SPEED: f64 = 0.1;

/// Neighbours and headway metrics of one vehicle at one frame. Ids use
/// 0 for "none".
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SurroundFrame {
    pub frame: u32,
    pub track_id: u32,
    pub preceding: u32,
    pub following: u32,
    pub left_preceding: u32,
    pub left_alongside: u32,
    pub left_following: u32,
    pub right_preceding: u32,
    pub right_alongside: u32,
    pub right_following: u32,
    pub dhw: Option<f64>,
    pub thw: Option<f64>,
    pub ttc: Option<f64>,
}

impl SurroundFrame {
    pub fn empty(frame: u32, track_id: u32) -> Self {
        SurroundFrame { frame, track_id, ..Default::default() }
    }

    pub fn neighbor_ids(&self) -> [u32; 8] {
        [
            self.preceding,
            self.following,
            self.left_preceding,
            self.left_alongside,
            self.left_following,
            self.right_preceding,
            self.right_alongside,
            self.right_following,
        ]
    }
}

/// One vehicle as seen in a single frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameVehicle {
    pub track_id: u32,
    pub direction: DrivingDirection,
    pub length: f64,
    pub width: f64,
    pub state: KinematicState,
}

impl FrameVehicle {
    fn along(&self) -> f64 {
        self.direction.sign() * self.state.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Headway {
    pub dhw: f64,
    pub thw: Option<f64>,
    pub ttc: Option<f64>,
}

/// Bumper-to-bumper gap between `tail` and `lead`, clamped at 0.
pub fn gap_size(tail: &FrameVehicle, lead: &FrameVehicle, dir: DrivingDirection) -> Result<f64, ContractViolation> {
    if !ahead_of(&lead.state, &tail.state, dir)? {
        return Err(ContractViolation::new(format!(
            "vehicle {} is not ahead of vehicle {} at frame {}",
            lead.track_id, tail.track_id, tail.state.frame
        )));
    }
    let centers = dir.sign() * (lead.state.x - tail.state.x);
    Ok((centers - 0.5 * (lead.length + tail.length)).max(0.0))
}

/// DHW, THW and TTC of `ego` with respect to `lead`.
///
/// Speeds are longitudinal velocities projected on the travel direction.
pub fn headway_metrics(
    ego: &FrameVehicle,
    lead: &FrameVehicle,
    dir: DrivingDirection,
) -> Result<Headway, ContractViolation> {
    let dhw = gap_size(ego, lead, dir)?;
    let v_ego = dir.sign() * ego.state.vx;
    let v_lead = dir.sign() * lead.state.vx;
    let thw = (v_ego.abs() > MIN_SPEED).then(|| dhw / v_ego.abs());
    let closing = v_ego - v_lead;
    let ttc = (closing > MIN_CLOSING_SPEED).then(|| dhw / closing);
    Ok(Headway { dhw, thw, ttc })
}

fn overlaps(a: &FrameVehicle, b: &FrameVehicle) -> bool {
    (a.along() - b.along()).abs() <= 0.5 * (a.length + b.length)
}

/// Vehicles of one lane sorted by (position along travel, track id).
struct LaneIndex<'a> {
    members: Vec<&'a FrameVehicle>,
    max_length: f64,
}

impl<'a> LaneIndex<'a> {
    fn first_after(&self, s: f64) -> usize {
        self.members.partition_point(|v| v.along() <= s)
    }

    fn first_not_before(&self, s: f64) -> usize {
        self.members.partition_point(|v| v.along() < s)
    }

    /// Nearest strictly ahead of `ego` that passes `keep`.
    fn nearest_ahead(&self, ego: &FrameVehicle, keep: impl Fn(&FrameVehicle) -> bool) -> u32 {
        let s = ego.along();
        self.members[self.first_after(s)..]
            .iter()
            .find(|v| v.track_id != ego.track_id && keep(v))
            .map_or(0, |v| v.track_id)
    }

    /// Nearest strictly behind `ego` that passes `keep`; ties by lower id.
    fn nearest_behind(&self, ego: &FrameVehicle, keep: impl Fn(&FrameVehicle) -> bool) -> u32 {
        let s = ego.along();
        let end = self.first_not_before(s);
        let mut best: Option<&FrameVehicle> = None;
        for v in self.members[..end].iter().rev() {
            if let Some(b) = best {
                if v.along() != b.along() {
                    break;
                }
            }
            if v.track_id != ego.track_id && keep(v) {
                best = Some(v);
            }
        }
        best.map_or(0, |v| v.track_id)
    }

    /// Overlapping vehicle with the smallest center distance.
    fn alongside(&self, ego: &FrameVehicle) -> u32 {
        let s = ego.along();
        let reach = 0.5 * (ego.length + self.max_length);
        let lo = self.first_not_before(s - reach);
        let hi = self.first_after(s + reach);
        self.members[lo..hi]
            .iter()
            .filter(|v| v.track_id != ego.track_id && overlaps(ego, v))
            .min_by(|a, b| {
                (a.along() - s)
                    .abs()
                    .total_cmp(&(b.along() - s).abs())
                    .then(a.track_id.cmp(&b.track_id))
            })
            .map_or(0, |v| v.track_id)
    }
}

/// Neighbour slots and headway metrics for every vehicle of one frame.
///
/// Output order follows the input order. Vehicles off the marked lanes
/// (lane id 0) get no neighbours and are nobody's neighbour.
pub fn assign_neighbors(vehicles: &[FrameVehicle]) -> Vec<SurroundFrame> {
    let mut lanes: BTreeMap<(DrivingDirection, i32), LaneIndex> = BTreeMap::new();
    for v in vehicles.iter().filter(|v| v.state.lane_id > 0) {
        let entry = lanes
            .entry((v.direction, v.state.lane_id))
            .or_insert_with(|| LaneIndex { members: Vec::new(), max_length: 0.0 });
        entry.members.push(v);
        entry.max_length = entry.max_length.max(v.length);
    }
    for lane in lanes.values_mut() {
        lane.members
            .sort_by(|a, b| a.along().total_cmp(&b.along()).then(a.track_id.cmp(&b.track_id)));
    }

    vehicles
        .iter()
        .map(|ego| {
            let mut out = SurroundFrame::empty(ego.state.frame, ego.track_id);
            if ego.state.lane_id <= 0 {
                return out;
            }
            let dir = ego.direction;
            let lane = ego.state.lane_id;
            if let Some(own) = lanes.get(&(dir, lane)) {
                out.preceding = own.nearest_ahead(ego, |_| true);
                out.following = own.nearest_behind(ego, |_| true);
                if out.preceding != 0 {
                    let lead = own.members.iter().find(|v| v.track_id == out.preceding).expect("member");
                    let h = headway_metrics(ego, lead, dir).expect("preceding is ahead");
                    out.dhw = Some(h.dhw);
                    out.thw = h.thw;
                    out.ttc = h.ttc;
                }
            }
            let left = lane + dir.left_step();
            let right = lane - dir.left_step();
            let not_overlapping = |v: &FrameVehicle| !overlaps(ego, v);
            if let Some(l) = lanes.get(&(dir, left)) {
                out.left_preceding = l.nearest_ahead(ego, not_overlapping);
                out.left_alongside = l.alongside(ego);
                out.left_following = l.nearest_behind(ego, not_overlapping);
            }
            if let Some(r) = lanes.get(&(dir, right)) {
                out.right_preceding = r.nearest_ahead(ego, not_overlapping);
                out.right_alongside = r.alongside(ego);
                out.right_following = r.nearest_behind(ego, not_overlapping);
            }
            out
        })
        .collect()
}

/// Surround frames for every track, aligned index-for-index with
/// `track.states`.
pub fn compute_surround(tracks: &[Track]) -> Vec<Vec<SurroundFrame>> {
    let mut by_frame: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (si, s) in t.states.iter().enumerate() {
            by_frame.entry(s.frame).or_default().push((ti, si));
        }
    }
    let frames: Vec<(u32, Vec<(usize, usize)>)> = by_frame.into_iter().collect();
    let results: Vec<Vec<SurroundFrame>> = frames
        .par_iter()
        .map(|(_, members)| {
            let vehicles: Vec<FrameVehicle> = members
                .iter()
                .map(|&(ti, si)| {
                    let t = &tracks[ti];
                    FrameVehicle {
                        track_id: t.track_id,
                        direction: t.direction,
                        length: t.length,
                        width: t.width,
                        state: t.states[si],
                    }
                })
                .collect();
            assign_neighbors(&vehicles)
        })
        .collect();

    let mut out: Vec<Vec<SurroundFrame>> = tracks
        .iter()
        .map(|t| vec![SurroundFrame::default(); t.states.len()])
        .collect();
    for ((_, members), res) in frames.iter().zip(results) {
        for (&(ti, si), sf) in members.iter().zip(res) {
            out[ti][si] = sf;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LOWER: DrivingDirection = DrivingDirection::LowerCarriageway;
    const UPPER: DrivingDirection = DrivingDirection::UpperCarriageway;

    fn veh(id: u32, dir: DrivingDirection, lane: i32, x: f64, vx: f64, length: f64) -> FrameVehicle {
        FrameVehicle {
            track_id: id,
            direction: dir,
            length,
            width: 2.0,
            state: KinematicState { frame: 0, x, y: 0.0, vx, vy: 0.0, ax: 0.0, ay: 0.0, lane_id: lane },
        }
    }

    #[test]
    fn lone_vehicle_has_no_neighbors() {
        let out = assign_neighbors(&[veh(1, LOWER, 1, 10.0, 20.0, 4.0)]);
        assert_eq!(out[0].neighbor_ids(), [0; 8]);
        assert_eq!(out[0].dhw, None);
    }

    #[test]
    fn same_lane_pair() {
        let a = veh(1, LOWER, 2, 130.0, 25.0, 4.0);
        let b = veh(2, LOWER, 2, 100.0, 25.0, 4.0);
        let out = assign_neighbors(&[a, b]);
        assert_eq!(out[1].preceding, 1);
        assert_eq!(out[0].following, 2);
        assert_eq!(out[0].preceding, 0);
        // upper carriageway reverses the order
        let out = assign_neighbors(&[veh(1, UPPER, 2, 130.0, -25.0, 4.0), veh(2, UPPER, 2, 100.0, -25.0, 4.0)]);
        assert_eq!(out[0].preceding, 2);
        assert_eq!(out[1].following, 1);
    }

    #[test]
    fn headway_examples() {
        let ego = veh(1, LOWER, 1, 0.0, 25.0, 4.0);
        let lead = veh(2, LOWER, 1, 54.0, 25.0, 4.0);
        let h = headway_metrics(&ego, &lead, LOWER).unwrap();
        assert_eq!((h.dhw, h.thw, h.ttc), (50.0, Some(2.0), None));

        let ego = veh(1, LOWER, 1, 0.0, 30.0, 4.0);
        let lead = veh(2, LOWER, 1, 34.0, 20.0, 4.0);
        assert_eq!(headway_metrics(&ego, &lead, LOWER).unwrap().ttc, Some(3.0));

        let ego = veh(1, LOWER, 1, 0.0, 30.0, 5.0);
        let lead = veh(2, LOWER, 1, 20.0, 20.0, 15.0);
        assert_eq!(headway_metrics(&ego, &lead, LOWER).unwrap().dhw, 10.0);

        assert!(headway_metrics(&lead, &ego, LOWER).is_err());
        let stopped = veh(3, LOWER, 1, 0.0, 0.05, 4.0);
        assert_eq!(headway_metrics(&stopped, &lead, LOWER).unwrap().thw, None);
    }

    #[test]
    fn gap_examples() {
        let tail = veh(1, LOWER, 1, 97.5, 20.0, 5.0);
        let lead = veh(2, LOWER, 1, 152.5, 20.0, 5.0);
        assert_eq!(gap_size(&tail, &lead, LOWER).unwrap(), 50.0);
        let touching = veh(2, LOWER, 1, 102.5, 20.0, 5.0);
        assert_eq!(gap_size(&tail, &touching, LOWER).unwrap(), 0.0);
    }

    #[test]
    fn adjacent_slots() {
        let ego = veh(1, LOWER, 2, 100.0, 25.0, 4.0);
        let left_along = veh(2, LOWER, 3, 102.0, 25.0, 4.0);
        let left_ahead = veh(3, LOWER, 3, 130.0, 25.0, 4.0);
        let right_behind = veh(4, LOWER, 1, 80.0, 25.0, 4.0);
        let out = assign_neighbors(&[ego, left_along, left_ahead, right_behind]);
        let e = out[0];
        assert_eq!((e.left_preceding, e.left_alongside, e.left_following), (3, 2, 0));
        assert_eq!((e.right_preceding, e.right_alongside, e.right_following), (0, 0, 4));
        // mirrored on the upper carriageway, left is lane - 1
        let ego = veh(1, UPPER, 2, 100.0, -25.0, 4.0);
        let other = veh(2, UPPER, 1, 70.0, -25.0, 4.0);
        let out = assign_neighbors(&[ego, other]);
        assert_eq!(out[0].left_preceding, 2);
    }

    /// Per-pair scan implementing the slot definitions directly.
    pub(crate) fn brute_force(vehicles: &[FrameVehicle]) -> Vec<SurroundFrame> {
        vehicles
            .iter()
            .map(|ego| {
                let mut out = SurroundFrame::empty(ego.state.frame, ego.track_id);
                if ego.state.lane_id <= 0 {
                    return out;
                }
                let sign = ego.direction.sign();
                let pick = |lane: i32, want: &dyn Fn(f64, bool) -> bool| -> u32 {
                    let mut best: Option<(f64, u32)> = None;
                    for o in vehicles {
                        if o.track_id == ego.track_id || o.direction != ego.direction || o.state.lane_id != lane || lane <= 0 {
                            continue;
                        }
                        let ds = sign * (o.state.x - ego.state.x);
                        let ov = ds.abs() <= 0.5 * (o.length + ego.length);
                        if !want(ds, ov) {
                            continue;
                        }
                        let key = (ds.abs(), o.track_id);
                        if best.map_or(true, |b| key.0 < b.0 || (key.0 == b.0 && key.1 < b.1)) {
                            best = Some(key);
                        }
                    }
                    best.map_or(0, |b| b.1)
                };
                let lane = ego.state.lane_id;
                let left = lane + ego.direction.left_step();
                let right = lane - ego.direction.left_step();
                out.preceding = pick(lane, &|ds, _| ds > 0.0);
                out.following = pick(lane, &|ds, _| ds < 0.0);
                out.left_preceding = pick(left, &|ds, ov| ds > 0.0 && !ov);
                out.left_alongside = pick(left, &|_, ov| ov);
                out.left_following = pick(left, &|ds, ov| ds < 0.0 && !ov);
                out.right_preceding = pick(right, &|ds, ov| ds > 0.0 && !ov);
                out.right_alongside = pick(right, &|_, ov| ov);
                out.right_following = pick(right, &|ds, ov| ds < 0.0 && !ov);
                if out.preceding != 0 {
                    let lead = vehicles.iter().find(|v| v.track_id == out.preceding).unwrap();
                    let gap = (sign * (lead.state.x - ego.state.x) - 0.5 * (lead.length + ego.length)).max(0.0);
                    let (ve, vl) = (sign * ego.state.vx, sign * lead.state.vx);
                    out.dhw = Some(gap);
                    out.thw = (ve.abs() > MIN_SPEED).then(|| gap / ve.abs());
                    out.ttc = (ve - vl > MIN_CLOSING_SPEED).then(|| gap / (ve - vl));
                }
                out
            })
            .collect()
    }

    fn scene() -> impl Strategy<Value = Vec<FrameVehicle>> {
        proptest::collection::vec(
            (any::<bool>(), 0i32..4, 0.0f64..120.0, 0.0f64..40.0, prop_oneof![Just(4.5), Just(5.0), 3.5f64..18.0]),
            1..50,
        )
        .prop_map(|vs| {
            vs.into_iter()
                .enumerate()
                .map(|(i, (upper, lane, x, v, len))| {
                    let dir = if upper { UPPER } else { LOWER };
                    // coarse grid so exact ties in position occur
                    let x = (x / 2.0).round() * 2.0;
                    veh(i as u32 + 1, dir, lane, x, dir.sign() * v, len)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(vs in scene()) {
            prop_assert_eq!(assign_neighbors(&vs), brute_force(&vs));
        }

        #[test]
        fn thw_times_speed_is_dhw(vs in scene()) {
            for (sf, v) in assign_neighbors(&vs).iter().zip(&vs) {
                prop_assert!(sf.neighbor_ids().iter().all(|&id| id != v.track_id));
                if let (Some(d), Some(t)) = (sf.dhw, sf.thw) {
                    let lhs = t * v.state.vx.abs();
                    prop_assert!((lhs - d).abs() <= 1e-9 * d.max(1e-12));
                }
            }
        }

        #[test]
        fn dhw_is_translation_and_mirror_invariant(shift in -500.0f64..500.0, gap in 0.0f64..80.0, l1 in 3.0f64..15.0, l2 in 3.0f64..15.0) {
            let ego = veh(1, LOWER, 1, 0.0, 20.0, l1);
            let lead = veh(2, LOWER, 1, gap + 0.5 * (l1 + l2) + 1e-3, 20.0, l2);
            let d0 = headway_metrics(&ego, &lead, LOWER).unwrap().dhw;
            let mut e2 = ego; e2.state.x += shift;
            let mut l2v = lead; l2v.state.x += shift;
            let d1 = headway_metrics(&e2, &l2v, LOWER).unwrap().dhw;
            prop_assert!((d0 - d1).abs() < 1e-9);
            let mut em = ego; em.direction = UPPER; em.state.x = -ego.state.x;
            let mut lm = lead; lm.direction = UPPER; lm.state.x = -lead.state.x;
            prop_assert_eq!(headway_metrics(&em, &lm, UPPER).unwrap().dhw, d0);
        }
    }
}
