//! Dataset statistics: speed histograms, truck ratio, maneuver tallies and
//! cut-in headway distributions.
//!
//! Quantiles use linear interpolation between order statistics
//! (`h = (n - 1) p`), the "type 7" definition.

use serde::Serialize;

use crate::fmt::{fmt_f64, fmt_opt};
use crate::lane_change::CutInScenario;
use crate::maneuvers::{ManeuverEpisode, ManeuverKind};
use crate::model::{RecordingMeta, Track, VehicleClass};

/// Probabilities of the ten deciles; the last one is the maximum.
pub const DECILE_PROBS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

/// Index `k` with `k·w <= v < (k+1)·w`, guarding against rounding in `v / w`.
fn bin_index(v: f64, w: f64) -> i64 {
    let mut k = (v / w).floor() as i64;
    if v < k as f64 * w {
        k -= 1;
    } else if v >= (k + 1) as f64 * w {
        k += 1;
    }
    k
}

impl Histogram {
    /// Bins `[k·w, (k+1)·w)` for `k = 0..` up to the largest sample.
    /// Negative samples go to underflow, non-finite ones to overflow.
    /// No samples gives no bins.
    pub fn fixed_width(samples: &[f64], width: f64) -> Histogram {
        assert!(width > 0.0, "bin width must be positive");
        let mut underflow = 0;
        let mut overflow = 0;
        let mut idx = Vec::with_capacity(samples.len());
        for &v in samples {
            if !v.is_finite() {
                overflow += 1;
            } else if v < 0.0 {
                underflow += 1;
            } else {
                idx.push(bin_index(v, width) as usize);
            }
        }
        let bins = idx.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![0u64; bins];
        for k in idx {
            counts[k] += 1;
        }
        let bin_edges = if bins == 0 { Vec::new() } else { (0..=bins).map(|k| k as f64 * width).collect() };
        Histogram { bin_edges, counts, underflow, overflow }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `lower,upper,count` per bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lower,upper,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{c}\n", fmt_f64(self.bin_edges[k]), fmt_f64(self.bin_edges[k + 1])));
        }
        out
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecileBand {
    pub x_bin_width: f64,
    pub x_bin_centers: Vec<f64>,
    /// `None` for empty bins.
    pub deciles: Vec<Option<[f64; 10]>>,
    pub counts: Vec<usize>,
    pub sparse: Vec<bool>,
}

/// Bins with fewer samples are flagged sparse.
pub const SPARSE_BELOW: usize = 10;

impl DecileBand {
    /// Deciles of `y` within bins `[k·w, (k+1)·w)` of `x`. Pairs with a
    /// negative or non-finite coordinate are skipped.
    pub fn build(pairs: &[(f64, f64)], width: f64) -> DecileBand {
        assert!(width > 0.0, "bin width must be positive");
        let mut bins: Vec<Vec<f64>> = Vec::new();
        for &(x, y) in pairs {
            if !(x.is_finite() && y.is_finite()) || x < 0.0 {
                continue;
            }
            let k = bin_index(x, width) as usize;
            if bins.len() <= k {
                bins.resize(k + 1, Vec::new());
            }
            bins[k].push(y);
        }
        let mut band = DecileBand {
            x_bin_width: width,
            x_bin_centers: Vec::with_capacity(bins.len()),
            deciles: Vec::with_capacity(bins.len()),
            counts: Vec::with_capacity(bins.len()),
            sparse: Vec::with_capacity(bins.len()),
        };
        for (k, mut ys) in bins.into_iter().enumerate() {
            ys.sort_by(f64::total_cmp);
            band.x_bin_centers.push((k as f64 + 0.5) * width);
            band.counts.push(ys.len());
            band.sparse.push(ys.len() < SPARSE_BELOW);
            band.deciles.push(if ys.is_empty() {
                None
            } else {
                Some(DECILE_PROBS.map(|p| quantile_sorted(&ys, p).expect("non-empty")))
            });
        }
        band
    }

    pub fn median(&self, bin: usize) -> Option<f64> {
        self.deciles.get(bin).copied().flatten().map(|d| d[4])
    }

    /// `center,count,sparse,p10..p100`; empty bins carry `-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("center,count,sparse");
        for p in DECILE_PROBS {
            out.push_str(&format!(",p{}", (p * 100.0).round() as u32));
        }
        out.push('\n');
        for k in 0..self.counts.len() {
            out.push_str(&format!("{},{},{}", fmt_f64(self.x_bin_centers[k]), self.counts[k], self.sparse[k]));
            for j in 0..10 {
                out.push(',');
                out.push_str(&fmt_opt(self.deciles[k].map(|d| d[j])));
            }
            out.push('\n');
        }
        out
    }
}

/// One sample per track: its mean speed.
pub fn mean_speed_histogram(tracks: &[Track], bin_width: f64) -> Histogram {
    let speeds: Vec<f64> = tracks.iter().map(|t| t.mean_speed).collect();
    Histogram::fixed_width(&speeds, bin_width)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioWindow {
    pub start: f64,
    pub end: f64,
    pub vehicles: usize,
    pub trucks: usize,
    /// `None` when no vehicle entered in the window.
    pub ratio: Option<f64>,
}

/// Truck share among vehicles entering each window of the recording's
/// own clock. A vehicle is counted once, in the window holding its first
/// frame.
pub fn truck_ratio_over_time(meta: &RecordingMeta, tracks: &[Track], window: f64) -> Vec<RatioWindow> {
    assert!(window > 0.0, "window must be positive");
    let mut n = (meta.duration / window).ceil().max(1.0) as usize;
    let mut tally: Vec<(usize, usize)> = vec![(0, 0); n];
    for t in tracks {
        let Some(first) = t.first_frame() else { continue };
        let k = bin_index(first as f64 / meta.frame_rate, window).max(0) as usize;
        if k >= n {
            n = k + 1;
            tally.resize(n, (0, 0));
        }
        tally[k].0 += 1;
        if t.class == VehicleClass::Truck {
            tally[k].1 += 1;
        }
    }
    tally
        .into_iter()
        .enumerate()
        .map(|(k, (vehicles, trucks))| RatioWindow {
            start: k as f64 * window,
            end: (k + 1) as f64 * window,
            vehicles,
            trucks,
            ratio: (vehicles > 0).then(|| trucks as f64 / vehicles as f64),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ManeuverSummary {
    pub vehicles: usize,
    pub free_driving: usize,
    pub vehicle_following: usize,
    pub critical: usize,
    pub lane_changes: usize,
    pub lane_changes_complete: usize,
    pub lane_changes_partial: usize,
    /// Complete lane changes per vehicle, 0 without vehicles.
    pub lane_change_rate: f64,
}

pub fn maneuver_summary(episodes: &[ManeuverEpisode], tracks: &[Track]) -> ManeuverSummary {
    let mut s = ManeuverSummary { vehicles: tracks.len(), ..Default::default() };
    for e in episodes {
        match e.kind {
            ManeuverKind::FreeDriving => s.free_driving += 1,
            ManeuverKind::VehicleFollowing => s.vehicle_following += 1,
            ManeuverKind::Critical => s.critical += 1,
            ManeuverKind::LaneChange => {
                s.lane_changes += 1;
                if e.lane_change.is_some_and(|l| l.complete) {
                    s.lane_changes_complete += 1;
                } else {
                    s.lane_changes_partial += 1;
                }
            }
        }
    }
    if s.vehicles > 0 {
        s.lane_change_rate = s.lane_changes_complete as f64 / s.vehicles as f64;
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutInThwStats {
    pub entry_thw: Histogram,
    pub thw_by_speed: DecileBand,
}

/// Histogram of defined entry THW values (bin width `thw_bin`) and their
/// deciles per tail-speed bin of width `speed_bin`.
pub fn cut_in_thw_stats(scenarios: &[CutInScenario], thw_bin: f64, speed_bin: f64) -> CutInThwStats {
    let thw: Vec<f64> = scenarios.iter().filter_map(|s| s.entry_thw).collect();
    let pairs: Vec<(f64, f64)> =
        scenarios.iter().filter_map(|s| s.entry_thw.map(|t| (s.tail_speed_at_entry, t))).collect();
    CutInThwStats { entry_thw: Histogram::fixed_width(&thw, thw_bin), thw_by_speed: DecileBand::build(&pairs, speed_bin) }
}
