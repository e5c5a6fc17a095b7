//! End-to-end stages over whole recordings and the canonical report files.
//!
//! `track` turns a detection stream into smoothed tracks with surround
//! metrics. `extract` labels maneuvers, fits lane changes and collects
//! cut-ins and statistics. Many recordings run on a bounded worker pool
//! and results are merged in input order, so outputs do not depend on the
//! number of workers.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_recording, DatasetIssue, Recording, RecordingFileSet};
use crate::fmt::{fmt_f64, fmt_opt};
use crate::kinematics::{smooth_track, SmootherConfig};
use crate::lane_change::{
    crossed_marking, episode_samples, extract_cut_ins, fit_lane_change, CutInScenario, FitConfig, FitError,
    LaneChangeFitResult,
};
use crate::maneuvers::{extract_episodes, ManeuverConfig, ManeuverEpisode, ManeuverKind};
use crate::model::{Detection, RecordingMeta, Track};
use crate::stats::{
    cut_in_thw_stats, maneuver_summary, mean_speed_histogram, truck_ratio_over_time, CutInThwStats, Histogram,
    ManeuverSummary, RatioWindow,
};
use crate::surround::{compute_surround, SurroundFrame};
use crate::tracker::{build_tracks, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    /// Mean-speed histogram bin width, m/s.
    pub speed_bin: f64,
    /// Truck-ratio window, seconds.
    pub truck_window: f64,
    /// Entry-THW histogram bin width, seconds.
    pub thw_bin: f64,
    /// Tail-speed bin width of the THW decile band, m/s.
    pub tail_speed_bin: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { speed_bin: 1.0, truck_window: 60.0, thw_bin: 0.25, tail_speed_bin: 2.0 }
    }
}

/// Every pipeline setting. The tracker frame rate and smoother time step
/// are replaced by each recording's own frame rate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads; 0 picks one per CPU.
    pub jobs: usize,
    /// Replaces every script seed when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<u64>,
    pub tracker: TrackerConfig,
    pub smoother: SmootherConfig,
    pub maneuvers: ManeuverConfig,
    pub fit: FitConfig,
    pub stats: StatsConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.tracker.validate().map_err(|e| e.to_string())?;
        self.smoother.validate().map_err(|e| e.to_string())?;
        self.maneuvers.validate().map_err(|e| e.to_string())?;
        let f = &self.fit;
        if !(f.duration_min > 0.0 && f.duration_max >= f.duration_min && f.duration_step > 0.0 && f.time_tolerance > 0.0)
        {
            return Err(format!("invalid fit config {f:?}"));
        }
        let s = &self.stats;
        if !(s.speed_bin > 0.0 && s.truck_window > 0.0 && s.thw_bin > 0.0 && s.tail_speed_bin > 0.0) {
            return Err(format!("invalid stats config {s:?}"));
        }
        Ok(())
    }

    fn tracker_for(&self, meta: &RecordingMeta) -> TrackerConfig {
        TrackerConfig { frame_rate: meta.frame_rate, ..self.tracker.clone() }
    }

    fn smoother_for(&self, meta: &RecordingMeta) -> SmootherConfig {
        SmootherConfig { dt: 1.0 / meta.frame_rate, ..self.smoother.clone() }
    }
}

/// Structured description of a failed stage.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{stage} failed for {source_path}: {message}")]
pub struct StageError {
    pub stage: String,
    pub source_path: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub issue: Option<DatasetIssue>,
}

impl StageError {
    pub fn new(stage: &str, source: &Path, message: impl Into<String>) -> Self {
        StageError { stage: stage.into(), source_path: source.display().to_string(), message: message.into(), issue: None }
    }

    pub fn from_issue(stage: &str, source: &Path, issue: DatasetIssue) -> Self {
        StageError { issue: Some(issue.clone()), ..Self::new(stage, source, issue.to_string()) }
    }
}

/// Tracker, smoother and surround metrics for one recording's detections.
pub fn track_recording(
    meta: &RecordingMeta,
    frames: &[Vec<Detection>],
    cfg: &PipelineConfig,
) -> Result<(Vec<Track>, Vec<Vec<SurroundFrame>>), String> {
    let raw = build_tracks(frames, &cfg.tracker_for(meta)).map_err(|e| e.to_string())?;
    let smoother = cfg.smoother_for(meta);
    let tracks = raw
        .iter()
        .map(|r| smooth_track(r, meta, &smoother).map(|s| s.track))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let surround = compute_surround(&tracks);
    Ok((tracks, surround))
}

/// Lane-change fit of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub episode: ManeuverEpisode,
    pub result: Result<LaneChangeFitResult, FitError>,
}

/// Everything extracted from one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingAnalysis {
    pub recording_id: u32,
    pub meta: RecordingMeta,
    pub tracks: Vec<Track>,
    pub episodes: Vec<ManeuverEpisode>,
    pub fits: Vec<FitRecord>,
    pub cut_ins: Vec<CutInScenario>,
}

pub fn analyze_recording(rec: &Recording, cfg: &PipelineConfig) -> Result<RecordingAnalysis, String> {
    let mut episodes = Vec::new();
    for (t, s) in rec.tracks.iter().zip(&rec.surround) {
        episodes.extend(extract_episodes(t, s, &cfg.maneuvers).map_err(|e| e.to_string())?);
    }
    let by_id: std::collections::HashMap<u32, &Track> = rec.tracks.iter().map(|t| (t.track_id, t)).collect();
    let fits = episodes
        .iter()
        .filter(|e| e.kind == ManeuverKind::LaneChange)
        .map(|e| {
            let track = by_id[&e.track_id];
            let lc = e.lane_change.expect("lane change info");
            let result = match crossed_marking(rec.meta.markings(track.direction), lc.from_lane, lc.to_lane) {
                Some(marking) => {
                    let samples = episode_samples(track, e, rec.meta.frame_rate, cfg.fit.episode_margin);
                    fit_lane_change(&samples, marking, &cfg.fit)
                }
                None => Err(FitError::DegenerateEpisode(format!("lanes {} and {} are not adjacent", lc.from_lane, lc.to_lane))),
            };
            FitRecord { episode: *e, result }
        })
        .collect();
    let cut_ins = extract_cut_ins(&episodes, &rec.tracks, &rec.surround);
    Ok(RecordingAnalysis {
        recording_id: rec.meta.recording_id,
        meta: rec.meta.clone(),
        tracks: rec.tracks.clone(),
        episodes,
        fits,
        cut_ins,
    })
}

/// Maps `f` over `items` on a pool of `jobs` workers, keeping input order.
pub fn run_parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Reads and analyzes every recording; failures are reported per
/// recording and do not stop the others.
pub fn extract_all(paths: &[RecordingFileSet], cfg: &PipelineConfig) -> Vec<Result<RecordingAnalysis, StageError>> {
    run_parallel(paths, cfg.jobs, |p| {
        let rec = read_recording(p).map_err(|i| StageError::from_issue("read", &p.tracks_path, i))?;
        analyze_recording(&rec, cfg).map_err(|m| StageError::new("extract", &p.tracks_path, m))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub maneuvers: ManeuverSummary,
    pub mean_speed: Histogram,
    /// Per recording id.
    pub truck_ratio: Vec<(u32, Vec<RatioWindow>)>,
    pub cut_in_thw: CutInThwStats,
    pub cut_ins: usize,
    pub lane_change_fits: usize,
    pub lane_change_fit_failures: usize,
}

pub fn dataset_stats(analyses: &[&RecordingAnalysis], cfg: &StatsConfig) -> DatasetStats {
    let tracks: Vec<Track> = analyses.iter().flat_map(|a| a.tracks.iter().cloned()).collect();
    let episodes: Vec<ManeuverEpisode> = analyses.iter().flat_map(|a| a.episodes.iter().copied()).collect();
    let cut_ins: Vec<CutInScenario> = analyses.iter().flat_map(|a| a.cut_ins.iter().copied()).collect();
    let fits = analyses.iter().flat_map(|a| &a.fits);
    let failures = fits.clone().filter(|f| f.result.is_err()).count();
    DatasetStats {
        maneuvers: maneuver_summary(&episodes, &tracks),
        mean_speed: mean_speed_histogram(&tracks, cfg.speed_bin),
        truck_ratio: analyses
            .iter()
            .map(|a| (a.recording_id, truck_ratio_over_time(&a.meta, &a.tracks, cfg.truck_window)))
            .collect(),
        cut_in_thw: cut_in_thw_stats(&cut_ins, cfg.thw_bin, cfg.tail_speed_bin),
        cut_ins: cut_ins.len(),
        lane_change_fits: fits.count() - failures,
        lane_change_fit_failures: failures,
    }
}

pub const EPISODE_HEADER: &str = "recordingId,trackId,kind,startFrame,endFrame,fromLane,toLane,crossingFrame,complete";

/// One CSV row per episode; lane-change columns are empty for other kinds.
pub fn episodes_csv<'a>(rows: impl IntoIterator<Item = (u32, &'a ManeuverEpisode)>) -> String {
    let mut out = format!("{EPISODE_HEADER}\n");
    for (rid, e) in rows {
        let lc = match e.lane_change {
            Some(l) => format!("{},{},{},{}", l.from_lane, l.to_lane, l.crossing_frame, l.complete),
            None => ",,,".to_string(),
        };
        out.push_str(&format!("{rid},{},{},{},{},{lc}\n", e.track_id, e.kind.as_str(), e.start_frame, e.end_frame));
    }
    out
}

pub const FIT_HEADER: &str = "recordingId,trackId,crossingFrame,complete,status,side,dStart,dEnd,vStart,vEnd,duration,t0,lateralRmse,longitudinalRmse,converged,iterations";

pub fn fits_csv<'a>(rows: impl IntoIterator<Item = (u32, &'a FitRecord)>) -> String {
    let mut out = format!("{FIT_HEADER}\n");
    for (rid, f) in rows {
        let lc = f.episode.lane_change.expect("lane change info");
        out.push_str(&format!("{rid},{},{},{},", f.episode.track_id, lc.crossing_frame, lc.complete));
        match &f.result {
            Ok(r) => {
                let p = &r.params;
                let nums = [p.d_start, p.d_end, p.v_start, p.v_end, p.duration, r.t0, r.lateral_rmse, r.longitudinal_rmse];
                let nums: Vec<String> = nums.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&format!("ok,{},{},{},{}\n", p.side.as_str(), nums.join(","), r.converged, r.iterations));
            }
            Err(e) => {
                let kind = match e {
                    FitError::InsufficientData { .. } => "insufficientData",
                    FitError::DegenerateEpisode(_) => "degenerateEpisode",
                };
                out.push_str(&format!("{kind},,,,,,,,,,,\n"));
            }
        }
    }
    out
}

pub const CUT_IN_HEADER: &str = "recordingId,laneChangeId,tailingId,precedingId,crossingFrame,side,entryThw,tailSpeed,minDhw,minThw,minTtc,gapSize";

pub fn cut_ins_csv<'a>(rows: impl IntoIterator<Item = (u32, &'a CutInScenario)>) -> String {
    let mut out = format!("{CUT_IN_HEADER}\n");
    for (rid, c) in rows {
        out.push_str(&format!(
            "{rid},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.lane_change_track_id,
            c.tailing_track_id,
            c.preceding_track_id,
            c.crossing_frame,
            c.side.as_str(),
            fmt_opt(c.entry_thw),
            fmt_f64(c.tail_speed_at_entry),
            fmt_opt(c.min_dhw),
            fmt_opt(c.min_thw),
            fmt_opt(c.min_ttc),
            fmt_opt(c.gap_size),
        ));
    }
    out
}

fn truck_ratio_csv(rows: &[(u32, Vec<RatioWindow>)]) -> String {
    let mut out = String::from("recordingId,start,end,vehicles,trucks,ratio\n");
    for (rid, windows) in rows {
        for w in windows {
            out.push_str(&format!(
                "{rid},{},{},{},{},{}\n",
                fmt_f64(w.start),
                fmt_f64(w.end),
                w.vehicles,
                w.trucks,
                fmt_opt(w.ratio)
            ));
        }
    }
    out
}

/// Report files written by [`write_extract_outputs`].
pub const EXTRACT_FILES: [&str; 9] = [
    "episodes.csv",
    "lane_change_fits.csv",
    "cut_ins.csv",
    "speed_histogram.csv",
    "truck_ratio.csv",
    "thw_histogram.csv",
    "thw_by_speed.csv",
    "summary.json",
    "failures.json",
];

/// Writes episodes, fits, cut-ins, statistics and the failure list.
pub fn write_extract_outputs(
    dir: &Path,
    results: &[Result<RecordingAnalysis, StageError>],
    cfg: &StatsConfig,
) -> io::Result<DatasetStats> {
    fs::create_dir_all(dir)?;
    let ok: Vec<&RecordingAnalysis> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failures: Vec<&StageError> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    let stats = dataset_stats(&ok, cfg);
    fs::write(dir.join("episodes.csv"), episodes_csv(ok.iter().flat_map(|a| a.episodes.iter().map(|e| (a.recording_id, e)))))?;
    fs::write(dir.join("lane_change_fits.csv"), fits_csv(ok.iter().flat_map(|a| a.fits.iter().map(|f| (a.recording_id, f)))))?;
    fs::write(dir.join("cut_ins.csv"), cut_ins_csv(ok.iter().flat_map(|a| a.cut_ins.iter().map(|c| (a.recording_id, c)))))?;
    write_stats_outputs(dir, &stats)?;
    fs::write(dir.join("failures.json"), serde_json::to_string_pretty(&failures).map_err(io::Error::other)? + "\n")?;
    Ok(stats)
}

/// Statistics files only: histograms, truck ratio, THW band and summary.
pub const STATS_FILES: [&str; 5] =
    ["speed_histogram.csv", "truck_ratio.csv", "thw_histogram.csv", "thw_by_speed.csv", "summary.json"];

pub fn write_stats_outputs(dir: &Path, stats: &DatasetStats) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("speed_histogram.csv"), stats.mean_speed.to_csv())?;
    fs::write(dir.join("truck_ratio.csv"), truck_ratio_csv(&stats.truck_ratio))?;
    fs::write(dir.join("thw_histogram.csv"), stats.cut_in_thw.entry_thw.to_csv())?;
    fs::write(dir.join("thw_by_speed.csv"), stats.cut_in_thw.thw_by_speed.to_csv())?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(stats).map_err(io::Error::other)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::write_recording;
    use crate::synth::{generate_truth, random_script, RandomScriptConfig};

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), cfg);
        assert!(PipelineConfig::from_toml_str("[tracker]\ngate_radius = -1.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn zero_noise_tracking_matches_truth() {
        let s = random_script(&RandomScriptConfig { vehicles: 12, lane_change_probability: 0.0, accel_probability: 0.0, ..Default::default() }, 3);
        let truth = generate_truth(&s).unwrap();
        let dets = crate::synth::corrupt(&truth, &s.noise, 1);
        let (tracks, surround) = track_recording(&truth.meta, &dets, &PipelineConfig::default()).unwrap();
        assert_eq!(tracks.len(), truth.tracks.len());
        assert_eq!(surround.len(), tracks.len());
        for t in &tracks {
            let first = t.states[0];
            let tt = truth
                .tracks
                .iter()
                .find(|g| g.state_at(first.frame).is_some_and(|s| (s.x - first.x).abs() < 1e-3 && (s.y - first.y).abs() < 1e-3))
                .expect("matching truth track");
            for s in &t.states[10..] {
                let g = tt.state_at(s.frame).unwrap();
                assert!((s.x - g.x).abs() < 1e-6 && (s.y - g.y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn extract_is_independent_of_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for k in 0..3u64 {
            let mut s = random_script(&RandomScriptConfig { vehicles: 20, ..Default::default() }, k);
            s.recording_id = k as u32 + 1;
            let truth = generate_truth(&s).unwrap();
            let surround = compute_surround(&truth.tracks);
            paths.push(write_recording(dir.path(), &truth.meta, &truth.tracks, &surround).unwrap());
        }
        let mut outs = Vec::new();
        for jobs in [1, 3] {
            let cfg = PipelineConfig { jobs, ..Default::default() };
            let results = extract_all(&paths, &cfg);
            assert!(results.iter().all(|r| r.is_ok()));
            let out = dir.path().join(format!("out{jobs}"));
            write_extract_outputs(&out, &results, &cfg.stats).unwrap();
            outs.push(out);
        }
        for f in EXTRACT_FILES {
            assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
        }
        let fits = fs::read_to_string(outs[0].join("lane_change_fits.csv")).unwrap();
        assert!(fits.lines().count() > 1);
    }

    #[test]
    fn empty_recording_writes_headers() {
        let dir = tempfile::tempdir().unwrap();
        let s = random_script(&RandomScriptConfig { vehicles: 0, ..Default::default() }, 1);
        let mut s = s;
        s.duration = 10.0;
        let truth = generate_truth(&s).unwrap();
        let paths = write_recording(dir.path(), &truth.meta, &[], &[]).unwrap();
        let results = extract_all(&[paths], &PipelineConfig { jobs: 1, ..Default::default() });
        write_extract_outputs(&dir.path().join("out"), &results, &StatsConfig::default()).unwrap();
        let fits = fs::read_to_string(dir.path().join("out/lane_change_fits.csv")).unwrap();
        assert_eq!(fits, format!("{FIT_HEADER}\n"));
    }
}
