//! Reader, writer and validator for the three-table recording file set.
//!
//! Files of recording `NN` are `NN_recordingMeta.csv`, `NN_tracksMeta.csv`
//! and `NN_tracks.csv`. Lists inside a cell are `;`-separated. Neighbour
//! ids use `0` for none and `dhw`/`thw`/`ttc` use `-1` for undefined.
//! Floats are written by [`crate::fmt::fmt_f64`], so write, read, write is
//! byte-identical.
//!
//! `leftPrecedingId` and friends are relative to the vehicle's own travel
//! direction: on the lower carriageway left is `+y`, on the upper `-y`.
//!
//! `pixel_size` is not part of the schema; reading sets it to
//! [`DEFAULT_PIXEL_SIZE`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::fmt::{fmt_f64, fmt_opt};
use crate::model::{
    lane_in, Detection, DrivingDirection, KinematicState, RecordingMeta, SpeedLimit, Track,
    VehicleClass, DEFAULT_PIXEL_SIZE,
};
use crate::surround::SurroundFrame;

pub const RECORDING_META_COLUMNS: [&str; 7] = [
    "id",
    "locationId",
    "frameRate",
    "duration",
    "upperLaneMarkings",
    "lowerLaneMarkings",
    "speedLimits",
];

pub const TRACKS_META_COLUMNS: [&str; 10] = [
    "id",
    "length",
    "width",
    "class",
    "drivingDirection",
    "meanSpeed",
    "numFrames",
    "initialFrame",
    "finalFrame",
    "numLaneChanges",
];

pub const TRACKS_COLUMNS: [&str; 20] = [
    "frame",
    "id",
    "x",
    "y",
    "xVelocity",
    "yVelocity",
    "xAcceleration",
    "yAcceleration",
    "laneId",
    "precedingId",
    "followingId",
    "leftPrecedingId",
    "leftAlongsideId",
    "leftFollowingId",
    "rightPrecedingId",
    "rightAlongsideId",
    "rightFollowingId",
    "dhw",
    "thw",
    "ttc",
];

pub const DETECTION_COLUMNS: [&str; 6] = ["frame", "cx", "cy", "length", "width", "class"];

/// Paths of one recording's tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordingFileSet {
    pub recording_meta_path: PathBuf,
    pub tracks_meta_path: PathBuf,
    pub tracks_path: PathBuf,
    /// Echoed, never opened.
    pub background_image_path: Option<PathBuf>,
}

impl RecordingFileSet {
    /// Conventional file names for recording `id` inside `dir`. The
    /// background image is set when `NN_highway.png` exists.
    pub fn in_dir(dir: &Path, id: u32) -> Self {
        let image = dir.join(format!("{id:02}_highway.png"));
        RecordingFileSet {
            recording_meta_path: dir.join(format!("{id:02}_recordingMeta.csv")),
            tracks_meta_path: dir.join(format!("{id:02}_tracksMeta.csv")),
            tracks_path: dir.join(format!("{id:02}_tracks.csv")),
            background_image_path: image.exists().then_some(image),
        }
    }

    /// File sets of every `*_recordingMeta.csv` in `dir`, sorted by name.
    pub fn discover(dir: &Path) -> io::Result<Vec<RecordingFileSet>> {
        let mut prefixes = Vec::new();
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            if let Some(prefix) = name.to_str().and_then(|n| n.strip_suffix("_recordingMeta.csv")) {
                prefixes.push(prefix.to_string());
            }
        }
        prefixes.sort();
        Ok(prefixes
            .into_iter()
            .map(|p| {
                let image = dir.join(format!("{p}_highway.png"));
                RecordingFileSet {
                    recording_meta_path: dir.join(format!("{p}_recordingMeta.csv")),
                    tracks_meta_path: dir.join(format!("{p}_tracksMeta.csv")),
                    tracks_path: dir.join(format!("{p}_tracks.csv")),
                    background_image_path: image.exists().then_some(image),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum IssueKind {
    MissingFile,
    Io,
    MissingColumn,
    TypeMismatch,
    DanglingReference,
    NonMonotoneFrames,
    InvariantViolation,
    DuplicateId,
}

/// One problem found in a file set. `row` is the 1-based line number in
/// the file, the header being line 1.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
pub struct DatasetIssue {
    pub kind: IssueKind,
    pub file: String,
    pub row: Option<u64>,
    pub column: Option<String>,
    pub track_id: Option<u32>,
    pub message: String,
}

impl fmt::Display for DatasetIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} in {}", self.kind, self.file)?;
        if let Some(r) = self.row {
            write!(f, " row {r}")?;
        }
        if let Some(c) = &self.column {
            write!(f, " column {c}")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl DatasetIssue {
    fn new(kind: IssueKind, file: &str, message: impl Into<String>) -> Self {
        DatasetIssue { kind, file: file.to_string(), row: None, column: None, track_id: None, message: message.into() }
    }

    fn at(mut self, row: u64, column: Option<&str>) -> Self {
        self.row = Some(row);
        self.column = column.map(str::to_string);
        self
    }

    fn track(mut self, id: u32) -> Self {
        self.track_id = Some(id);
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<DatasetIssue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// In-memory recording. `surround[i]` is aligned with `tracks[i].states`.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub meta: RecordingMeta,
    pub tracks: Vec<Track>,
    pub surround: Vec<Vec<SurroundFrame>>,
}

/// Reads and fully validates a recording; fails with the first issue
/// [`validate`] would report.
pub fn read_recording(paths: &RecordingFileSet) -> Result<Recording, DatasetIssue> {
    let (rec, mut issues) = parse(paths);
    if issues.is_empty() {
        Ok(rec.expect("parse yields a recording when clean"))
    } else {
        Err(issues.swap_remove(0))
    }
}

/// Every issue in the file set. Empty exactly when [`read_recording`]
/// succeeds.
pub fn validate(paths: &RecordingFileSet) -> ValidationReport {
    ValidationReport { issues: parse(paths).1 }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

struct Table {
    file: String,
    columns: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn load(path: &Path, required: &[&str], issues: &mut Vec<DatasetIssue>) -> Option<Table> {
        let file = file_name(path);
        let handle = match File::open(path) {
            Ok(h) => h,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                issues.push(DatasetIssue::new(IssueKind::MissingFile, &file, format!("{} not found", path.display())));
                return None;
            }
            Err(e) => {
                issues.push(DatasetIssue::new(IssueKind::Io, &file, e.to_string()));
                return None;
            }
        };
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(io::BufReader::new(handle));
        let headers = match reader.headers() {
            Ok(h) => h.clone(),
            Err(e) => {
                issues.push(DatasetIssue::new(IssueKind::Io, &file, e.to_string()));
                return None;
            }
        };
        let columns: HashMap<String, usize> =
            headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        let missing: Vec<&str> = required.iter().copied().filter(|c| !columns.contains_key(*c)).collect();
        if !missing.is_empty() {
            for c in missing {
                let mut issue = DatasetIssue::new(IssueKind::MissingColumn, &file, format!("column {c} missing"));
                issue.column = Some(c.to_string());
                issues.push(issue);
            }
            return None;
        }
        let mut rows = Vec::new();
        for rec in reader.records() {
            match rec {
                Ok(r) => {
                    let line = r.position().map(|p| p.line()).unwrap_or(0);
                    rows.push((line, r));
                }
                Err(e) => {
                    let line = e.position().map(|p| p.line());
                    let mut issue = DatasetIssue::new(IssueKind::Io, &file, e.to_string());
                    issue.row = line;
                    issues.push(issue);
                    return None;
                }
            }
        }
        Some(Table { file, columns, rows })
    }

    fn cell<'a>(&self, rec: &'a csv::StringRecord, line: u64, col: &str, issues: &mut Vec<DatasetIssue>) -> Option<&'a str> {
        let v = rec.get(self.columns[col]);
        if v.is_none() {
            issues.push(DatasetIssue::new(IssueKind::TypeMismatch, &self.file, "missing field").at(line, Some(col)));
        }
        v
    }

    fn parse<T: std::str::FromStr>(
        &self,
        rec: &csv::StringRecord,
        line: u64,
        col: &str,
        what: &str,
        issues: &mut Vec<DatasetIssue>,
    ) -> Option<T> {
        let raw = self.cell(rec, line, col, issues)?;
        match raw.trim().parse::<T>() {
            Ok(v) => Some(v),
            Err(_) => {
                issues.push(
                    DatasetIssue::new(IssueKind::TypeMismatch, &self.file, format!("expected {what}, got {raw:?}"))
                        .at(line, Some(col)),
                );
                None
            }
        }
    }

    fn int<T: std::str::FromStr>(&self, rec: &csv::StringRecord, line: u64, col: &str, issues: &mut Vec<DatasetIssue>) -> Option<T> {
        self.parse(rec, line, col, "integer", issues)
    }

    fn float(&self, rec: &csv::StringRecord, line: u64, col: &str, issues: &mut Vec<DatasetIssue>) -> Option<f64> {
        let v: f64 = self.parse(rec, line, col, "number", issues)?;
        if v.is_finite() {
            Some(v)
        } else {
            issues.push(
                DatasetIssue::new(IssueKind::TypeMismatch, &self.file, format!("non-finite number {v}")).at(line, Some(col)),
            );
            None
        }
    }

    fn list(&self, rec: &csv::StringRecord, line: u64, col: &str, issues: &mut Vec<DatasetIssue>) -> Option<Vec<f64>> {
        let raw = self.cell(rec, line, col, issues)?;
        if raw.trim().is_empty() {
            return Some(Vec::new());
        }
        let mut out = Vec::new();
        for part in raw.split(';') {
            match part.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => out.push(v),
                _ => {
                    issues.push(
                        DatasetIssue::new(IssueKind::TypeMismatch, &self.file, format!("bad list entry {part:?}"))
                            .at(line, Some(col)),
                    );
                    return None;
                }
            }
        }
        Some(out)
    }

    /// Optional metric: `-1` is undefined, other negatives are invalid.
    fn metric(&self, rec: &csv::StringRecord, line: u64, col: &str, issues: &mut Vec<DatasetIssue>) -> Option<Option<f64>> {
        let v = self.float(rec, line, col, issues)?;
        if v == -1.0 {
            Some(None)
        } else if v < 0.0 {
            issues.push(
                DatasetIssue::new(IssueKind::InvariantViolation, &self.file, format!("negative metric {v}"))
                    .at(line, Some(col)),
            );
            None
        } else {
            Some(Some(v))
        }
    }
}

fn leading_id(path: &Path) -> Option<u32> {
    file_name(path).split('_').next()?.parse().ok()
}

struct MetaRow {
    line: u64,
    length: f64,
    width: f64,
    class: VehicleClass,
    direction: DrivingDirection,
    mean_speed: f64,
    num_frames: u32,
    initial_frame: u32,
    final_frame: u32,
    num_lane_changes: u32,
}

/// Reads and validates a recording-meta table on its own.
pub fn read_recording_meta(path: &Path) -> Result<RecordingMeta, DatasetIssue> {
    let mut issues = Vec::new();
    match parse_meta_file(path, &mut issues) {
        Some(meta) if issues.is_empty() => Ok(meta),
        _ => Err(issues.swap_remove(0)),
    }
}

fn parse_meta_file(path: &Path, issues: &mut Vec<DatasetIssue>) -> Option<RecordingMeta> {
    let t = Table::load(path, &RECORDING_META_COLUMNS, issues)?;
    if t.rows.len() != 1 {
        issues.push(DatasetIssue::new(
            IssueKind::InvariantViolation,
            &t.file,
            format!("expected exactly one data row, found {}", t.rows.len()),
        ));
        return None;
    }
    let (line, rec) = &t.rows[0];
    let line = *line;
    let before = issues.len();
    let recording_id = t.int::<u32>(rec, line, "id", issues);
    let location_id = t.int::<u32>(rec, line, "locationId", issues);
    let frame_rate = t.float(rec, line, "frameRate", issues);
    let duration = t.float(rec, line, "duration", issues);
    let upper = t.list(rec, line, "upperLaneMarkings", issues);
    let lower = t.list(rec, line, "lowerLaneMarkings", issues);
    let limits = t.list(rec, line, "speedLimits", issues);
    if issues.len() > before {
        return None;
    }
    let meta = RecordingMeta {
        recording_id: recording_id?,
        location_id: location_id?,
        frame_rate: frame_rate?,
        duration: duration?,
        upper_lane_markings: upper?,
        lower_lane_markings: lower?,
        speed_limits: limits?.into_iter().map(SpeedLimit::from_file_value).collect(),
        pixel_size: DEFAULT_PIXEL_SIZE,
    };
    let violations = meta.invariant_violations();
    for v in &violations {
        issues.push(DatasetIssue::new(IssueKind::InvariantViolation, &t.file, v.clone()).at(line, None));
    }
    if let Some(SpeedLimit::Limited(v)) = meta.speed_limits.iter().find(|l| matches!(l, SpeedLimit::Limited(v) if *v <= 0.0)) {
        issues.push(
            DatasetIssue::new(IssueKind::InvariantViolation, &t.file, format!("speed limit {v} must be positive or -1"))
                .at(line, Some("speedLimits")),
        );
    }
    Some(meta)
}

fn parse_recording_meta(paths: &RecordingFileSet, issues: &mut Vec<DatasetIssue>) -> Option<RecordingMeta> {
    let meta = parse_meta_file(&paths.recording_meta_path, issues)?;
    for p in [&paths.tracks_meta_path, &paths.tracks_path] {
        if let Some(id) = leading_id(p) {
            if id != meta.recording_id {
                issues.push(DatasetIssue::new(
                    IssueKind::InvariantViolation,
                    &file_name(p),
                    format!("file belongs to recording {id}, metadata says {}", meta.recording_id),
                ));
            }
        }
    }
    Some(meta)
}

fn parse_tracks_meta(paths: &RecordingFileSet, issues: &mut Vec<DatasetIssue>) -> Option<(String, Vec<(u32, MetaRow)>)> {
    let t = Table::load(&paths.tracks_meta_path, &TRACKS_META_COLUMNS, issues)?;
    let mut out = Vec::with_capacity(t.rows.len());
    let mut seen = HashSet::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let line = *line;
        let before = issues.len();
        let id = t.int::<u32>(rec, line, "id", issues);
        let length = t.float(rec, line, "length", issues);
        let width = t.float(rec, line, "width", issues);
        let class = t.parse::<VehicleClass>(rec, line, "class", "Car or Truck", issues);
        let direction = t.int::<i64>(rec, line, "drivingDirection", issues).and_then(|c| {
            let d = DrivingDirection::from_code(c);
            if d.is_none() {
                issues.push(
                    DatasetIssue::new(IssueKind::TypeMismatch, &t.file, format!("drivingDirection must be 1 or 2, got {c}"))
                        .at(line, Some("drivingDirection")),
                );
            }
            d
        });
        let mean_speed = t.float(rec, line, "meanSpeed", issues);
        let num_frames = t.int::<u32>(rec, line, "numFrames", issues);
        let initial_frame = t.int::<u32>(rec, line, "initialFrame", issues);
        let final_frame = t.int::<u32>(rec, line, "finalFrame", issues);
        let num_lane_changes = t.int::<u32>(rec, line, "numLaneChanges", issues);
        if issues.len() > before {
            continue;
        }
        let row = MetaRow {
            line,
            length: length?,
            width: width?,
            class: class?,
            direction: direction?,
            mean_speed: mean_speed?,
            num_frames: num_frames?,
            initial_frame: initial_frame?,
            final_frame: final_frame?,
            num_lane_changes: num_lane_changes?,
        };
        let id = id?;
        if id == 0 {
            issues.push(
                DatasetIssue::new(IssueKind::InvariantViolation, &t.file, "track id 0 is reserved").at(line, Some("id")),
            );
            continue;
        }
        if !seen.insert(id) {
            issues.push(
                DatasetIssue::new(IssueKind::DuplicateId, &t.file, format!("track id {id} listed twice"))
                    .at(line, Some("id"))
                    .track(id),
            );
            continue;
        }
        if !(row.length > 0.0 && row.width > 0.0) {
            issues.push(
                DatasetIssue::new(IssueKind::InvariantViolation, &t.file, "vehicle extent must be positive")
                    .at(line, Some("length"))
                    .track(id),
            );
        }
        out.push((id, row));
    }
    Some((t.file, out))
}

fn parse(paths: &RecordingFileSet) -> (Option<Recording>, Vec<DatasetIssue>) {
    let mut issues = Vec::new();
    let meta = parse_recording_meta(paths, &mut issues);
    let tracks_meta = parse_tracks_meta(paths, &mut issues);
    let table = Table::load(&paths.tracks_path, &TRACKS_COLUMNS, &mut issues);
    let (Some(meta), Some((meta_file, tracks_meta)), Some(t)) = (meta, tracks_meta, table) else {
        return (None, issues);
    };

    let index: HashMap<u32, usize> = tracks_meta.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
    let mut states: Vec<Vec<KinematicState>> = vec![Vec::new(); tracks_meta.len()];
    let mut surround: Vec<Vec<SurroundFrame>> = vec![Vec::new(); tracks_meta.len()];
    let mut broken = vec![false; tracks_meta.len()];
    let frame_limit = meta.frame_count();

    for (line, rec) in &t.rows {
        let line = *line;
        let before = issues.len();
        let frame = t.int::<u32>(rec, line, "frame", &mut issues);
        let id = t.int::<u32>(rec, line, "id", &mut issues);
        let x = t.float(rec, line, "x", &mut issues);
        let y = t.float(rec, line, "y", &mut issues);
        let vx = t.float(rec, line, "xVelocity", &mut issues);
        let vy = t.float(rec, line, "yVelocity", &mut issues);
        let ax = t.float(rec, line, "xAcceleration", &mut issues);
        let ay = t.float(rec, line, "yAcceleration", &mut issues);
        let lane_id = t.int::<i32>(rec, line, "laneId", &mut issues);
        let mut nb = [0u32; 8];
        for (slot, col) in nb.iter_mut().zip(&TRACKS_COLUMNS[9..17]) {
            *slot = t.int::<u32>(rec, line, col, &mut issues).unwrap_or(0);
        }
        let dhw = t.metric(rec, line, "dhw", &mut issues);
        let thw = t.metric(rec, line, "thw", &mut issues);
        let ttc = t.metric(rec, line, "ttc", &mut issues);
        if issues.len() > before {
            continue;
        }
        let (Some(frame), Some(id)) = (frame, id) else { continue };
        let Some(&ti) = index.get(&id) else {
            issues.push(
                DatasetIssue::new(IssueKind::DanglingReference, &t.file, format!("track {id} not in tracks metadata"))
                    .at(line, Some("id"))
                    .track(id),
            );
            continue;
        };
        for (n, col) in nb.iter().zip(&TRACKS_COLUMNS[9..17]) {
            if *n != 0 && !index.contains_key(n) {
                issues.push(
                    DatasetIssue::new(IssueKind::DanglingReference, &t.file, format!("neighbour {n} does not exist"))
                        .at(line, Some(col))
                        .track(id),
                );
            }
        }
        if frame > frame_limit {
            issues.push(
                DatasetIssue::new(
                    IssueKind::InvariantViolation,
                    &t.file,
                    format!("frame {frame} beyond recording end {frame_limit}"),
                )
                .at(line, Some("frame"))
                .track(id),
            );
        }
        let state = KinematicState {
            frame,
            x: x.unwrap_or(0.0),
            y: y.unwrap_or(0.0),
            vx: vx.unwrap_or(0.0),
            vy: vy.unwrap_or(0.0),
            ax: ax.unwrap_or(0.0),
            ay: ay.unwrap_or(0.0),
            lane_id: lane_id.unwrap_or(0),
        };
        let dir = tracks_meta[ti].1.direction;
        if !lane_consistent(state.y, state.lane_id, meta.markings(dir)) {
            issues.push(
                DatasetIssue::new(
                    IssueKind::InvariantViolation,
                    &t.file,
                    format!("laneId {} does not contain y = {}", state.lane_id, state.y),
                )
                .at(line, Some("laneId"))
                .track(id),
            );
        }
        if broken[ti] {
            continue;
        }
        if let Some(prev) = states[ti].last() {
            if frame != prev.frame + 1 {
                issues.push(
                    DatasetIssue::new(
                        IssueKind::NonMonotoneFrames,
                        &t.file,
                        format!("frame {frame} follows frame {}", prev.frame),
                    )
                    .at(line, Some("frame"))
                    .track(id),
                );
                broken[ti] = true;
                continue;
            }
        }
        states[ti].push(state);
        surround[ti].push(SurroundFrame {
            frame,
            track_id: id,
            preceding: nb[0],
            following: nb[1],
            left_preceding: nb[2],
            left_alongside: nb[3],
            left_following: nb[4],
            right_preceding: nb[5],
            right_alongside: nb[6],
            right_following: nb[7],
            dhw: dhw.flatten(),
            thw: thw.flatten(),
            ttc: ttc.flatten(),
        });
    }

    let mut tracks = Vec::with_capacity(tracks_meta.len());
    for (i, (id, row)) in tracks_meta.iter().enumerate() {
        let id = *id;
        let st = std::mem::take(&mut states[i]);
        if broken[i] {
            continue;
        }
        let mut bad = |col: &str, msg: String| {
            issues.push(
                DatasetIssue::new(IssueKind::InvariantViolation, &meta_file, msg)
                    .at(row.line, Some(col))
                    .track(id),
            );
        };
        if st.is_empty() {
            bad("numFrames", format!("track {id} has no rows in the tracks table"));
            continue;
        }
        let n = st.len() as u32;
        if row.num_frames != n {
            bad("numFrames", format!("numFrames {} but {n} rows", row.num_frames));
        }
        if row.initial_frame != st[0].frame {
            bad("initialFrame", format!("initialFrame {} but first row at {}", row.initial_frame, st[0].frame));
        }
        if row.final_frame != st[st.len() - 1].frame {
            bad("finalFrame", format!("finalFrame {} but last row at {}", row.final_frame, st[st.len() - 1].frame));
        }
        let track = Track {
            track_id: id,
            class: row.class,
            direction: row.direction,
            length: row.length,
            width: row.width,
            states: st,
            mean_speed: row.mean_speed,
        };
        if track.lane_transitions() as u32 != row.num_lane_changes {
            bad(
                "numLaneChanges",
                format!("numLaneChanges {} but lane id changes {} times", row.num_lane_changes, track.lane_transitions()),
            );
        }
        let recomputed = Track::compute_mean_speed(&track.states);
        let scale = track.states.iter().map(|s| s.vx.abs()).fold(1.0, f64::max);
        if (recomputed - row.mean_speed).abs() > 1e-4 * scale {
            bad("meanSpeed", format!("meanSpeed {} but states average {recomputed}", row.mean_speed));
        }
        tracks.push((i, track));
    }

    if !issues.is_empty() {
        return (None, issues);
    }
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by_key(|&k| tracks[k].1.track_id);
    let mut out_tracks = Vec::with_capacity(tracks.len());
    let mut out_surround = Vec::with_capacity(tracks.len());
    let mut slots: Vec<Option<(usize, Track)>> = tracks.into_iter().map(Some).collect();
    for k in order {
        let (i, track) = slots[k].take().expect("each slot taken once");
        out_tracks.push(track);
        out_surround.push(std::mem::take(&mut surround[i]));
    }
    (Some(Recording { meta, tracks: out_tracks, surround: out_surround }), issues)
}

/// Lane check tolerant to the six-digit rounding of `y` in the file.
fn lane_consistent(y: f64, lane_id: i32, markings: &[f64]) -> bool {
    let tol = 1e-5 * y.abs().max(1.0);
    [y, y - tol, y + tol].iter().any(|&v| lane_in(v, markings).id() == lane_id)
        && (lane_id == 0 || lane_id as usize <= markings.len().saturating_sub(1))
}

fn csv_writer(path: &Path) -> io::Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(File::create(path)?))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(";")
}

fn csv_io(e: csv::Error) -> io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::other(format!("{other:?}")),
    }
}

/// Writes a one-row recording-meta table.
pub fn write_recording_meta(path: &Path, meta: &RecordingMeta) -> io::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(RECORDING_META_COLUMNS).map_err(csv_io)?;
    w.write_record([
        meta.recording_id.to_string(),
        meta.location_id.to_string(),
        fmt_f64(meta.frame_rate),
        fmt_f64(meta.duration),
        join(meta.upper_lane_markings.iter().copied()),
        join(meta.lower_lane_markings.iter().copied()),
        join(meta.speed_limits.iter().map(|l| l.to_file_value())),
    ])
    .map_err(csv_io)?;
    w.flush()
}

/// Writes the three tables of a recording into `dir` in canonical form.
/// `surround[i]` must be aligned with `tracks[i].states`; missing entries
/// are written as "no neighbours".
pub fn write_recording(
    dir: &Path,
    meta: &RecordingMeta,
    tracks: &[Track],
    surround: &[Vec<SurroundFrame>],
) -> io::Result<RecordingFileSet> {
    fs::create_dir_all(dir)?;
    let paths = RecordingFileSet::in_dir(dir, meta.recording_id);

    write_recording_meta(&paths.recording_meta_path, meta)?;

    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.sort_by_key(|&i| tracks[i].track_id);

    let mut w = csv_writer(&paths.tracks_meta_path)?;
    w.write_record(TRACKS_META_COLUMNS).map_err(csv_io)?;
    for &i in &order {
        let t = &tracks[i];
        w.write_record([
            t.track_id.to_string(),
            fmt_f64(t.length),
            fmt_f64(t.width),
            t.class.as_str().to_string(),
            t.direction.code().to_string(),
            fmt_f64(t.mean_speed),
            t.states.len().to_string(),
            t.first_frame().unwrap_or(0).to_string(),
            t.last_frame().unwrap_or(0).to_string(),
            t.lane_transitions().to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;

    let mut w = csv_writer(&paths.tracks_path)?;
    w.write_record(TRACKS_COLUMNS).map_err(csv_io)?;
    for &i in &order {
        let t = &tracks[i];
        let sur = surround.get(i).filter(|s| s.len() == t.states.len());
        for (k, s) in t.states.iter().enumerate() {
            let f = sur.map(|v| v[k]).unwrap_or_else(|| SurroundFrame::empty(s.frame, t.track_id));
            let mut rec: Vec<String> = Vec::with_capacity(TRACKS_COLUMNS.len());
            rec.push(s.frame.to_string());
            rec.push(t.track_id.to_string());
            for v in [s.x, s.y, s.vx, s.vy, s.ax, s.ay] {
                rec.push(fmt_f64(v));
            }
            rec.push(s.lane_id.to_string());
            rec.extend(f.neighbor_ids().iter().map(u32::to_string));
            for m in [f.dhw, f.thw, f.ttc] {
                rec.push(fmt_opt(m));
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(paths)
}

/// Reads a detection CSV into per-frame lists covering frames
/// `0..=max(last frame, min_frames - 1)`. Rows must be ordered by frame.
pub fn read_detections(path: &Path, min_frames: usize) -> Result<Vec<Vec<Detection>>, DatasetIssue> {
    let mut issues = Vec::new();
    let Some(t) = Table::load(path, &DETECTION_COLUMNS, &mut issues) else {
        return Err(issues.swap_remove(0));
    };
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); min_frames];
    let mut last = 0u32;
    for (line, rec) in &t.rows {
        let line = *line;
        let frame = t.int::<u32>(rec, line, "frame", &mut issues);
        let cx = t.float(rec, line, "cx", &mut issues);
        let cy = t.float(rec, line, "cy", &mut issues);
        let length = t.float(rec, line, "length", &mut issues);
        let width = t.float(rec, line, "width", &mut issues);
        let class_raw = t.cell(rec, line, "class", &mut issues).unwrap_or("");
        let class_hint = if class_raw.is_empty() {
            None
        } else {
            match class_raw.parse::<VehicleClass>() {
                Ok(c) => Some(c),
                Err(e) => {
                    issues.push(DatasetIssue::new(IssueKind::TypeMismatch, &t.file, e).at(line, Some("class")));
                    None
                }
            }
        };
        if !issues.is_empty() {
            return Err(issues.swap_remove(0));
        }
        let (frame, length, width) = (frame.unwrap_or(0), length.unwrap_or(0.0), width.unwrap_or(0.0));
        if frame < last {
            return Err(DatasetIssue::new(
                IssueKind::NonMonotoneFrames,
                &t.file,
                format!("frame {frame} after frame {last}"),
            )
            .at(line, Some("frame")));
        }
        if !(length > 0.0 && width > 0.0) {
            return Err(DatasetIssue::new(IssueKind::InvariantViolation, &t.file, "detection extent must be positive")
                .at(line, Some("length")));
        }
        last = frame;
        let idx = frame as usize;
        if frames.len() <= idx {
            frames.resize(idx + 1, Vec::new());
        }
        frames[idx].push(Detection { frame, cx: cx.unwrap_or(0.0), cy: cy.unwrap_or(0.0), length, width, class_hint });
    }
    Ok(frames)
}

/// Writes per-frame detection lists. Coordinates use the shortest
/// representation that reads back to the same `f64`.
pub fn write_detections(path: &Path, frames: &[Vec<Detection>]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv_writer(path)?;
    w.write_record(DETECTION_COLUMNS).map_err(csv_io)?;
    for d in frames.iter().flatten() {
        w.write_record([
            d.frame.to_string(),
            d.cx.to_string(),
            d.cy.to_string(),
            d.length.to_string(),
            d.width.to_string(),
            d.class_hint.map(|c| c.as_str()).unwrap_or("").to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

/// Detection file name for recording `id`.
pub fn detections_file_name(id: u32) -> String {
    format!("{id:02}_detections.csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmt::canonical;
    use crate::model::lane_id_of;

    fn meta() -> RecordingMeta {
        RecordingMeta {
            recording_id: 3,
            location_id: 1,
            frame_rate: 25.0,
            duration: 10.0,
            upper_lane_markings: vec![8.0, 11.5, 15.0],
            lower_lane_markings: vec![20.0, 23.5, 27.0],
            speed_limits: vec![SpeedLimit::Unlimited, SpeedLimit::Unlimited, SpeedLimit::Limited(33.3333), SpeedLimit::Limited(33.3333)],
            pixel_size: DEFAULT_PIXEL_SIZE,
        }
    }

    fn track(id: u32, x0: f64, y: f64, n: u32) -> Track {
        let m = meta();
        let states: Vec<KinematicState> = (0..n)
            .map(|k| KinematicState {
                frame: 5 + k,
                x: canonical(x0 + 1.2 * k as f64),
                y,
                vx: 30.0,
                vy: 0.0,
                ax: 0.0,
                ay: 0.0,
                lane_id: lane_id_of(y, &m, DrivingDirection::LowerCarriageway).id(),
            })
            .collect();
        Track {
            track_id: id,
            class: VehicleClass::Car,
            direction: DrivingDirection::LowerCarriageway,
            length: 4.5,
            width: 1.8,
            mean_speed: Track::compute_mean_speed(&states),
            states,
        }
    }

    fn two_tracks() -> (Vec<Track>, Vec<Vec<SurroundFrame>>) {
        let tracks = vec![track(1, 100.0, 21.7, 20), track(2, 140.0, 21.7, 20)];
        let mut surround = crate::surround::compute_surround(&tracks);
        for f in surround.iter_mut().flatten() {
            for m in [&mut f.dhw, &mut f.thw, &mut f.ttc] {
                *m = m.map(canonical);
            }
        }
        (tracks, surround)
    }

    fn read_all(p: &Path) -> Vec<u8> {
        fs::read(p).unwrap()
    }

    #[test]
    fn round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (tracks, surround) = two_tracks();
        let paths = write_recording(dir.path(), &meta(), &tracks, &surround).unwrap();
        let rec = read_recording(&paths).unwrap();
        assert_eq!(rec.meta, meta());
        assert_eq!(rec.tracks, tracks);
        assert_eq!(rec.surround, surround);
        assert_eq!(rec.surround[1][0].following, 1);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (mut tracks, surround) = two_tracks();
        tracks[0].states[3].x = 103.612345678;
        let p1 = write_recording(a.path(), &meta(), &tracks, &surround).unwrap();
        let rec = read_recording(&p1).unwrap();
        let p2 = write_recording(b.path(), &rec.meta, &rec.tracks, &rec.surround).unwrap();
        for (x, y) in [
            (&p1.recording_meta_path, &p2.recording_meta_path),
            (&p1.tracks_meta_path, &p2.tracks_meta_path),
            (&p1.tracks_path, &p2.tracks_path),
        ] {
            assert_eq!(read_all(x), read_all(y));
        }
        assert!(!String::from_utf8(read_all(&p1.tracks_path)).unwrap().contains('\r'));
    }

    #[test]
    fn empty_track_list_writes_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_recording(dir.path(), &meta(), &[], &[]).unwrap();
        let text = fs::read_to_string(&paths.tracks_path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let rec = read_recording(&paths).unwrap();
        assert!(rec.tracks.is_empty());
    }

    #[test]
    fn single_frame_track() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = vec![track(7, 50.0, 25.0, 1)];
        let paths = write_recording(dir.path(), &meta(), &tracks, &[]).unwrap();
        let text = fs::read_to_string(&paths.tracks_path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_recording(&paths).unwrap().tracks, tracks);
    }

    fn rewrite(path: &Path, f: impl Fn(&str) -> String) {
        let text = fs::read_to_string(path).unwrap();
        fs::write(path, f(&text)).unwrap();
    }

    #[test]
    fn dangling_neighbour() {
        let dir = tempfile::tempdir().unwrap();
        let (tracks, surround) = two_tracks();
        let paths = write_recording(dir.path(), &meta(), &tracks, &surround).unwrap();
        // first data row of track 1 has precedingId 2
        rewrite(&paths.tracks_path, |t| t.replacen(",1,2,0,", ",1,99,0,", 1));
        let err = read_recording(&paths).unwrap_err();
        assert_eq!(err.kind, IssueKind::DanglingReference);
        assert_eq!(err.row, Some(2));
        assert_eq!(err.column.as_deref(), Some("precedingId"));
        assert!(!validate(&paths).is_empty());
    }

    #[test]
    fn frame_gap_is_non_monotone() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = vec![track(1, 100.0, 21.7, 3)];
        let paths = write_recording(dir.path(), &meta(), &tracks, &[]).unwrap();
        rewrite(&paths.tracks_path, |t| {
            let mut lines: Vec<String> = t.lines().map(str::to_string).collect();
            lines[3] = lines[3].replacen("7,", "8,", 1);
            lines.join("\n") + "\n"
        });
        let err = read_recording(&paths).unwrap_err();
        assert_eq!(err.kind, IssueKind::NonMonotoneFrames);
        assert_eq!(err.track_id, Some(1));
    }

    #[test]
    fn speed_limit_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_recording(dir.path(), &meta(), &[], &[]).unwrap();
        rewrite(&paths.recording_meta_path, |t| t.replace("-1;-1;", "-1;"));
        let report = validate(&paths);
        assert_eq!(report.issues.len(), 1, "{report:?}");
        assert_eq!(report.issues[0].kind, IssueKind::InvariantViolation);
    }

    #[test]
    fn duplicate_track_id() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = vec![track(1, 100.0, 21.7, 3)];
        let paths = write_recording(dir.path(), &meta(), &tracks, &[]).unwrap();
        rewrite(&paths.tracks_meta_path, |t| {
            let row = t.lines().nth(1).unwrap().to_string();
            format!("{t}{row}\n")
        });
        let report = validate(&paths);
        assert_eq!(report.issues.len(), 1, "{report:?}");
        assert_eq!(report.issues[0].kind, IssueKind::DuplicateId);
        assert_eq!(report.issues[0].row, Some(3));
    }

    #[test]
    fn missing_column_and_file() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_recording(dir.path(), &meta(), &[], &[]).unwrap();
        rewrite(&paths.tracks_meta_path, |t| t.replace("meanSpeed", "avgSpeed"));
        let err = read_recording(&paths).unwrap_err();
        assert_eq!(err.kind, IssueKind::MissingColumn);
        assert_eq!(err.column.as_deref(), Some("meanSpeed"));
        fs::remove_file(&paths.tracks_path).unwrap();
        let report = validate(&paths);
        assert!(report.issues.iter().any(|i| i.kind == IssueKind::MissingFile));
    }

    #[test]
    fn type_mismatch_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = vec![track(1, 100.0, 21.7, 3)];
        let paths = write_recording(dir.path(), &meta(), &tracks, &[]).unwrap();
        rewrite(&paths.tracks_meta_path, |t| t.replace(",Car,", ",Bus,"));
        let err = read_recording(&paths).unwrap_err();
        assert_eq!(err.kind, IssueKind::TypeMismatch);
        assert_eq!((err.row, err.column.as_deref()), (Some(2), Some("class")));
    }

    #[test]
    fn lane_check_tolerates_rounding() {
        let m = [20.0, 23.5, 27.0];
        assert!(lane_consistent(23.5, 1, &m));
        assert!(lane_consistent(23.5, 2, &m));
        assert!(!lane_consistent(22.0, 2, &m));
        assert!(lane_consistent(30.0, 0, &m));
        assert!(!lane_consistent(30.0, 3, &m));
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(detections_file_name(1));
        let d = |frame, cx, class_hint| Detection { frame, cx, cy: 21.0, length: 4.5, width: 1.8, class_hint };
        let frames = vec![vec![d(0, 1.0, Some(VehicleClass::Truck)), d(0, 9.0, None)], vec![], vec![d(2, 3.0, Some(VehicleClass::Car))]];
        write_detections(&path, &frames).unwrap();
        assert_eq!(read_detections(&path, 0).unwrap(), frames);
        assert_eq!(read_detections(&path, 5).unwrap().len(), 5);
    }
}
