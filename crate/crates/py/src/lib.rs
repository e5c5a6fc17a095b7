//! Python bindings for `hwtraj`.

use std::path::PathBuf;

use hwtraj::dataset::{read_recording as read_files, write_recording, RecordingFileSet};
use hwtraj::lane_change::{self, FitConfig, LaneChangeSide, TrajectorySample};
use hwtraj::maneuvers::extract_episodes;
use hwtraj::model::{lane_id_of, Detection, DrivingDirection, KinematicState, RecordingMeta, Track};
use hwtraj::pipeline::{track_recording, PipelineConfig};
use hwtraj::surround::{compute_surround, headway_metrics as headway, FrameVehicle, SurroundFrame};
use hwtraj::synth::{corrupt, generate_truth, ScenarioScript};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_direction(s: &str) -> PyResult<DrivingDirection> {
    match s {
        "upper" => Ok(DrivingDirection::UpperCarriageway),
        "lower" => Ok(DrivingDirection::LowerCarriageway),
        _ => Err(PyValueError::new_err(format!("direction must be 'upper' or 'lower', got {s:?}"))),
    }
}

fn parse_side(s: &str) -> PyResult<LaneChangeSide> {
    match s {
        "left" => Ok(LaneChangeSide::ToLeft),
        "right" => Ok(LaneChangeSide::ToRight),
        _ => Err(PyValueError::new_err(format!("side must be 'left' or 'right', got {s:?}"))),
    }
}

/// Lane-change model parameters. `side` is "left" or "right".
#[pyclass(name = "LaneChangeParams", from_py_object)]
#[derive(Clone)]
struct PyLaneChangeParams {
    inner: lane_change::LaneChangeParams,
}

#[pymethods]
impl PyLaneChangeParams {
    #[new]
    #[pyo3(signature = (d_start, d_end, v_start, v_end, duration, side = "left"))]
    fn new(d_start: f64, d_end: f64, v_start: f64, v_end: f64, duration: f64, side: &str) -> PyResult<Self> {
        let inner = lane_change::LaneChangeParams { d_start, d_end, v_start, v_end, duration, side: parse_side(side)? };
        Ok(PyLaneChangeParams { inner })
    }

    #[getter]
    fn d_start(&self) -> f64 {
        self.inner.d_start
    }
    #[getter]
    fn d_end(&self) -> f64 {
        self.inner.d_end
    }
    #[getter]
    fn v_start(&self) -> f64 {
        self.inner.v_start
    }
    #[getter]
    fn v_end(&self) -> f64 {
        self.inner.v_end
    }
    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }
    #[getter]
    fn side(&self) -> &'static str {
        match self.inner.side {
            LaneChangeSide::ToLeft => "left",
            LaneChangeSide::ToRight => "right",
        }
    }

    /// (x, y, vx, vy, ax, ay) at time `t` since the maneuver start.
    fn evaluate(&self, t: f64) -> PyResult<(f64, f64, f64, f64, f64, f64)> {
        let s = lane_change::evaluate_model(&self.inner, t).map_err(value_err)?;
        Ok((s.x, s.y, s.vx, s.vy, s.ax, s.ay))
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "LaneChangeParams(d_start={}, d_end={}, v_start={}, v_end={}, duration={}, side='{}')",
            p.d_start,
            p.d_end,
            p.v_start,
            p.v_end,
            p.duration,
            self.side()
        )
    }
}

#[pyclass(name = "FitResult", get_all)]
struct PyFitResult {
    params: PyLaneChangeParams,
    t0: f64,
    lateral_rmse: f64,
    longitudinal_rmse: f64,
    converged: bool,
    iterations: usize,
}

/// Model position relative to the crossed marking, see `LaneChangeParams.evaluate`.
#[pyfunction]
fn evaluate_model(params: &PyLaneChangeParams, t: f64) -> PyResult<(f64, f64, f64, f64, f64, f64)> {
    params.evaluate(t)
}

/// Fits the lane-change model to samples `(t, x, y)` around `marking_y`.
#[pyfunction]
fn fit_lane_change(t: Vec<f64>, x: Vec<f64>, y: Vec<f64>, marking_y: f64) -> PyResult<PyFitResult> {
    if t.len() != x.len() || t.len() != y.len() {
        return Err(PyValueError::new_err("t, x and y must have the same length"));
    }
    let samples: Vec<TrajectorySample> =
        t.iter().zip(&x).zip(&y).map(|((&t, &x), &y)| TrajectorySample { t, x, y }).collect();
    let r = lane_change::fit_lane_change(&samples, marking_y, &FitConfig::default()).map_err(value_err)?;
    Ok(PyFitResult {
        params: PyLaneChangeParams { inner: r.params },
        t0: r.t0,
        lateral_rmse: r.lateral_rmse,
        longitudinal_rmse: r.longitudinal_rmse,
        converged: r.converged,
        iterations: r.iterations,
    })
}

/// (dhw, thw, ttc) of an ego vehicle following a leader in the same lane.
/// `thw` and `ttc` are None when undefined.
#[pyfunction]
#[pyo3(signature = (ego_x, ego_vx, ego_length, lead_x, lead_vx, lead_length, direction = "lower"))]
fn headway_metrics(
    ego_x: f64,
    ego_vx: f64,
    ego_length: f64,
    lead_x: f64,
    lead_vx: f64,
    lead_length: f64,
    direction: &str,
) -> PyResult<(f64, Option<f64>, Option<f64>)> {
    let dir = parse_direction(direction)?;
    let vehicle = |id, x, vx, length| FrameVehicle {
        track_id: id,
        direction: dir,
        length,
        width: 1.8,
        state: KinematicState { frame: 0, x, y: 0.0, vx, vy: 0.0, ax: 0.0, ay: 0.0, lane_id: 1 },
    };
    let h = headway(&vehicle(1, ego_x, ego_vx, ego_length), &vehicle(2, lead_x, lead_vx, lead_length), dir)
        .map_err(value_err)?;
    Ok((h.dhw, h.thw, h.ttc))
}

/// A recording: metadata, smoothed tracks and surround metrics.
#[pyclass(name = "Recording")]
struct PyRecording {
    meta: RecordingMeta,
    tracks: Vec<Track>,
    surround: Vec<Vec<SurroundFrame>>,
}

impl PyRecording {
    fn track(&self, track_id: u32) -> PyResult<(usize, &Track)> {
        self.tracks
            .iter()
            .enumerate()
            .find(|(_, t)| t.track_id == track_id)
            .ok_or_else(|| PyValueError::new_err(format!("no track {track_id}")))
    }
}

#[pymethods]
impl PyRecording {
    #[getter]
    fn recording_id(&self) -> u32 {
        self.meta.recording_id
    }
    #[getter]
    fn frame_rate(&self) -> f64 {
        self.meta.frame_rate
    }
    #[getter]
    fn duration(&self) -> f64 {
        self.meta.duration
    }
    #[getter]
    fn upper_lane_markings(&self) -> Vec<f64> {
        self.meta.upper_lane_markings.clone()
    }
    #[getter]
    fn lower_lane_markings(&self) -> Vec<f64> {
        self.meta.lower_lane_markings.clone()
    }

    fn track_ids(&self) -> Vec<u32> {
        self.tracks.iter().map(|t| t.track_id).collect()
    }

    fn __len__(&self) -> usize {
        self.tracks.len()
    }

    /// Per-frame columns of one track as a dict of lists.
    fn track_states<'py>(&self, py: Python<'py>, track_id: u32) -> PyResult<Bound<'py, PyDict>> {
        let (i, t) = self.track(track_id)?;
        let d = PyDict::new(py);
        d.set_item("frame", t.states.iter().map(|s| s.frame).collect::<Vec<_>>())?;
        d.set_item("x", t.states.iter().map(|s| s.x).collect::<Vec<_>>())?;
        d.set_item("y", t.states.iter().map(|s| s.y).collect::<Vec<_>>())?;
        d.set_item("vx", t.states.iter().map(|s| s.vx).collect::<Vec<_>>())?;
        d.set_item("vy", t.states.iter().map(|s| s.vy).collect::<Vec<_>>())?;
        d.set_item("ax", t.states.iter().map(|s| s.ax).collect::<Vec<_>>())?;
        d.set_item("ay", t.states.iter().map(|s| s.ay).collect::<Vec<_>>())?;
        d.set_item("lane_id", t.states.iter().map(|s| s.lane_id).collect::<Vec<_>>())?;
        d.set_item("dhw", self.surround[i].iter().map(|s| s.dhw).collect::<Vec<_>>())?;
        d.set_item("thw", self.surround[i].iter().map(|s| s.thw).collect::<Vec<_>>())?;
        d.set_item("ttc", self.surround[i].iter().map(|s| s.ttc).collect::<Vec<_>>())?;
        d.set_item("preceding", self.surround[i].iter().map(|s| s.preceding).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// (class, direction, length, width, mean speed) of a track.
    fn track_info(&self, track_id: u32) -> PyResult<(&'static str, &'static str, f64, f64, f64)> {
        let (_, t) = self.track(track_id)?;
        let dir = match t.direction {
            DrivingDirection::UpperCarriageway => "upper",
            DrivingDirection::LowerCarriageway => "lower",
        };
        Ok((t.class.as_str(), dir, t.length, t.width, t.mean_speed))
    }

    /// Lane of lateral position `y` on a carriageway, 0 when off the road.
    fn lane_id_of(&self, y: f64, direction: &str) -> PyResult<i32> {
        Ok(lane_id_of(y, &self.meta, parse_direction(direction)?).id())
    }

    /// Maneuver episodes with default thresholds, as
    /// (track_id, kind, start_frame, end_frame) tuples.
    fn episodes(&self) -> PyResult<Vec<(u32, &'static str, u32, u32)>> {
        let cfg = PipelineConfig::default();
        let mut out = Vec::new();
        for (t, s) in self.tracks.iter().zip(&self.surround) {
            for e in extract_episodes(t, s, &cfg.maneuvers).map_err(value_err)? {
                out.push((e.track_id, e.kind.as_str(), e.start_frame, e.end_frame));
            }
        }
        Ok(out)
    }

    /// Writes the recording tables into `dir`.
    fn write(&self, dir: PathBuf) -> PyResult<()> {
        write_recording(&dir, &self.meta, &self.tracks, &self.surround)
            .map(|_| ())
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Runs tracking and smoothing on per-frame detections
    /// `[(cx, cy, length, width), ...]` using this recording's road layout.
    fn track_detections(&self, frames: Vec<Vec<(f64, f64, f64, f64)>>) -> PyResult<PyRecording> {
        let frames: Vec<Vec<Detection>> = frames
            .into_iter()
            .enumerate()
            .map(|(f, dets)| {
                dets.into_iter()
                    .map(|(cx, cy, length, width)| Detection { frame: f as u32, cx, cy, length, width, class_hint: None })
                    .collect()
            })
            .collect();
        let (tracks, surround) = track_recording(&self.meta, &frames, &PipelineConfig::default()).map_err(value_err)?;
        Ok(PyRecording { meta: self.meta.clone(), tracks, surround })
    }

    fn __repr__(&self) -> String {
        format!("Recording(id={}, tracks={})", self.meta.recording_id, self.tracks.len())
    }
}

/// Reads `NN_recordingMeta.csv`, `NN_tracksMeta.csv` and `NN_tracks.csv` from `dir`.
#[pyfunction]
fn read_recording(dir: PathBuf, recording_id: u32) -> PyResult<PyRecording> {
    let rec = read_files(&RecordingFileSet::in_dir(&dir, recording_id)).map_err(value_err)?;
    Ok(PyRecording { meta: rec.meta, tracks: rec.tracks, surround: rec.surround })
}

/// Ground-truth recording of a TOML scenario script.
#[pyfunction]
fn generate(script: &str) -> PyResult<PyRecording> {
    let script = ScenarioScript::from_toml_str(script).map_err(value_err)?;
    let truth = generate_truth(&script).map_err(value_err)?;
    let surround = compute_surround(&truth.tracks);
    Ok(PyRecording { meta: truth.meta, tracks: truth.tracks, surround })
}

/// Noisy per-frame detections `[(cx, cy, length, width), ...]` of a scenario
/// script. `seed` defaults to the script's own.
#[pyfunction]
#[pyo3(signature = (script, seed = None))]
fn detections(script: &str, seed: Option<u64>) -> PyResult<Vec<Vec<(f64, f64, f64, f64)>>> {
    let script = ScenarioScript::from_toml_str(script).map_err(value_err)?;
    let truth = generate_truth(&script).map_err(value_err)?;
    let frames = corrupt(&truth, &script.noise, seed.unwrap_or(script.seed));
    Ok(frames
        .into_iter()
        .map(|f| f.into_iter().map(|d| (d.cx, d.cy, d.length, d.width)).collect())
        .collect())
}

#[pymodule]
fn hwtraj_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLaneChangeParams>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyRecording>()?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(fit_lane_change, m)?)?;
    m.add_function(wrap_pyfunction!(headway_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(read_recording, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(detections, m)?)?;
    Ok(())
}
