//! Kalman filtering and Rauch-Tung-Striebel smoothing of track positions.
//!
//! Each axis is an independent constant-acceleration chain with state
//! `(position, velocity, acceleration)` driven by white jerk noise. Coasted
//! frames are predicted but never updated.

use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{lane_id_of, DrivingDirection, KinematicState, RecordingMeta, Track};
use crate::tracker::{Observation, RawTrack};

/// Covariance eigenvalues below `-PSD_TOLERANCE` are a numerical failure.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmootherConfig {
    /// Frame period, seconds.
    pub dt: f64,
    pub measurement_sigma: f64,
    /// White-jerk intensity, m/s³.
    pub jerk_sigma: f64,
    pub initial_velocity_sigma: f64,
    pub initial_accel_sigma: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            dt: 1.0 / 25.0,
            measurement_sigma: 0.10,
            jerk_sigma: 2.0,
            initial_velocity_sigma: 30.0,
            initial_accel_sigma: 5.0,
        }
    }
}

impl SmootherConfig {
    pub fn for_frame_rate(frame_rate: f64) -> Self {
        SmootherConfig { dt: 1.0 / frame_rate, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SmoothError> {
        let all = [
            self.dt,
            self.measurement_sigma,
            self.jerk_sigma,
            self.initial_velocity_sigma,
            self.initial_accel_sigma,
        ];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(SmoothError::InvalidConfig(format!("{self:?}")))
        }
    }

    fn transition(&self) -> Matrix3<f64> {
        let dt = self.dt;
        Matrix3::new(1.0, dt, 0.5 * dt * dt, 0.0, 1.0, dt, 0.0, 0.0, 1.0)
    }

    /// Discretized white-jerk process noise.
    fn process_noise(&self) -> Matrix3<f64> {
        let dt = self.dt;
        let q = self.jerk_sigma * self.jerk_sigma;
        let (d2, d3, d4, d5) = (dt * dt, dt.powi(3), dt.powi(4), dt.powi(5));
        q * Matrix3::new(
            d5 / 20.0, d4 / 8.0, d3 / 6.0,
            d4 / 8.0, d3 / 3.0, d2 / 2.0,
            d3 / 6.0, d2 / 2.0, dt,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SmoothError {
    #[error("no observations to smooth")]
    Empty,
    #[error("covariance lost positive semi-definiteness at frame {frame} (min eigenvalue {min_eigenvalue:e})")]
    NumericalFailure { frame: u32, min_eigenvalue: f64 },
    #[error("invalid smoother config: {0}")]
    InvalidConfig(String),
}

/// Forward-pass results for one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFiltered {
    pub predicted_state: Vec<Vector3<f64>>,
    pub predicted_cov: Vec<Matrix3<f64>>,
    pub filtered_state: Vec<Vector3<f64>>,
    pub filtered_cov: Vec<Matrix3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSeries {
    pub frames: Vec<u32>,
    pub x: AxisFiltered,
    pub y: AxisFiltered,
}

impl FilteredSeries {
    /// Filtered `(x, vx, ax, y, vy, ay)` at index `k`.
    pub fn state(&self, k: usize) -> [f64; 6] {
        join(&self.x.filtered_state[k], &self.y.filtered_state[k])
    }

    pub fn covariance_trace(&self, k: usize) -> f64 {
        self.x.filtered_cov[k].trace() + self.y.filtered_cov[k].trace()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisSmoothed {
    pub state: Vec<Vector3<f64>>,
    pub cov: Vec<Matrix3<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SmootherDiagnostics {
    /// Frames whose predicted covariance needed a pseudo-inverse.
    pub pseudo_inverse_frames: Vec<u32>,
    /// RMS distance between smoothed and measured positions.
    pub rmse_vs_raw: f64,
    pub min_eigenvalue: f64,
}

/// Smoothed per-frame state `(x, vx, ax, y, vy, ay)` and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedSeries {
    pub frames: Vec<u32>,
    pub x: AxisSmoothed,
    pub y: AxisSmoothed,
    pub diagnostics: SmootherDiagnostics,
}

impl SmoothedSeries {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn state(&self, k: usize) -> [f64; 6] {
        join(&self.x.state[k], &self.y.state[k])
    }

    /// Block-diagonal 6×6 covariance at index `k`.
    pub fn covariance(&self, k: usize) -> [[f64; 6]; 6] {
        let mut out = [[0.0; 6]; 6];
        for (off, m) in [(0, &self.x.cov[k]), (3, &self.y.cov[k])] {
            for i in 0..3 {
                for j in 0..3 {
                    out[off + i][off + j] = m[(i, j)];
                }
            }
        }
        out
    }

    pub fn covariance_trace(&self, k: usize) -> f64 {
        self.x.cov[k].trace() + self.y.cov[k].trace()
    }
}

fn join(a: &Vector3<f64>, b: &Vector3<f64>) -> [f64; 6] {
    [a[0], a[1], a[2], b[0], b[1], b[2]]
}

fn symmetrize(m: Matrix3<f64>) -> Matrix3<f64> {
    0.5 * (m + m.transpose())
}

fn min_eigenvalue(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().min()
}

fn check_psd(m: &Matrix3<f64>, frame: u32) -> Result<f64, SmoothError> {
    let min = min_eigenvalue(m);
    if min < -PSD_TOLERANCE || !min.is_finite() {
        return Err(SmoothError::NumericalFailure { frame, min_eigenvalue: min });
    }
    Ok(min)
}

/// Measured samples used to center the velocity and acceleration prior.
const INIT_WINDOW: usize = 25;

/// Prior mean `(velocity, acceleration)` at the first frame.
///
/// Least-squares fit of `z_k - z_0 = v t + a t²/2` over the first measured
/// samples; zero with a single sample, zero acceleration with two.
fn initial_motion(frames: &[u32], values: &[f64], measured: &[bool], dt: f64) -> (f64, f64) {
    let samples: Vec<(f64, f64)> = (1..values.len())
        .filter(|&k| measured[k])
        .take(INIT_WINDOW - 1)
        .map(|k| ((frames[k] - frames[0]) as f64 * dt, values[k] - values[0]))
        .collect();
    match samples.len() {
        0 => (0.0, 0.0),
        1 => (samples[0].1 / samples[0].0, 0.0),
        _ => {
            // normal equations in (v, a) with basis (t, t²/2)
            let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(t, z) in &samples {
                let (f1, f2) = (t, 0.5 * t * t);
                s11 += f1 * f1;
                s12 += f1 * f2;
                s22 += f2 * f2;
                b1 += f1 * z;
                b2 += f2 * z;
            }
            let det = s11 * s22 - s12 * s12;
            if det.abs() <= f64::EPSILON * s11 * s22 {
                return (b1 / s11, 0.0);
            }
            ((s22 * b1 - s12 * b2) / det, (s11 * b2 - s12 * b1) / det)
        }
    }
}

fn filter_axis(
    frames: &[u32],
    values: &[f64],
    measured: &[bool],
    cfg: &SmootherConfig,
    init_sigma: f64,
) -> Result<(AxisFiltered, f64), SmoothError> {
    let f = cfg.transition();
    let q = cfg.process_noise();
    let h = RowVector3::new(1.0, 0.0, 0.0);
    let r = cfg.measurement_sigma * cfg.measurement_sigma;

    let n = values.len();
    let mut out = AxisFiltered {
        predicted_state: Vec::with_capacity(n),
        predicted_cov: Vec::with_capacity(n),
        filtered_state: Vec::with_capacity(n),
        filtered_cov: Vec::with_capacity(n),
    };
    let (v0, a0) = initial_motion(frames, values, measured, cfg.dt);
    let x0 = Vector3::new(values[0], v0, a0);
    let p0 = Matrix3::from_diagonal(&Vector3::new(
        init_sigma * init_sigma,
        cfg.initial_velocity_sigma.powi(2),
        cfg.initial_accel_sigma.powi(2),
    ));
    out.predicted_state.push(x0);
    out.predicted_cov.push(p0);
    out.filtered_state.push(x0);
    out.filtered_cov.push(p0);

    let mut min_eig = min_eigenvalue(&p0);
    let (mut x, mut p) = (x0, p0);
    for k in 1..n {
        let xp = f * x;
        let pp = symmetrize(f * p * f.transpose() + q);
        min_eig = min_eig.min(check_psd(&pp, frames[k])?);
        out.predicted_state.push(xp);
        out.predicted_cov.push(pp);
        if measured[k] {
            let s = (h * pp * h.transpose())[(0, 0)] + r;
            let gain: Vector3<f64> = pp * h.transpose() / s;
            let innovation = values[k] - (h * xp)[(0, 0)];
            x = xp + gain * innovation;
            // Joseph form
            let ikh = Matrix3::identity() - gain * h;
            p = symmetrize(ikh * pp * ikh.transpose() + gain * r * gain.transpose());
        } else {
            x = xp;
            p = pp;
        }
        min_eig = min_eig.min(check_psd(&p, frames[k])?);
        out.filtered_state.push(x);
        out.filtered_cov.push(p);
    }
    Ok((out, min_eig))
}

/// Forward Kalman pass over observations of one track.
///
/// The first observation initializes the position. Velocity and
/// acceleration start from a short least-squares fit of the first measured
/// samples, with the configured prior spread; a lone observation starts at
/// rest.
pub fn forward_filter(obs: &[Observation], cfg: &SmootherConfig) -> Result<FilteredSeries, SmoothError> {
    cfg.validate()?;
    if obs.is_empty() {
        return Err(SmoothError::Empty);
    }
    let frames: Vec<u32> = obs.iter().map(|o| o.frame).collect();
    let measured: Vec<bool> = obs.iter().map(|o| o.measured).collect();
    let xs: Vec<f64> = obs.iter().map(|o| o.x).collect();
    let ys: Vec<f64> = obs.iter().map(|o| o.y).collect();
    let sigma = cfg.measurement_sigma;
    let (x, _) = filter_axis(&frames, &xs, &measured, cfg, sigma)?;
    let (y, _) = filter_axis(&frames, &ys, &measured, cfg, sigma)?;
    Ok(FilteredSeries { frames, x, y })
}

fn smooth_axis(
    frames: &[u32],
    axis: &AxisFiltered,
    cfg: &SmootherConfig,
    diag: &mut SmootherDiagnostics,
) -> Result<AxisSmoothed, SmoothError> {
    let f = cfg.transition();
    let n = axis.filtered_state.len();
    let mut state = axis.filtered_state.clone();
    let mut cov = axis.filtered_cov.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        let pp = &axis.predicted_cov[k + 1];
        let inv = match pp.try_inverse() {
            Some(inv) if inv.iter().all(|v| v.is_finite()) => inv,
            _ => {
                if !diag.pseudo_inverse_frames.contains(&frames[k + 1]) {
                    diag.pseudo_inverse_frames.push(frames[k + 1]);
                }
                pp.pseudo_inverse(1e-15).map_err(|_| SmoothError::NumericalFailure {
                    frame: frames[k + 1],
                    min_eigenvalue: f64::NAN,
                })?
            }
        };
        let gain = axis.filtered_cov[k] * f.transpose() * inv;
        state[k] = axis.filtered_state[k] + gain * (state[k + 1] - axis.predicted_state[k + 1]);
        cov[k] = symmetrize(axis.filtered_cov[k] + gain * (cov[k + 1] - pp) * gain.transpose());
        diag.min_eigenvalue = diag.min_eigenvalue.min(check_psd(&cov[k], frames[k])?);
    }
    Ok(AxisSmoothed { state, cov })
}

/// Backward Rauch-Tung-Striebel pass.
pub fn rts_smooth(filtered: &FilteredSeries, cfg: &SmootherConfig) -> Result<SmoothedSeries, SmoothError> {
    cfg.validate()?;
    if filtered.frames.is_empty() {
        return Err(SmoothError::Empty);
    }
    let mut diagnostics = SmootherDiagnostics { min_eigenvalue: f64::INFINITY, ..Default::default() };
    let x = smooth_axis(&filtered.frames, &filtered.x, cfg, &mut diagnostics)?;
    let y = smooth_axis(&filtered.frames, &filtered.y, cfg, &mut diagnostics)?;
    if let (Some(a), Some(b)) = (x.cov.last(), y.cov.last()) {
        diagnostics.min_eigenvalue = diagnostics.min_eigenvalue.min(min_eigenvalue(a)).min(min_eigenvalue(b));
    }
    diagnostics.pseudo_inverse_frames.sort_unstable();
    Ok(SmoothedSeries { frames: filtered.frames.clone(), x, y, diagnostics })
}

/// Forward filter plus backward smoother.
pub fn smooth_observations(obs: &[Observation], cfg: &SmootherConfig) -> Result<SmoothedSeries, SmoothError> {
    let filtered = forward_filter(obs, cfg)?;
    let mut smoothed = rts_smooth(&filtered, cfg)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (k, o) in obs.iter().enumerate().filter(|(_, o)| o.measured) {
        let dx = smoothed.x.state[k][0] - o.x;
        let dy = smoothed.y.state[k][0] - o.y;
        sum += dx * dx + dy * dy;
        n += 1;
    }
    smoothed.diagnostics.rmse_vs_raw = if n > 0 { (sum / n as f64).sqrt() } else { 0.0 };
    Ok(smoothed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTrack {
    pub track: Track,
    pub diagnostics: SmootherDiagnostics,
}

/// Smooths a confirmed raw track into a [`Track`].
///
/// The carriageway is the one containing the median smoothed `y`, falling
/// back to the sign of the mean longitudinal velocity when the vehicle is
/// off the marked road.
pub fn smooth_track(raw: &RawTrack, meta: &RecordingMeta, cfg: &SmootherConfig) -> Result<SmoothedTrack, SmoothError> {
    let series = smooth_observations(&raw.observations, cfg)?;
    let n = series.len();

    let mut ys: Vec<f64> = series.y.state.iter().map(|s| s[0]).collect();
    ys.sort_by(f64::total_cmp);
    let direction = meta.carriageway_of(ys[n / 2]).unwrap_or_else(|| {
        let mean_vx = series.x.state.iter().map(|s| s[1]).sum::<f64>() / n as f64;
        if mean_vx < 0.0 {
            DrivingDirection::UpperCarriageway
        } else {
            DrivingDirection::LowerCarriageway
        }
    });

    let states: Vec<KinematicState> = (0..n)
        .map(|k| {
            let [x, vx, ax, y, vy, ay] = series.state(k);
            KinematicState {
                frame: series.frames[k],
                x,
                y,
                vx,
                vy,
                ax,
                ay,
                lane_id: lane_id_of(y, meta, direction).id(),
            }
        })
        .collect();
    let (length, width) = raw.extent();
    let mean_speed = Track::compute_mean_speed(&states);
    Ok(SmoothedTrack {
        track: Track {
            track_id: raw.track_id,
            class: raw.class(),
            direction,
            length,
            width,
            states,
            mean_speed,
        },
        diagnostics: series.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn obs(frame: u32, x: f64, y: f64) -> Observation {
        Observation { frame, x, y, measured: true, detection: None }
    }

    fn coasted(frame: u32) -> Observation {
        Observation { frame, x: f64::NAN, y: f64::NAN, measured: false, detection: None }
    }

    #[test]
    fn single_observation_initializes_state() {
        let cfg = SmootherConfig::default();
        let f = forward_filter(&[obs(0, 12.0, 3.0)], &cfg).unwrap();
        assert_eq!(f.state(0), [12.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let s = rts_smooth(&f, &cfg).unwrap();
        assert_eq!(s.state(0), [12.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_position_converges() {
        let cfg = SmootherConfig::default();
        let o: Vec<_> = (0..200).map(|k| obs(k, 42.0, -3.0)).collect();
        let f = forward_filter(&o, &cfg).unwrap();
        let [x, _, _, y, _, _] = f.state(199);
        assert!((x - 42.0).abs() < 1e-6 && (y + 3.0).abs() < 1e-6);
        let s = rts_smooth(&f, &cfg).unwrap();
        for k in 0..200 {
            let st = s.state(k);
            assert!(st[1].abs() < 1e-9 && st[2].abs() < 1e-9, "frame {k}: {st:?}");
            assert!(st[4].abs() < 1e-9 && st[5].abs() < 1e-9);
        }
    }

    #[test]
    fn prediction_only_grows_uncertainty() {
        let cfg = SmootherConfig::default();
        let mut o = vec![obs(0, 5.0, 1.0)];
        o.extend((1..30).map(coasted));
        let f = forward_filter(&o, &cfg).unwrap();
        for k in 1..30 {
            assert_eq!(f.state(k)[0], 5.0);
            assert!(f.covariance_trace(k) > f.covariance_trace(k - 1));
        }
    }

    #[test]
    fn quadratic_motion_is_recovered() {
        let cfg = SmootherConfig::default();
        let (v, a) = (20.0, 0.5);
        let pos = |k: u32| {
            let t = k as f64 * cfg.dt;
            100.0 + v * t + 0.5 * a * t * t
        };
        let o: Vec<_> = (0..250).map(|k| obs(k, pos(k), 2.0)).collect();
        let s = smooth_observations(&o, &cfg).unwrap();
        for k in 10..250 {
            let t = k as f64 * cfg.dt;
            let [x, vx, ax, ..] = s.state(k);
            assert!((x - pos(k as u32)).abs() < 1e-6, "x at {k}: {}", x - pos(k as u32));
            assert!((vx - (v + a * t)).abs() < 1e-6, "vx at {k}: {}", vx - (v + a * t));
            assert!((ax - a).abs() < 1e-6, "ax at {k}: {}", ax - a);
        }
    }

    #[test]
    fn smoothing_beats_raw_noise() {
        let cfg = SmootherConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = Normal::new(0.0, 0.10).unwrap();
        let truth = |k: u32| 30.0 * k as f64 * cfg.dt;
        let o: Vec<_> = (0..500)
            .map(|k| obs(k, truth(k) + noise.sample(&mut rng), 1.5 + noise.sample(&mut rng)))
            .collect();
        let s = smooth_observations(&o, &cfg).unwrap();
        let rmse = |f: &dyn Fn(usize) -> (f64, f64)| {
            ((0..500).map(|k| {
                let (x, y) = f(k);
                (x - truth(k as u32)).powi(2) + (y - 1.5).powi(2)
            }).sum::<f64>() / 500.0).sqrt()
        };
        let smooth = rmse(&|k| (s.x.state[k][0], s.y.state[k][0]));
        let raw = rmse(&|k| (o[k].x, o[k].y));
        assert!(smooth < 0.10 && smooth < raw, "smoothed {smooth} raw {raw}");
    }

    #[test]
    fn smoothed_covariance_is_psd_and_tighter() {
        let cfg = SmootherConfig::default();
        let mut o: Vec<_> = (0..80).map(|k| obs(k, k as f64, 0.1 * k as f64)).collect();
        for k in 30..40 {
            o[k] = coasted(k as u32);
        }
        let f = forward_filter(&o, &cfg).unwrap();
        let s = rts_smooth(&f, &cfg).unwrap();
        assert_eq!(s.state(79), f.state(79));
        for k in 0..80 {
            assert!(s.covariance_trace(k) <= f.covariance_trace(k) + 1e-12);
            let c = s.covariance(k);
            for i in 0..6 {
                for j in 0..6 {
                    assert!((c[i][j] - c[j][i]).abs() < 1e-15);
                }
            }
        }
        assert!(s.diagnostics.min_eigenvalue >= -PSD_TOLERANCE);
        assert!(s.diagnostics.pseudo_inverse_frames.is_empty());
    }

    #[test]
    fn axes_are_independent() {
        let cfg = SmootherConfig::default();
        let o: Vec<_> = (0..60).map(|k| obs(k, (k as f64 * 0.3).sin() * 4.0, 25.0 * k as f64 * 0.04)).collect();
        let swapped: Vec<_> = o.iter().map(|o| Observation { x: o.y, y: o.x, ..*o }).collect();
        let a = smooth_observations(&o, &cfg).unwrap();
        let b = smooth_observations(&swapped, &cfg).unwrap();
        for k in 0..60 {
            let (sa, sb) = (a.state(k), b.state(k));
            assert_eq!(&sa[..3], &sb[3..]);
            assert_eq!(&sa[3..], &sb[..3]);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SmootherConfig::default();
        assert_eq!(forward_filter(&[], &cfg), Err(SmoothError::Empty));
        let bad = SmootherConfig { jerk_sigma: 0.0, ..cfg };
        assert!(matches!(forward_filter(&[obs(0, 0.0, 0.0)], &bad), Err(SmoothError::InvalidConfig(_))));
    }
}
