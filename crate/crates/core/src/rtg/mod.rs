//! Real-time trajectory generation: turns a stream of timestamped action
//! chunks into one C¹, velocity-bounded executing trajectory.
//!
//! Each accepted chunk produces a new spline segment that starts at the splice
//! instant `t_s = t_obs + t1 + t2`; the part of the chunk before `t_s` is never
//! executed and the previous trajectory keeps running until `t_s`. Inside the
//! window the segment solves one small QP per scalar channel (see [`blend`]).
//!
//! Whole-body actions are handled on 23 scalar channels through a [`Chart`]:
//! orientations become rotation vectors around a reference orientation that
//! persists across chunks and is moved to the splice state only when a window
//! swings more than a quarter turn away from it.
//!
//! Finished trajectories are published atomically; a [`TrajectoryReader`] sees
//! either the previous or the new trajectory, never a partial one.

mod blend;
mod clock;
mod spline;
mod telemetry;

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use nalgebra::Vector3;
use thiserror::Error;

use crate::action::{
    wrap_yaw_sequence, ActionChunk, ActionError, Chart, RobotFrameAnchor, WholeBodyAction, CHART_CHANNELS,
};
use crate::pose::so3_right_jacobian;
use crate::qp::{QpError, QpProblem, QpSettings, QpStatus, QpWorkspace};

pub use blend::{blend_matrices, blend_vectors, blend_window_qp, initial_weights, window_weights};
pub use clock::{nanos_to_secs, secs_to_nanos, Clock, VirtualClock, WallClock};
pub use spline::SplineSegment;
pub use telemetry::{write_telemetry_csv, IngestOutcome, TelemetryRecord};

/// Rotation excursion from the chart reference beyond which the chart is moved
/// to the splice state.
pub const REANCHOR_ANGLE: f64 = FRAC_PI_2;
/// Largest rotation excursion a window may have after re-anchoring.
pub const MAX_WINDOW_SWING: f64 = PI - 0.1;

#[derive(Debug, Error)]
pub enum RtgError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("stale chunk: t1 + t2 = {:.6} s is not below the chunk duration {t_e:.6} s", t1 + t2)]
    Stale { t1: f64, t2: f64, t_e: f64 },
    #[error("blend QP infeasible on channel {channel}")]
    InfeasibleBlend { channel: usize },
    #[error("rotation swing of {swing:.4} rad in the blend window is too large")]
    WindowTooWide { swing: f64 },
    #[error("no trajectory at t = {t}")]
    NotStarted { t: f64 },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Action(#[from] ActionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtgConfig {
    /// Optimization grid step; `None` uses the chunk's `dt`.
    pub dt_opt: Option<f64>,
    /// Velocity limit per channel.
    pub v_max: Vec<f64>,
    pub w_acc: f64,
    /// Decay constant of the old-trajectory weight; `None` uses a third of the
    /// blending horizon.
    pub tau: Option<f64>,
    /// Blending horizon as a fraction of the old trajectory's remaining length.
    pub t_f_fraction: f64,
    /// Processing budget `t2` used in the discard rule.
    pub t2_budget: f64,
    pub control_rate: f64,
    pub ingest_rate: f64,
    pub qp: QpSettings,
}

impl RtgConfig {
    pub fn new(v_max: Vec<f64>) -> Self {
        RtgConfig {
            dt_opt: None,
            v_max,
            w_acc: 1e-2,
            tau: None,
            t_f_fraction: 0.5,
            t2_budget: 0.005,
            control_rate: 250.0,
            ingest_rate: 20.0,
            qp: QpSettings::default(),
        }
    }

    pub fn uniform(channels: usize, v_max: f64) -> Self {
        Self::new(vec![v_max; channels])
    }

    pub fn validate(&self) -> Result<(), RtgError> {
        let bad = |m: String| Err(RtgError::InvalidInput(m));
        if self.v_max.is_empty() {
            return bad("v_max has no channels".into());
        }
        if let Some((i, v)) = self.v_max.iter().enumerate().find(|(_, v)| !(**v > 0.0) || !v.is_finite()) {
            return bad(format!("v_max[{i}] = {v} must be positive"));
        }
        if !(self.w_acc >= 0.0) || !self.w_acc.is_finite() {
            return bad(format!("w_acc = {} must be non-negative", self.w_acc));
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0) {
                return bad(format!("tau = {tau} must be positive"));
            }
        }
        if let Some(dt) = self.dt_opt {
            if !(dt > 0.0) {
                return bad(format!("dt_opt = {dt} must be positive"));
            }
        }
        if !(self.t_f_fraction > 0.0 && self.t_f_fraction <= 1.0) {
            return bad(format!("t_f_fraction = {} must lie in (0, 1]", self.t_f_fraction));
        }
        if !(self.t2_budget >= 0.0) {
            return bad(format!("t2_budget = {} must be non-negative", self.t2_budget));
        }
        if !(self.control_rate > 0.0) || !(self.ingest_rate > 0.0) {
            return bad("rates must be positive".into());
        }
        Ok(())
    }
}

/// A chunk of plain scalar channels, `frames[i][ch]` at `t_obs + i·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelChunk {
    pub t_obs: f64,
    pub dt: f64,
    pub frames: Vec<Vec<f64>>,
}

impl ChannelChunk {
    pub fn new(t_obs: f64, dt: f64, frames: Vec<Vec<f64>>) -> Result<Self, RtgError> {
        if !(dt > 0.0) || frames.is_empty() {
            return Err(RtgError::InvalidInput("chunk needs dt > 0 and at least one frame".into()));
        }
        let c = frames[0].len();
        if frames.iter().any(|f| f.len() != c || f.iter().any(|v| !v.is_finite())) {
            return Err(RtgError::InvalidInput("ragged or non-finite chunk frames".into()));
        }
        Ok(ChannelChunk { t_obs, dt, frames })
    }

    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 * self.dt
    }

    pub fn channels(&self) -> usize {
        self.frames[0].len()
    }
}

/// Linear interpolation of uniformly spaced frames at absolute times.
fn interpolate_frames(frames: &[Vec<f64>], t_obs: f64, dt: f64, times: &[f64], channels: usize) -> Vec<Vec<f64>> {
    let last = frames.len() - 1;
    let mut out = vec![Vec::with_capacity(times.len()); channels];
    for &t in times {
        let u = ((t - t_obs) / dt).clamp(0.0, last as f64);
        let r = u.round();
        let (i, s) = if (u - r).abs() < 1e-9 {
            (r as usize, 0.0)
        } else {
            let i = (u.floor() as usize).min(last.saturating_sub(1));
            (i, u - i as f64)
        };
        for (ch, o) in out.iter_mut().enumerate() {
            let v = if s == 0.0 {
                frames[i][ch]
            } else {
                (1.0 - s) * frames[i][ch] + s * frames[i + 1][ch]
            };
            o.push(v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub spline: SplineSegment,
    /// Chart of whole-body segments; `None` for plain channel segments.
    pub chart: Option<Chart>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSampleInfo {
    pub segment: usize,
    /// Past the end of the last segment: the final frame is held.
    pub exhausted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionSample {
    pub action: WholeBodyAction,
    pub exhausted: bool,
}

/// Immutable executing trajectory: segments ordered by start time, each valid
/// from its start to the next segment's start.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    segments: Vec<Arc<Segment>>,
}

impl Trajectory {
    pub fn segments(&self) -> &[Arc<Segment>] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn t_start(&self) -> Option<f64> {
        self.segments.first().map(|s| s.spline.t0)
    }

    pub fn t_end(&self) -> Option<f64> {
        self.segments.last().map(|s| s.spline.t_end())
    }

    pub fn channels(&self) -> usize {
        self.segments.first().map_or(0, |s| s.spline.channels())
    }

    /// Index of the segment that owns time `t`.
    pub fn segment_index(&self, t: f64) -> Option<usize> {
        let i = self.segments.partition_point(|s| s.spline.t0 <= t);
        i.checked_sub(1)
    }

    /// Channel values and rates of segment `idx` at `t`, holding its end
    /// values past its end.
    pub fn sample_segment(&self, idx: usize, t: f64, values: &mut [f64], rates: &mut [f64]) -> bool {
        let s = &self.segments[idx].spline;
        let end = s.t_end();
        if t > end {
            s.eval_all(end, values, rates);
            rates.iter_mut().for_each(|r| *r = 0.0);
            true
        } else {
            s.eval_all(t, values, rates);
            false
        }
    }

    pub fn sample_channels(&self, t: f64, values: &mut [f64], rates: &mut [f64]) -> Result<ChannelSampleInfo, RtgError> {
        let idx = self.segment_index(t).ok_or(RtgError::NotStarted { t })?;
        let past = self.sample_segment(idx, t, values, rates);
        Ok(ChannelSampleInfo {
            segment: idx,
            exhausted: past && idx + 1 == self.segments.len(),
        })
    }

    pub fn sample(&self, t: f64) -> Result<ActionSample, RtgError> {
        let mut v = [0.0; CHART_CHANNELS];
        let mut r = [0.0; CHART_CHANNELS];
        if self.channels() != CHART_CHANNELS {
            return Err(RtgError::InvalidInput("trajectory does not hold whole-body channels".into()));
        }
        let info = self.sample_channels(t, &mut v, &mut r)?;
        let chart = self.segments[info.segment]
            .chart
            .ok_or_else(|| RtgError::InvalidInput("segment has no chart".into()))?;
        Ok(ActionSample {
            action: chart.from_channels(&v),
            exhausted: info.exhausted,
        })
    }
}

/// Shared read side of an engine. Cheap to clone and usable from another
/// thread.
#[derive(Clone, Debug)]
pub struct TrajectoryReader {
    shared: Arc<RwLock<Arc<Trajectory>>>,
}

impl TrajectoryReader {
    pub fn snapshot(&self) -> Arc<Trajectory> {
        match self.shared.read() {
            Ok(g) => Arc::clone(&g),
            Err(p) => Arc::clone(&p.into_inner()),
        }
    }

    pub fn sample(&self, t: f64) -> Result<ActionSample, RtgError> {
        self.snapshot().sample(t)
    }

    pub fn sample_channels(&self, t: f64, values: &mut [f64], rates: &mut [f64]) -> Result<ChannelSampleInfo, RtgError> {
        self.snapshot().sample_channels(t, values, rates)
    }
}

/// Timing of one accepted window.
#[derive(Clone, Copy, Debug)]
struct Window {
    t_obs: f64,
    t1: f64,
    t_s: f64,
    t_end: f64,
    /// Blending horizon measured from `t_s`.
    t_f_offset: f64,
    tau: f64,
    intervals: usize,
    h: f64,
    splice: bool,
}

impl Window {
    fn knot_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = (0..=self.intervals).map(|k| self.t_s + k as f64 * self.h).collect();
        t[self.intervals] = self.t_end;
        t
    }

    /// Number of knots that carry an old-trajectory weight.
    fn blend_knots(&self) -> usize {
        if !self.splice {
            return 0;
        }
        (0..=self.intervals)
            .take_while(|&k| k as f64 * self.h <= self.t_f_offset + 1e-12)
            .count()
    }
}

struct Solved {
    spline: SplineSegment,
    iterations: usize,
    status: QpStatus,
    problems: Vec<QpProblem>,
}

pub struct RtgEngine {
    cfg: RtgConfig,
    current: Arc<Trajectory>,
    shared: Arc<RwLock<Arc<Trajectory>>>,
    chart: Option<Chart>,
    whole_body: bool,
    initial_state: Option<WholeBodyAction>,
    hold_start: bool,
    anchor: RobotFrameAnchor,
    telemetry: Vec<TelemetryRecord>,
    stale_count: usize,
    capture_qps: bool,
    captured: Vec<QpProblem>,
}

impl RtgEngine {
    /// Engine over plain scalar channels, one per `v_max` entry.
    pub fn new(cfg: RtgConfig) -> Result<Self, RtgError> {
        cfg.validate()?;
        let current = Arc::new(Trajectory::default());
        Ok(RtgEngine {
            cfg,
            shared: Arc::new(RwLock::new(Arc::clone(&current))),
            current,
            chart: None,
            whole_body: false,
            initial_state: None,
            hold_start: false,
            anchor: RobotFrameAnchor::default(),
            telemetry: Vec::new(),
            stale_count: 0,
            capture_qps: false,
            captured: Vec::new(),
        })
    }

    /// Engine over whole-body actions; `cfg.v_max` must have one entry per
    /// chart channel.
    pub fn whole_body(cfg: RtgConfig) -> Result<Self, RtgError> {
        if cfg.v_max.len() != CHART_CHANNELS {
            return Err(RtgError::InvalidInput(format!(
                "whole-body engine needs {CHART_CHANNELS} velocity limits, got {}",
                cfg.v_max.len()
            )));
        }
        let mut e = Self::new(cfg)?;
        e.whole_body = true;
        Ok(e)
    }

    /// Fixes the initial chart instead of taking it from the first chunk.
    pub fn with_chart(mut self, chart: Chart) -> Self {
        self.chart = Some(chart);
        self
    }

    /// Robot state used to decode delta chunks observed before any trajectory
    /// exists.
    pub fn with_initial_state(mut self, state: WholeBodyAction) -> Self {
        self.initial_state = Some(state);
        self
    }

    /// Robot state held before the first segment. The first segment then
    /// starts from this state at rest instead of jumping to the chunk.
    pub fn with_start_hold(mut self, state: WholeBodyAction) -> Self {
        self.initial_state = Some(state);
        self.hold_start = true;
        self
    }

    pub fn with_anchor(mut self, anchor: RobotFrameAnchor) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn config(&self) -> &RtgConfig {
        &self.cfg
    }

    pub fn chart(&self) -> Option<Chart> {
        self.chart
    }

    pub fn trajectory(&self) -> &Arc<Trajectory> {
        &self.current
    }

    pub fn reader(&self) -> TrajectoryReader {
        TrajectoryReader {
            shared: Arc::clone(&self.shared),
        }
    }

    pub fn telemetry(&self) -> &[TelemetryRecord] {
        &self.telemetry
    }

    pub fn stale_count(&self) -> usize {
        self.stale_count
    }

    /// Keeps the per-channel QPs of the most recent accepted window. Each
    /// channel is shifted by its splice value (or first target without a
    /// splice) before solving, and the captured problems are in those shifted
    /// coordinates.
    pub fn set_qp_capture(&mut self, on: bool) {
        self.capture_qps = on;
        if !on {
            self.captured.clear();
        }
    }

    pub fn captured_qps(&self) -> &[QpProblem] {
        &self.captured
    }

    pub fn sample(&self, t: f64) -> Result<ActionSample, RtgError> {
        self.current.sample(t)
    }

    pub fn sample_channels(&self, t: f64, values: &mut [f64], rates: &mut [f64]) -> Result<ChannelSampleInfo, RtgError> {
        self.current.sample_channels(t, values, rates)
    }

    /// Ingests the first chunk; fails if a trajectory already exists.
    pub fn ingest_initial_chunk(&mut self, chunk: &ActionChunk, now: f64) -> Result<TelemetryRecord, RtgError> {
        if !self.current.is_empty() {
            return Err(RtgError::InvalidInput("a trajectory is already executing".into()));
        }
        self.ingest_chunk(chunk, now)
    }

    /// Like [`Self::ingest_chunk`], with `now` read from `clock` and the
    /// processing time measured on the wall clock.
    pub fn ingest_chunk_timed(&mut self, chunk: &ActionChunk, clock: &dyn Clock) -> Result<TelemetryRecord, RtgError> {
        let now = clock.now();
        let start = Instant::now();
        let r = self.ingest_chunk(chunk, now);
        let t2 = start.elapsed().as_secs_f64();
        if let Some(last) = self.telemetry.last_mut() {
            last.t2_measured = Some(t2);
        }
        r.map(|mut rec| {
            rec.t2_measured = Some(t2);
            rec
        })
    }

    fn reject(&mut self, t_obs: f64, t1: f64, outcome: IngestOutcome, err: RtgError) -> RtgError {
        self.telemetry
            .push(TelemetryRecord::rejected(t_obs, t1, self.cfg.t2_budget, outcome));
        err
    }

    fn plan(&mut self, t_obs: f64, duration: f64, dt: f64, frames: usize, now: f64) -> Result<Window, RtgError> {
        let t1 = now - t_obs;
        if frames < 2 {
            let e = RtgError::InvalidInput(format!("chunk needs at least 2 frames, got {frames}"));
            return Err(self.reject(t_obs, t1, IngestOutcome::Invalid, e));
        }
        if !(t1 >= 0.0) || !now.is_finite() {
            let e = RtgError::InvalidInput(format!("ingest time {now} precedes the observation at {t_obs}"));
            return Err(self.reject(t_obs, t1, IngestOutcome::Invalid, e));
        }
        let t2 = self.cfg.t2_budget;
        if t1 + t2 >= duration {
            self.stale_count += 1;
            let e = RtgError::Stale { t1, t2, t_e: duration };
            return Err(self.reject(t_obs, t1, IngestOutcome::Stale, e));
        }
        let t_s = t_obs + t1 + t2;
        let t_end = t_obs + duration;
        let span = t_end - t_s;
        let dt_opt = self.cfg.dt_opt.unwrap_or(dt);
        let intervals = ((span / dt_opt - 1e-9).ceil() as usize).max(1);
        let h = span / intervals as f64;
        let splice = match self.current.t_start() {
            Some(start) => start <= t_s,
            None => self.whole_body && self.hold_start,
        };
        let (t_f_offset, tau) = if splice && !self.current.is_empty() {
            let remaining = (self.current.t_end().unwrap_or(t_s) - t_s).max(0.0);
            let tf = (self.cfg.t_f_fraction * remaining).min(span);
            (tf, self.cfg.tau.unwrap_or(tf / 3.0))
        } else {
            (0.0, 0.0)
        };
        Ok(Window {
            t_obs,
            t1,
            t_s,
            t_end,
            t_f_offset,
            tau,
            intervals,
            h,
            splice,
        })
    }

    /// Solves the per-channel QPs of a window. `old` holds the old targets on
    /// the blended knots, `splice` the pinned values and rates at `t_s`.
    fn solve_window(
        &self,
        w: &Window,
        new: &[Vec<f64>],
        old: &[Vec<f64>],
        splice: Option<(&[f64], &[f64])>,
    ) -> Result<Solved, (IngestOutcome, RtgError)> {
        let k = w.intervals;
        let (w1, w2) = if w.splice {
            window_weights(k, w.h, w.t_f_offset, w.tau)
        } else {
            initial_weights(k)
        };
        let (hm, a) = blend_matrices(w.h, &w1, &w2, self.cfg.w_acc, splice.is_some());
        let channels = new.len();
        let zeros = vec![0.0; k + 1];
        let template_splice = splice.map(|_| (0.0, 0.0));
        let (g0, l0, u0) = blend_vectors(&zeros, &zeros, &w1, &w2, self.cfg.v_max[0], template_splice);
        let template = QpProblem {
            h: hm,
            g: g0,
            a,
            l: l0,
            u: u0,
            bandwidth: Some(2),
        };
        let ws = QpWorkspace::new(&template, self.cfg.qp).map_err(|e| (IngestOutcome::Invalid, e.into()))?;

        let mut ctrl = Vec::with_capacity(channels);
        let mut problems = Vec::new();
        let mut iterations = 0;
        let mut status = QpStatus::Solved;
        let mut old_s = vec![0.0; k + 1];
        let mut new_s = vec![0.0; k + 1];
        for ch in 0..channels {
            let offset = match splice {
                Some((v, _)) => v[ch],
                None => new[ch][0],
            };
            for i in 0..=k {
                new_s[i] = new[ch][i] - offset;
                old_s[i] = old.get(ch).and_then(|o| o.get(i)).map_or(0.0, |v| v - offset);
            }
            let vmax = self.cfg.v_max[ch];
            let (g, l, u) = blend_vectors(&old_s, &new_s, &w1, &w2, vmax, splice.map(|(_, r)| (0.0, r[ch])));
            let sol = ws.solve(&g, &l, &u, None).map_err(|e| (IngestOutcome::Invalid, e.into()))?;
            if self.capture_qps {
                problems.push(QpProblem {
                    g: g.clone(),
                    l: l.clone(),
                    u: u.clone(),
                    ..template.clone()
                });
            }
            iterations = iterations.max(sol.iterations);
            match sol.status {
                QpStatus::Infeasible => {
                    return Err((IngestOutcome::Infeasible, RtgError::InfeasibleBlend { channel: ch }));
                }
                QpStatus::MaxIters => status = QpStatus::MaxIters,
                QpStatus::Solved => {}
            }
            let mut c: Vec<f64> = sol.x.iter().map(|x| x + offset).collect();
            let start = match splice {
                Some((v, r)) => {
                    let (y, rate) = (v[ch], r[ch]);
                    if rate.abs() > vmax * (1.0 + 1e-12) {
                        return Err((IngestOutcome::Infeasible, RtgError::InfeasibleBlend { channel: ch }));
                    }
                    c[0] = y - 0.5 * rate * w.h;
                    c[1] = y + 0.5 * rate * w.h;
                    1
                }
                None => 0,
            };
            restore_velocity_bound(&mut c, start, vmax * w.h);
            ctrl.push(c);
        }
        Ok(Solved {
            spline: SplineSegment::new(w.t_s, w.h, ctrl),
            iterations,
            status,
            problems,
        })
    }

    fn finish(
        &mut self,
        w: &Window,
        chart: Option<Chart>,
        solved: Solved,
        splice: Option<(&[f64], &[f64])>,
        now: f64,
    ) -> TelemetryRecord {
        if self.capture_qps {
            self.captured = solved.problems;
        }
        let s = &solved.spline;
        let channels = s.channels();
        let max_blend_velocity = (0..channels).map(|c| s.max_speed(c)).fold(0.0, f64::max);
        let (mut pj, mut vj) = (0.0f64, 0.0f64);
        if let Some((v, r)) = splice {
            let mut nv = vec![0.0; channels];
            let mut nr = vec![0.0; channels];
            s.eval_all(w.t_s, &mut nv, &mut nr);
            for ch in 0..channels {
                pj = pj.max((nv[ch] - v[ch]).abs());
                vj = vj.max((nr[ch] - r[ch]).abs());
            }
        }
        let rec = TelemetryRecord {
            t_obs: w.t_obs,
            t1: w.t1,
            t2_budget: self.cfg.t2_budget,
            t2_measured: None,
            outcome: IngestOutcome::Accepted,
            max_blend_velocity,
            splice_position_jump: pj,
            splice_velocity_jump: vj,
            qp_iterations: solved.iterations,
            qp_status: Some(solved.status),
        };

        let mut segments: Vec<Arc<Segment>> = if w.splice {
            self.current
                .segments
                .iter()
                .filter(|seg| seg.spline.t0 < w.t_s)
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        // Drop segments whose successor already started before `now`.
        let keep_from = segments.partition_point(|seg| seg.spline.t0 <= now).saturating_sub(1);
        segments.drain(..keep_from);
        segments.push(Arc::new(Segment {
            spline: solved.spline,
            chart,
        }));
        self.current = Arc::new(Trajectory { segments });
        match self.shared.write() {
            Ok(mut g) => *g = Arc::clone(&self.current),
            Err(p) => *p.into_inner() = Arc::clone(&self.current),
        }
        if chart.is_some() {
            self.chart = chart;
        }
        self.telemetry.push(rec.clone());
        rec
    }

    /// Ingests a chunk of plain scalar channels at time `now`.
    pub fn ingest_channels(&mut self, chunk: &ChannelChunk, now: f64) -> Result<TelemetryRecord, RtgError> {
        if self.whole_body {
            return Err(RtgError::InvalidInput("whole-body engine needs action chunks".into()));
        }
        let channels = self.cfg.v_max.len();
        if chunk.channels() != channels {
            let e = RtgError::InvalidInput(format!("chunk has {} channels, engine {channels}", chunk.channels()));
            return Err(self.reject(chunk.t_obs, now - chunk.t_obs, IngestOutcome::Invalid, e));
        }
        let w = self.plan(chunk.t_obs, chunk.duration(), chunk.dt, chunk.frames.len(), now)?;
        let times = w.knot_times();
        let new = interpolate_frames(&chunk.frames, chunk.t_obs, chunk.dt, &times, channels);
        let mut sv = vec![0.0; channels];
        let mut sr = vec![0.0; channels];
        let mut old = vec![Vec::new(); channels];
        if w.splice {
            self.current.sample_channels(w.t_s, &mut sv, &mut sr)?;
            let mut v = vec![0.0; channels];
            let mut r = vec![0.0; channels];
            for &t in &times[..w.blend_knots()] {
                self.current.sample_channels(t, &mut v, &mut r)?;
                for ch in 0..channels {
                    old[ch].push(v[ch]);
                }
            }
        }
        let splice = w.splice.then_some((sv.as_slice(), sr.as_slice()));
        match self.solve_window(&w, &new, &old, splice) {
            Ok(s) => Ok(self.finish(&w, None, s, splice, now)),
            Err((outcome, e)) => Err(self.reject(w.t_obs, w.t1, outcome, e)),
        }
    }

    /// The robot state at time `t`, as executed by this engine.
    fn observed_state(&self, t: f64) -> Result<WholeBodyAction, RtgError> {
        match self.current.sample(t) {
            Ok(s) => Ok(s.action),
            Err(_) => self
                .initial_state
                .ok_or_else(|| RtgError::InvalidInput("delta chunk needs an observed state".into())),
        }
    }

    /// Ingests a whole-body chunk at time `now`.
    pub fn ingest_chunk(&mut self, chunk: &ActionChunk, now: f64) -> Result<TelemetryRecord, RtgError> {
        if !self.whole_body {
            return Err(RtgError::InvalidInput("channel engine needs channel chunks".into()));
        }
        let w = self.plan(chunk.t_obs, chunk.duration(), chunk.dt, chunk.frames.len(), now)?;
        match self.blend_actions(chunk, &w) {
            Ok((chart, solved, sv, sr)) => {
                let splice = w.splice.then_some((sv.as_slice(), sr.as_slice()));
                Ok(self.finish(&w, Some(chart), solved, splice, now))
            }
            Err((outcome, e)) => Err(self.reject(w.t_obs, w.t1, outcome, e)),
        }
    }

    #[allow(clippy::type_complexity)]
    fn blend_actions(
        &self,
        chunk: &ActionChunk,
        w: &Window,
    ) -> Result<(Chart, Solved, Vec<f64>, Vec<f64>), (IngestOutcome, RtgError)> {
        let invalid = |e: RtgError| (IngestOutcome::Invalid, e);
        let observed = if chunk.repr.is_delta() {
            self.observed_state(chunk.t_obs).map_err(invalid)?
        } else {
            chunk.frames[0]
        };
        let absolute = chunk
            .to_absolute(&observed, self.anchor)
            .map_err(|e| invalid(e.into()))?;
        for f in &absolute {
            f.validate().map_err(|e| invalid(e.into()))?;
        }
        let times = w.knot_times();
        let first_frame = (((w.t_s - chunk.t_obs) / chunk.dt).floor().max(0.0) as usize).min(absolute.len() - 1);

        // Old trajectory at the splice and on the blended knots.
        let mut splice_state: Option<(WholeBodyAction, Chart, [f64; CHART_CHANNELS], [f64; CHART_CHANNELS])> = None;
        let mut old_actions = Vec::new();
        if w.splice && self.current.is_empty() {
            let held = self
                .initial_state
                .ok_or_else(|| invalid(RtgError::InvalidInput("start hold needs a state".into())))?;
            let c = self.chart.unwrap_or_else(|| Chart::at(&held));
            splice_state = Some((held, c, c.to_channels(&held), [0.0; CHART_CHANNELS]));
            old_actions = vec![held; w.blend_knots()];
        } else if w.splice {
            let mut v = [0.0; CHART_CHANNELS];
            let mut r = [0.0; CHART_CHANNELS];
            let info = self.current.sample_channels(w.t_s, &mut v, &mut r).map_err(invalid)?;
            let seg_chart = self.current.segments[info.segment]
                .chart
                .ok_or_else(|| invalid(RtgError::InvalidInput("segment has no chart".into())))?;
            splice_state = Some((seg_chart.from_channels(&v), seg_chart, v, r));
            for &t in &times[..w.blend_knots()] {
                old_actions.push(self.current.sample(t).map_err(invalid)?.action);
            }
        }

        let window_frames = &absolute[first_frame..];
        let swing_of = |c: &Chart| {
            window_frames
                .iter()
                .chain(old_actions.iter())
                .map(|a| c.rotation_excursion(a))
                .fold(0.0, f64::max)
        };
        let mut chart = self.chart.unwrap_or_else(|| match &splice_state {
            Some((a, ..)) => Chart::at(a),
            None => Chart::at(&self.initial_state.unwrap_or(window_frames[0])),
        });
        if swing_of(&chart) > REANCHOR_ANGLE {
            let (anchor, yaw) = match &splice_state {
                Some((a, _, v, _)) => (*a, v[2]),
                None => (window_frames[0], chart.yaw_ref),
            };
            chart = Chart::at(&anchor);
            chart.yaw_ref = yaw;
            let swing = swing_of(&chart);
            if swing > MAX_WINDOW_SWING {
                return Err((IngestOutcome::WindowTooWide, RtgError::WindowTooWide { swing }));
            }
        }

        // Splice values and rates in the chosen chart.
        let (sv, sr) = match &splice_state {
            Some((a, old_chart, v, r)) => {
                if *old_chart == chart {
                    (v.to_vec(), r.to_vec())
                } else {
                    convert_chart_state(&chart, a, v, r)
                }
            }
            None => (Vec::new(), Vec::new()),
        };
        let yaw_start = if w.splice { sv[2] } else { chart.yaw_ref };

        let mut frames: Vec<Vec<f64>> = absolute.iter().map(|a| chart.to_channels(a).to_vec()).collect();
        wrap_yaw_sequence(frames.iter_mut().map(|f| &mut f[2]), yaw_start);
        let new = interpolate_frames(&frames, chunk.t_obs, chunk.dt, &times, CHART_CHANNELS);

        let mut old = vec![Vec::new(); CHART_CHANNELS];
        if !old_actions.is_empty() {
            let mut rows: Vec<Vec<f64>> = old_actions.iter().map(|a| chart.to_channels(a).to_vec()).collect();
            wrap_yaw_sequence(rows.iter_mut().map(|f| &mut f[2]), yaw_start);
            for row in rows {
                for (ch, v) in row.into_iter().enumerate() {
                    old[ch].push(v);
                }
            }
        }

        let splice = w.splice.then_some((sv.as_slice(), sr.as_slice()));
        let solved = self.solve_window(w, &new, &old, splice)?;
        Ok((chart, solved, sv, sr))
    }
}

/// Moves every control difference from index `start` on into `[−lim, lim]`,
/// shifting the following points so earlier ones stay put.
fn restore_velocity_bound(c: &mut [f64], start: usize, lim: f64) {
    for k in start..c.len() - 1 {
        let d = c[k + 1] - c[k];
        if d > lim {
            c[k + 1] = c[k] + lim;
        } else if d < -lim {
            c[k + 1] = c[k] - lim;
        }
    }
}

/// Re-expresses chart values and rates of state `a` in another chart. Yaw
/// keeps its unwrapped value; rotation rates are mapped through the body
/// angular velocity.
fn convert_chart_state(
    to: &Chart,
    a: &WholeBodyAction,
    v: &[f64; CHART_CHANNELS],
    r: &[f64; CHART_CHANNELS],
) -> (Vec<f64>, Vec<f64>) {
    let mut nv = to.to_channels(a).to_vec();
    nv[2] = v[2];
    let mut nr = r.to_vec();
    for base in [10usize, 17] {
        let w_old = Vector3::new(v[base], v[base + 1], v[base + 2]);
        let w_new = Vector3::new(nv[base], nv[base + 1], nv[base + 2]);
        let wd = Vector3::new(r[base], r[base + 1], r[base + 2]);
        let omega = so3_right_jacobian(&w_old) * wd;
        let jr = so3_right_jacobian(&w_new);
        let wd_new = jr.try_inverse().map_or(omega, |inv| inv * omega);
        nr[base..base + 3].copy_from_slice(wd_new.as_slice());
    }
    (nv, nr)
}
