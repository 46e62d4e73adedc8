//! Simulated execution of chunk-handling strategies on a virtual clock.
//!
//! All four strategies see the same chunk provider and emit commands at the
//! control rate:
//!
//! - `synchronous`: infer, wait, execute a fixed horizon of the chunk, repeat.
//! - `async_naive`: inference runs alongside execution and each new chunk
//!   replaces the previous one the moment it arrives.
//! - `async_history_fusion`: every chunk covering the current time contributes
//!   with exponentially decaying weight, oldest prediction heaviest.
//! - `rtg`: chunks go through the [`RtgEngine`].
//!
//! Event times are integer nanoseconds; metrics are computed from the dense
//! command samples in one fixed chart.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    wrap_yaw_sequence, ActionChunk, ActionError, Chart, RobotFrameAnchor, WholeBodyAction, CHART_CHANNELS,
};
use crate::policy::{ChunkProvider, PolicyError};
use crate::qp::QpProblem;
use crate::pose::{slerp, so3_exp, so3_log, wrap_angle};
use crate::rtg::{
    nanos_to_secs, secs_to_nanos, Clock, RtgConfig, RtgEngine, RtgError, TelemetryRecord, Trajectory, VirtualClock,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Synchronous,
    AsyncNaive,
    AsyncHistoryFusion,
    Rtg,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Synchronous,
        StrategyKind::AsyncNaive,
        StrategyKind::AsyncHistoryFusion,
        StrategyKind::Rtg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Synchronous => "synchronous",
            StrategyKind::AsyncNaive => "async_naive",
            StrategyKind::AsyncHistoryFusion => "async_history_fusion",
            StrategyKind::Rtg => "rtg",
        }
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no buffered chunk covers t = {t}")]
    NoAction { t: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rtg(#[from] RtgError),
    #[error(transparent)]
    Action(#[from] ActionError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecConfig {
    /// Length of the simulated run in seconds.
    pub duration: f64,
    pub control_rate: f64,
    /// Shortest interval between two inference requests.
    pub min_inference_period: f64,
    /// Executed part of each chunk in synchronous mode; `None` runs the whole
    /// chunk.
    pub sync_horizon: Option<f64>,
    /// History-fusion decay `m`.
    pub fusion_decay: f64,
    /// Engine settings; `v_max` is also the limit the metrics compare against.
    pub rtg: RtgConfig,
    pub anchor: RobotFrameAnchor,
    /// Keep the blend QPs of the last accepted `rtg` window.
    pub capture_qps: bool,
}

impl ExecConfig {
    pub fn new(duration: f64, rtg: RtgConfig) -> Self {
        ExecConfig {
            duration,
            control_rate: rtg.control_rate,
            min_inference_period: 1.0 / rtg.ingest_rate,
            sync_horizon: None,
            fusion_decay: 0.1,
            rtg,
            anchor: RobotFrameAnchor::default(),
            capture_qps: false,
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        let bad = |m: String| Err(ExecError::InvalidInput(m));
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return bad(format!("duration = {} must be positive", self.duration));
        }
        if !(self.control_rate > 0.0) {
            return bad(format!("control_rate = {} must be positive", self.control_rate));
        }
        if !(self.min_inference_period > 0.0) {
            return bad(format!(
                "min_inference_period = {} must be positive",
                self.min_inference_period
            ));
        }
        if let Some(h) = self.sync_horizon {
            if !(h > 0.0) {
                return bad(format!("sync_horizon = {h} must be positive"));
            }
        }
        if !(self.fusion_decay >= 0.0) {
            return bad(format!("fusion_decay = {} must be non-negative", self.fusion_decay));
        }
        if self.rtg.v_max.len() != CHART_CHANNELS {
            return bad(format!(
                "v_max needs {CHART_CHANNELS} entries, got {}",
                self.rtg.v_max.len()
            ));
        }
        self.rtg.validate()?;
        Ok(())
    }

    fn tick_nanos(&self) -> u64 {
        secs_to_nanos(1.0 / self.control_rate).max(1)
    }
}

/// Interpolates two actions: linear on scalars, shortest arc on yaw, slerp on
/// orientations.
pub fn interpolate_action(a: &WholeBodyAction, b: &WholeBodyAction, s: f64) -> WholeBodyAction {
    let lerp = |x: f64, y: f64| x + s * (y - x);
    let mut out = *a;
    out.base.x = lerp(a.base.x, b.base.x);
    out.base.y = lerp(a.base.y, b.base.y);
    out.base.yaw = a.base.yaw + s * wrap_angle(b.base.yaw - a.base.yaw);
    for i in 0..4 {
        out.torso[i] = lerp(a.torso[i], b.torso[i]);
    }
    for i in 0..2 {
        out.head[i] = lerp(a.head[i], b.head[i]);
    }
    out.ee_left.p = a.ee_left.p + s * (b.ee_left.p - a.ee_left.p);
    out.ee_right.p = a.ee_right.p + s * (b.ee_right.p - a.ee_right.p);
    out.ee_left.r = slerp(&a.ee_left.r, &b.ee_left.r, s);
    out.ee_right.r = slerp(&a.ee_right.r, &b.ee_right.r, s);
    out.grip_left = lerp(a.grip_left, b.grip_left);
    out.grip_right = lerp(a.grip_right, b.grip_right);
    out
}

/// A chunk decoded to absolute frames at `t_obs + i·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct BufferedChunk {
    pub t_obs: f64,
    pub dt: f64,
    pub frames: Vec<WholeBodyAction>,
}

impl BufferedChunk {
    pub fn new(t_obs: f64, dt: f64, frames: Vec<WholeBodyAction>) -> Result<Self, ExecError> {
        if frames.is_empty() || !(dt > 0.0) {
            return Err(ExecError::InvalidInput("buffered chunk needs frames and dt > 0".into()));
        }
        Ok(BufferedChunk { t_obs, dt, frames })
    }

    /// Decodes `chunk` with `observed` as the state at its observation time.
    pub fn decode(chunk: &ActionChunk, observed: &WholeBodyAction, anchor: RobotFrameAnchor) -> Result<Self, ExecError> {
        Self::new(chunk.t_obs, chunk.dt, chunk.to_absolute(observed, anchor)?)
    }

    pub fn t_end(&self) -> f64 {
        self.t_obs + (self.frames.len() - 1) as f64 * self.dt
    }

    pub fn covers(&self, t: f64) -> bool {
        t >= self.t_obs - 1e-12 && t <= self.t_end() + 1e-12
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.frames.len() - 1;
        let u = ((t - self.t_obs) / self.dt).clamp(0.0, last as f64);
        let r = u.round();
        if (u - r).abs() < 1e-9 {
            return (r as usize, 0.0);
        }
        let i = (u.floor() as usize).min(last.saturating_sub(1));
        (i, u - i as f64)
    }

    /// Interpolated action at `t`, holding the end frames outside the chunk.
    pub fn action_at(&self, t: f64) -> WholeBodyAction {
        let (i, s) = self.locate(t);
        if s == 0.0 {
            self.frames[i]
        } else {
            interpolate_action(&self.frames[i], &self.frames[i + 1], s)
        }
    }

    /// Chart-coordinate slope of the frame interval containing `t`; zero
    /// outside the chunk.
    fn rates_at(&self, chart: &Chart, t: f64) -> [f64; CHART_CHANNELS] {
        let mut r = [0.0; CHART_CHANNELS];
        if self.frames.len() < 2 || t < self.t_obs || t >= self.t_end() {
            return r;
        }
        let (i, _) = self.locate(t);
        let i = i.min(self.frames.len() - 2);
        let a = chart.to_channels(&self.frames[i]);
        let b = chart.to_channels(&self.frames[i + 1]);
        for ch in 0..CHART_CHANNELS {
            let d = if ch == 2 { wrap_angle(b[ch] - a[ch]) } else { b[ch] - a[ch] };
            r[ch] = d / self.dt;
        }
        r
    }
}

fn fusion_weights(n: usize, m: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|i| (-m * i as f64).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Weighted average of the predictions for time `t` of every chunk in
/// `buffer` (oldest first) that covers `t`. Weights are `exp(−m·i)` with
/// `i = 0` for the oldest covering chunk, normalized to sum to one.
/// Orientations are averaged in the tangent space of the newest prediction.
pub fn history_fusion_action(buffer: &[BufferedChunk], t: f64, m: f64) -> Result<WholeBodyAction, ExecError> {
    let preds: Vec<WholeBodyAction> = buffer.iter().filter(|c| c.covers(t)).map(|c| c.action_at(t)).collect();
    fuse_predictions(&preds, m).ok_or(ExecError::NoAction { t })
}

fn fuse_predictions(preds: &[WholeBodyAction], m: f64) -> Option<WholeBodyAction> {
    let newest = *preds.last()?;
    if preds.len() == 1 {
        return Some(newest);
    }
    let w = fusion_weights(preds.len(), m);
    let mut out = newest;
    let avg = |f: &dyn Fn(&WholeBodyAction) -> f64| preds.iter().zip(&w).map(|(p, wi)| wi * f(p)).sum::<f64>();
    out.base.x = avg(&|p| p.base.x);
    out.base.y = avg(&|p| p.base.y);
    out.base.yaw = newest.base.yaw + avg(&|p| wrap_angle(p.base.yaw - newest.base.yaw));
    for i in 0..4 {
        out.torso[i] = avg(&|p| p.torso[i]);
    }
    for i in 0..2 {
        out.head[i] = avg(&|p| p.head[i]);
    }
    out.grip_left = avg(&|p| p.grip_left);
    out.grip_right = avg(&|p| p.grip_right);
    let mut pl = nalgebra::Vector3::zeros();
    let mut pr = nalgebra::Vector3::zeros();
    let mut wl = nalgebra::Vector3::zeros();
    let mut wr = nalgebra::Vector3::zeros();
    let (rl_inv, rr_inv) = (newest.ee_left.r.inverse(), newest.ee_right.r.inverse());
    for (p, wi) in preds.iter().zip(&w) {
        pl += *wi * p.ee_left.p;
        pr += *wi * p.ee_right.p;
        wl += *wi * so3_log(&rl_inv.compose(&p.ee_left.r));
        wr += *wi * so3_log(&rr_inv.compose(&p.ee_right.r));
    }
    out.ee_left.p = pl;
    out.ee_right.p = pr;
    out.ee_left.r = newest.ee_left.r.compose(&so3_exp(&wl));
    out.ee_right.r = newest.ee_right.r.compose(&so3_exp(&wr));
    Some(out)
}

/// One inference cycle of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChunkEvent {
    pub t_obs: f64,
    pub t1: f64,
    /// When the chunk became available.
    pub ready: f64,
    /// When execution of the chunk began; differs from `ready` only in
    /// synchronous mode.
    pub exec_start: f64,
    /// Whether the strategy used the chunk.
    pub accepted: bool,
}

/// Jump of the commanded trajectory at a chunk transition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundaryJump {
    pub t: f64,
    /// Largest per-channel position jump, chart coordinates.
    pub position: f64,
    /// Largest per-channel velocity jump.
    pub velocity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub strategy: StrategyKind,
    /// Time of the last command sample.
    pub end_time: f64,
    pub samples: usize,
    pub chunks: usize,
    /// Largest finite-difference speed per chart channel.
    pub max_velocity: Vec<f64>,
    /// Largest `max_velocity[ch] / v_max[ch]`.
    pub max_velocity_ratio: f64,
    /// Sample intervals on which some channel exceeds its limit by more than
    /// 1e-9.
    pub velocity_violations: usize,
    pub total_pause_time: f64,
    pub pause_count: usize,
    pub boundary_count: usize,
    pub boundary_position_mean: f64,
    pub boundary_position_max: f64,
    pub boundary_velocity_mean: f64,
    pub boundary_velocity_max: f64,
    /// RMS chart-coordinate deviation from the newest usable chunk over its
    /// valid window.
    pub tracking_rms: f64,
    pub latency_mean: f64,
    pub latency_min: f64,
    pub latency_max: f64,
    pub rejected_chunks: usize,
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub strategy: StrategyKind,
    pub chart: Chart,
    /// Commands at the control rate.
    pub samples: Vec<(f64, WholeBodyAction)>,
    /// The same commands in chart coordinates, yaw unwrapped.
    pub channels: Vec<[f64; CHART_CHANNELS]>,
    pub events: Vec<ChunkEvent>,
    pub chunks: Vec<BufferedChunk>,
    pub jumps: Vec<BoundaryJump>,
    pub metrics: RunMetrics,
    pub telemetry: Vec<TelemetryRecord>,
    /// Per-channel QPs of the last accepted blend window, when captured.
    pub qp_problems: Vec<QpProblem>,
}

struct Command {
    action: WholeBodyAction,
    values: [f64; CHART_CHANNELS],
    rates: [f64; CHART_CHANNELS],
    hold: bool,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-strategy state of the asynchronous simulations.
trait Player {
    /// Takes a chunk at `now`; returns whether it was used and the boundary
    /// jump it caused, if any.
    fn ingest(&mut self, chunk: &ActionChunk, decoded: &BufferedChunk, now: f64) -> Result<(bool, Option<BoundaryJump>), ExecError>;
    /// Command at `t`, without side effects.
    fn peek(&self, t: f64) -> Command;
    /// Command at control tick `t`; may retire chunks and report the jump.
    fn command(&mut self, t: f64) -> (Command, Option<BoundaryJump>) {
        (self.peek(t), None)
    }
    fn telemetry(&self) -> Vec<TelemetryRecord> {
        Vec::new()
    }

    fn captured_qps(&self) -> Vec<QpProblem> {
        Vec::new()
    }
}

fn hold_command(chart: &Chart, a: &WholeBodyAction) -> Command {
    Command {
        action: *a,
        values: chart.to_channels(a),
        rates: [0.0; CHART_CHANNELS],
        hold: true,
    }
}

fn chunk_command(chart: &Chart, c: &BufferedChunk, t: f64) -> Command {
    let action = c.action_at(t);
    Command {
        action,
        values: chart.to_channels(&action),
        rates: c.rates_at(chart, t),
        hold: false,
    }
}

fn jump_between(t: f64, a: &Command, b: &Command) -> BoundaryJump {
    let va = a.values;
    let mut vb = b.values;
    vb[2] = va[2] + wrap_angle(vb[2] - va[2]);
    BoundaryJump {
        t,
        position: max_abs_diff(&va, &vb),
        velocity: max_abs_diff(&a.rates, &b.rates),
    }
}

struct NaivePlayer {
    chart: Chart,
    initial: WholeBodyAction,
    active: Option<BufferedChunk>,
}

impl Player for NaivePlayer {
    fn ingest(&mut self, _: &ActionChunk, decoded: &BufferedChunk, now: f64) -> Result<(bool, Option<BoundaryJump>), ExecError> {
        let jump = self.active.is_some().then(|| {
            let before = self.peek(now);
            let after = chunk_command(&self.chart, decoded, now);
            jump_between(now, &before, &after)
        });
        self.active = Some(decoded.clone());
        Ok((true, jump))
    }

    fn peek(&self, t: f64) -> Command {
        match &self.active {
            Some(c) if t <= c.t_end() + 1e-12 => chunk_command(&self.chart, c, t),
            Some(c) => hold_command(&self.chart, &c.action_at(t)),
            None => hold_command(&self.chart, &self.initial),
        }
    }
}

struct FusionPlayer {
    chart: Chart,
    initial: WholeBodyAction,
    decay: f64,
    buffer: Vec<BufferedChunk>,
    last: WholeBodyAction,
    started: bool,
}

impl FusionPlayer {
    fn fused(&self, chunks: &[&BufferedChunk], t: f64) -> Option<Command> {
        let covering: Vec<&BufferedChunk> = chunks.iter().copied().filter(|c| c.covers(t)).collect();
        let preds: Vec<WholeBodyAction> = covering.iter().map(|c| c.action_at(t)).collect();
        let action = fuse_predictions(&preds, self.decay)?;
        let w = fusion_weights(covering.len(), self.decay);
        let mut rates = [0.0; CHART_CHANNELS];
        for (c, wi) in covering.iter().zip(&w) {
            let r = c.rates_at(&self.chart, t);
            for ch in 0..CHART_CHANNELS {
                rates[ch] += wi * r[ch];
            }
        }
        Some(Command {
            action,
            values: self.chart.to_channels(&action),
            rates,
            hold: false,
        })
    }
}

impl Player for FusionPlayer {
    fn ingest(&mut self, _: &ActionChunk, decoded: &BufferedChunk, now: f64) -> Result<(bool, Option<BoundaryJump>), ExecError> {
        let before: Vec<&BufferedChunk> = self.buffer.iter().filter(|c| c.covers(now)).collect();
        let jump = if before.is_empty() {
            None
        } else {
            let mut after = before.clone();
            after.push(decoded);
            match (self.fused(&before, now), self.fused(&after, now)) {
                (Some(a), Some(b)) => Some(jump_between(now, &a, &b)),
                _ => None,
            }
        };
        self.buffer.push(decoded.clone());
        self.started = true;
        Ok((true, jump))
    }

    fn peek(&self, t: f64) -> Command {
        let all: Vec<&BufferedChunk> = self.buffer.iter().collect();
        match self.fused(&all, t) {
            Some(c) => c,
            None if self.started => hold_command(&self.chart, &self.last),
            None => hold_command(&self.chart, &self.initial),
        }
    }

    fn command(&mut self, t: f64) -> (Command, Option<BoundaryJump>) {
        let expired: Vec<usize> = (0..self.buffer.len()).filter(|&i| self.buffer[i].t_end() < t - 1e-12).collect();
        let mut jump = None;
        if !expired.is_empty() {
            let live: Vec<&BufferedChunk> = self.buffer.iter().filter(|c| c.t_end() >= t - 1e-12).collect();
            if !live.is_empty() {
                // Retired chunks still hold their last frame at `t`.
                let all: Vec<&BufferedChunk> = self.buffer.iter().collect();
                let mut held = Vec::new();
                for c in &all {
                    if c.t_end() < t - 1e-12 {
                        let last = *c.frames.last().expect("non-empty");
                        held.push(BufferedChunk {
                            t_obs: t,
                            dt: c.dt,
                            frames: vec![last],
                        });
                    }
                }
                let mut before: Vec<&BufferedChunk> = held.iter().collect();
                before.extend(live.iter().copied());
                if let (Some(a), Some(b)) = (self.fused(&before, t), self.fused(&live, t)) {
                    jump = Some(jump_between(t, &a, &b));
                }
            }
            self.buffer.retain(|c| c.t_end() >= t - 1e-12);
        }
        let cmd = self.peek(t);
        self.last = cmd.action;
        (cmd, jump)
    }
}

struct RtgPlayer {
    chart: Chart,
    initial: WholeBodyAction,
    engine: RtgEngine,
    t2: f64,
}

impl RtgPlayer {
    fn sample_from(&self, traj: &Trajectory, t: f64) -> Command {
        let mut v = [0.0; CHART_CHANNELS];
        let mut r = [0.0; CHART_CHANNELS];
        match traj.sample_channels(t, &mut v, &mut r) {
            Ok(info) => {
                let seg_chart = traj.segments()[info.segment].chart.unwrap_or(self.chart);
                let action = seg_chart.from_channels(&v);
                if seg_chart == self.chart {
                    Command {
                        action,
                        values: v,
                        rates: r,
                        hold: info.exhausted,
                    }
                } else {
                    Command {
                        action,
                        values: self.chart.to_channels(&action),
                        rates: r,
                        hold: info.exhausted,
                    }
                }
            }
            // Waiting for the first segment is not a pause.
            Err(_) => Command {
                hold: false,
                ..hold_command(&self.chart, &self.initial)
            },
        }
    }
}

impl Player for RtgPlayer {
    fn ingest(&mut self, chunk: &ActionChunk, _: &BufferedChunk, now: f64) -> Result<(bool, Option<BoundaryJump>), ExecError> {
        let old = std::sync::Arc::clone(self.engine.trajectory());
        match self.engine.ingest_chunk(chunk, now) {
            Ok(rec) => {
                let jump = (!old.is_empty()).then(|| {
                    let t_s = now + self.t2;
                    let a = self.sample_from(&old, t_s);
                    let b = self.sample_from(self.engine.trajectory(), t_s);
                    let mut j = jump_between(t_s, &a, &b);
                    let old_seg = old.segment_index(t_s).and_then(|i| old.segments()[i].chart);
                    let new_traj = self.engine.trajectory();
                    let new_seg = new_traj.segment_index(t_s).and_then(|i| new_traj.segments()[i].chart);
                    if old_seg != new_seg {
                        j.velocity = rec.splice_velocity_jump;
                    }
                    j
                });
                Ok((true, jump))
            }
            Err(RtgError::Stale { .. } | RtgError::InfeasibleBlend { .. } | RtgError::WindowTooWide { .. }) => {
                Ok((false, None))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn peek(&self, t: f64) -> Command {
        self.sample_from(self.engine.trajectory(), t)
    }

    fn telemetry(&self) -> Vec<TelemetryRecord> {
        self.engine.telemetry().to_vec()
    }

    fn captured_qps(&self) -> Vec<QpProblem> {
        self.engine.captured_qps().to_vec()
    }
}

/// Runs `strategy` against `source` for `cfg.duration` seconds, starting from
/// `initial`.
pub fn run(
    strategy: StrategyKind,
    source: &dyn ChunkProvider,
    cfg: &ExecConfig,
    initial: &WholeBodyAction,
) -> Result<RunResult, ExecError> {
    cfg.validate()?;
    initial.validate()?;
    match strategy {
        StrategyKind::Synchronous => run_synchronous(source, cfg, initial),
        StrategyKind::AsyncNaive => {
            let chart = Chart::at(initial);
            let p = NaivePlayer {
                chart,
                initial: *initial,
                active: None,
            };
            run_async(strategy, p, source, cfg, initial)
        }
        StrategyKind::AsyncHistoryFusion => {
            let chart = Chart::at(initial);
            let p = FusionPlayer {
                chart,
                initial: *initial,
                decay: cfg.fusion_decay,
                buffer: Vec::new(),
                last: *initial,
                started: false,
            };
            run_async(strategy, p, source, cfg, initial)
        }
        StrategyKind::Rtg => {
            let chart = Chart::at(initial);
            let mut engine = RtgEngine::whole_body(cfg.rtg.clone())?
                .with_chart(chart)
                .with_start_hold(*initial)
                .with_anchor(cfg.anchor);
            engine.set_qp_capture(cfg.capture_qps);
            let p = RtgPlayer {
                chart,
                initial: *initial,
                engine,
                t2: cfg.rtg.t2_budget,
            };
            let mut res = run_async(strategy, p, source, cfg, initial)?;
            res.metrics.rejected_chunks = res.events.iter().filter(|e| !e.accepted).count();
            Ok(res)
        }
    }
}

struct Recorder {
    chart: Chart,
    samples: Vec<(f64, WholeBodyAction)>,
    channels: Vec<[f64; CHART_CHANNELS]>,
    holds: Vec<bool>,
    tracking: Vec<f64>,
    jumps: Vec<BoundaryJump>,
}

impl Recorder {
    fn new(chart: Chart) -> Self {
        Recorder {
            chart,
            samples: Vec::new(),
            channels: Vec::new(),
            holds: Vec::new(),
            tracking: Vec::new(),
            jumps: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, cmd: &Command, target: Option<WholeBodyAction>) {
        let mut v = cmd.values;
        let prev_yaw = self.channels.last().map_or(self.chart.yaw_ref, |p| p[2]);
        wrap_yaw_sequence(std::iter::once(&mut v[2]), prev_yaw);
        if let Some(target) = target {
            let mut tv = self.chart.to_channels(&target);
            wrap_yaw_sequence(std::iter::once(&mut tv[2]), v[2]);
            let s: f64 = v.iter().zip(&tv).map(|(a, b)| (a - b) * (a - b)).sum();
            self.tracking.push(s / CHART_CHANNELS as f64);
        }
        self.samples.push((t, cmd.action));
        self.channels.push(v);
        self.holds.push(cmd.hold);
    }
}

fn run_async<P: Player>(
    strategy: StrategyKind,
    mut player: P,
    source: &dyn ChunkProvider,
    cfg: &ExecConfig,
    initial: &WholeBodyAction,
) -> Result<RunResult, ExecError> {
    let tick = cfg.tick_nanos();
    let mut end = secs_to_nanos(cfg.duration);
    let min_period = secs_to_nanos(cfg.min_inference_period).max(1);
    let clock = VirtualClock::new();
    let chart = Chart::at(initial);
    let mut rec = Recorder::new(chart);
    let mut events = Vec::new();
    let mut chunks = Vec::new();
    let mut truncated = false;
    let mut latest: Option<(f64, BufferedChunk)> = None;

    // (t_obs, ready, chunk, t1) of the inference in flight.
    let request = |t_obs: u64, observed: &WholeBodyAction| -> Result<Option<(u64, u64, ActionChunk, f64, BufferedChunk)>, ExecError> {
        match source.next_chunk(nanos_to_secs(t_obs)) {
            Ok((chunk, t1)) => {
                let decoded = BufferedChunk::decode(&chunk, observed, cfg.anchor)?;
                Ok(Some((t_obs, t_obs + secs_to_nanos(t1), chunk, t1, decoded)))
            }
            Err(PolicyError::Exhausted { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    };
    let mut pending = request(0, initial)?;
    if pending.is_none() {
        truncated = true;
        end = 0;
    }

    let mut n: u64 = 0;
    loop {
        let t_ns = n * tick;
        if t_ns > end {
            break;
        }
        while let Some((t_obs, ready, _, _, _)) = &pending {
            if *ready > t_ns {
                break;
            }
            let (t_obs, ready) = (*t_obs, *ready);
            let (_, _, chunk, t1, decoded) = pending.take().expect("pending chunk");
            clock.set_nanos(ready);
            let now = clock.now();
            let (accepted, jump) = player.ingest(&chunk, &decoded, now)?;
            rec.jumps.extend(jump);
            events.push(ChunkEvent {
                t_obs: chunk.t_obs,
                t1,
                ready: now,
                exec_start: now,
                accepted,
            });
            if accepted {
                latest = Some((now, decoded.clone()));
            }
            chunks.push(decoded);
            let next = ready.max(t_obs + min_period);
            if next <= end {
                let observed = player.peek(nanos_to_secs(next)).action;
                pending = request(next, &observed)?;
                if pending.is_none() {
                    truncated = true;
                    end = next;
                }
            }
        }
        if t_ns > end {
            break;
        }
        clock.set_nanos(t_ns);
        let t = clock.now();
        let (cmd, jump) = player.command(t);
        rec.jumps.extend(jump);
        let target = latest
            .as_ref()
            .filter(|(ready, c)| t >= *ready && t <= c.t_end())
            .map(|(_, c)| c.action_at(t));
        rec.push(t, &cmd, target);
        n += 1;
    }

    // Pauses: maximal runs of held commands after the first chunk arrived.
    let first_ready = events.first().map_or(f64::INFINITY, |e| e.ready);
    let (mut pause_count, mut pause_ticks) = (0usize, 0usize);
    let mut in_pause = false;
    for ((t, _), hold) in rec.samples.iter().zip(&rec.holds) {
        let paused = *hold && *t >= first_ready;
        if paused {
            pause_ticks += 1;
            if !in_pause {
                pause_count += 1;
            }
        }
        in_pause = paused;
    }
    let total_pause = pause_ticks as f64 * nanos_to_secs(tick);
    let telemetry = player.telemetry();
    let mut res = finish_run(strategy, cfg, rec, events, chunks, total_pause, pause_count, truncated, telemetry);
    res.qp_problems = player.captured_qps();
    Ok(res)
}

fn run_synchronous(source: &dyn ChunkProvider, cfg: &ExecConfig, initial: &WholeBodyAction) -> Result<RunResult, ExecError> {
    let tick = cfg.tick_nanos();
    let end = secs_to_nanos(cfg.duration);
    let chart = Chart::at(initial);
    let mut rec = Recorder::new(chart);
    let mut events = Vec::new();
    let mut chunks: Vec<BufferedChunk> = Vec::new();
    let mut truncated = false;
    let mut total_pause = 0.0;

    // Execution plan: (exec_start, exec_end, chunk index), in nanoseconds.
    let mut plan: Vec<(u64, u64, usize)> = Vec::new();
    let mut held = *initial;
    let mut t_obs: u64 = 0;
    while t_obs < end || plan.is_empty() {
        let (chunk, t1) = match source.next_chunk(nanos_to_secs(t_obs)) {
            Ok(c) => c,
            Err(PolicyError::Exhausted { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let decoded = BufferedChunk::decode(&chunk, &held, cfg.anchor)?;
        let start = t_obs + secs_to_nanos(t1);
        let horizon = cfg.sync_horizon.unwrap_or(decoded.t_end() - decoded.t_obs).min(decoded.t_end() - decoded.t_obs);
        let stop = start + secs_to_nanos(horizon);
        if !plan.is_empty() {
            total_pause += nanos_to_secs(start - t_obs);
        }
        events.push(ChunkEvent {
            t_obs: nanos_to_secs(t_obs),
            t1,
            ready: nanos_to_secs(start),
            exec_start: nanos_to_secs(start),
            accepted: true,
        });
        held = decoded.action_at(decoded.t_obs + horizon);
        plan.push((start, stop, chunks.len()));
        chunks.push(decoded);
        if stop == t_obs {
            break;
        }
        t_obs = stop;
    }
    let run_end = if truncated { t_obs } else { plan.last().map_or(0, |p| p.1) };

    let local = |c: &BufferedChunk, start: u64, t_ns: u64| c.t_obs + nanos_to_secs(t_ns - start);
    for w in plan.windows(2) {
        let (prev, next) = (&chunks[w[0].2], &chunks[w[1].2]);
        let before = hold_command(&chart, &prev.action_at(local(prev, w[0].0, w[0].1)));
        let after = chunk_command(&chart, next, next.t_obs);
        rec.jumps.push(jump_between(nanos_to_secs(w[1].0), &before, &after));
    }

    let mut n: u64 = 0;
    loop {
        let t_ns = n * tick;
        if t_ns > run_end {
            break;
        }
        let t = nanos_to_secs(t_ns);
        let phase = plan.partition_point(|p| p.0 <= t_ns);
        let (cmd, target) = match phase.checked_sub(1).map(|i| plan[i]) {
            None => (hold_command(&chart, initial), None),
            Some((start, stop, idx)) => {
                let c = &chunks[idx];
                if t_ns <= stop {
                    let mut cmd = chunk_command(&chart, c, local(c, start, t_ns));
                    if t_ns == stop {
                        cmd.rates = [0.0; CHART_CHANNELS];
                    }
                    let target = cmd.action;
                    (cmd, Some(target))
                } else {
                    (hold_command(&chart, &c.action_at(local(c, start, stop))), None)
                }
            }
        };
        rec.push(t, &cmd, target);
        n += 1;
    }
    let pause_count = plan.len().saturating_sub(1);
    Ok(finish_run(
        StrategyKind::Synchronous,
        cfg,
        rec,
        events,
        chunks,
        total_pause,
        pause_count,
        truncated,
        Vec::new(),
    ))
}

/// Closed-loop chunk concatenation at the chunk rate: each chunk is observed
/// at the last executed frame and its first `horizon` steps are executed.
/// Returns the executed frames and the index of the first frame of every
/// chunk after the first.
pub fn concatenate_chunks(
    source: &dyn ChunkProvider,
    anchor: RobotFrameAnchor,
    initial: &WholeBodyAction,
    horizon: usize,
    chunks: usize,
) -> Result<(Vec<WholeBodyAction>, Vec<usize>), ExecError> {
    if horizon == 0 || chunks == 0 {
        return Err(ExecError::InvalidInput("horizon and chunk count must be positive".into()));
    }
    let mut frames = vec![*initial];
    let mut boundaries = Vec::with_capacity(chunks - 1);
    let mut t_obs = 0.0;
    for k in 0..chunks {
        let (chunk, _) = source.next_chunk(t_obs)?;
        if chunk.frames.len() <= horizon {
            return Err(ExecError::InvalidInput(format!(
                "horizon {horizon} needs chunks longer than {} frames",
                chunk.frames.len()
            )));
        }
        let observed = *frames.last().expect("non-empty");
        let decoded = chunk.to_absolute(&observed, anchor)?;
        if k == 0 {
            frames[0] = decoded[0];
        } else {
            boundaries.push(frames.len());
        }
        frames.extend_from_slice(&decoded[1..=horizon]);
        t_obs += horizon as f64 * chunk.dt;
    }
    Ok((frames, boundaries))
}

#[allow(clippy::too_many_arguments)]
fn finish_run(
    strategy: StrategyKind,
    cfg: &ExecConfig,
    rec: Recorder,
    events: Vec<ChunkEvent>,
    chunks: Vec<BufferedChunk>,
    total_pause_time: f64,
    pause_count: usize,
    truncated: bool,
    telemetry: Vec<TelemetryRecord>,
) -> RunResult {
    let dt = 1.0 / cfg.control_rate;
    let mut max_velocity = vec![0.0f64; CHART_CHANNELS];
    let mut violations = 0;
    for w in rec.channels.windows(2) {
        let dt_s = dt;
        let mut bad = false;
        for ch in 0..CHART_CHANNELS {
            let v = (w[1][ch] - w[0][ch]).abs() / dt_s;
            max_velocity[ch] = max_velocity[ch].max(v);
            if v > cfg.rtg.v_max[ch] + 1e-9 {
                bad = true;
            }
        }
        violations += bad as usize;
    }
    let ratio = max_velocity
        .iter()
        .zip(&cfg.rtg.v_max)
        .map(|(v, l)| v / l)
        .fold(0.0, f64::max);
    let nj = rec.jumps.len();
    let mean = |f: fn(&BoundaryJump) -> f64| {
        if nj == 0 {
            0.0
        } else {
            rec.jumps.iter().map(f).sum::<f64>() / nj as f64
        }
    };
    let maxj = |f: fn(&BoundaryJump) -> f64| rec.jumps.iter().map(f).fold(0.0, f64::max);
    let lat: Vec<f64> = events.iter().map(|e| e.t1).collect();
    let tracking_rms = if rec.tracking.is_empty() {
        0.0
    } else {
        (rec.tracking.iter().sum::<f64>() / rec.tracking.len() as f64).sqrt()
    };
    let metrics = RunMetrics {
        strategy,
        end_time: rec.samples.last().map_or(0.0, |s| s.0),
        samples: rec.samples.len(),
        chunks: events.len(),
        max_velocity,
        max_velocity_ratio: ratio,
        velocity_violations: violations,
        total_pause_time,
        pause_count,
        boundary_count: nj,
        boundary_position_mean: mean(|j| j.position),
        boundary_position_max: maxj(|j| j.position),
        boundary_velocity_mean: mean(|j| j.velocity),
        boundary_velocity_max: maxj(|j| j.velocity),
        tracking_rms,
        latency_mean: if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 },
        latency_min: if lat.is_empty() { 0.0 } else { lat.iter().copied().fold(f64::INFINITY, f64::min) },
        latency_max: lat.iter().copied().fold(0.0, f64::max),
        rejected_chunks: 0,
        truncated,
    };
    RunResult {
        strategy,
        chart: rec.chart,
        samples: rec.samples,
        channels: rec.channels,
        events,
        chunks,
        jumps: rec.jumps,
        metrics,
        telemetry,
        qp_problems: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{ChannelGroup, PlanarPose, ReprTag};
    use crate::pose::Pose;

    fn still() -> WholeBodyAction {
        WholeBodyAction {
            base: PlanarPose::default(),
            torso: [0.0; 4],
            ee_left: Pose::from_translation(0.6, 0.2, 1.0),
            ee_right: Pose::from_translation(0.6, -0.2, 1.0),
            grip_left: 0.0,
            grip_right: 0.0,
            head: [0.0; 2],
        }
    }

    fn with_torso(v: f64) -> WholeBodyAction {
        let mut a = still();
        a.torso[0] = v;
        a
    }

    fn chunk_const(t_obs: f64, v: f64) -> BufferedChunk {
        BufferedChunk::new(t_obs, 0.1, vec![with_torso(v); 11]).unwrap()
    }

    #[test]
    fn fusion_weights_follow_the_examples() {
        let one = [chunk_const(0.0, 0.3)];
        assert_eq!(history_fusion_action(&one, 0.5, 0.1).unwrap(), with_torso(0.3));
        let two = [chunk_const(0.0, 0.0), chunk_const(0.2, 1.0)];
        let even = history_fusion_action(&two, 0.5, 0.0).unwrap();
        assert!((even.torso[0] - 0.5).abs() < 1e-15);
        let decayed = history_fusion_action(&two, 0.5, std::f64::consts::LN_2).unwrap();
        assert!((decayed.torso[0] - 1.0 / 3.0).abs() < 1e-15);
        // Only covering chunks count.
        assert!((history_fusion_action(&two, 0.1, 0.0).unwrap().torso[0]).abs() < 1e-15);
        assert!(matches!(history_fusion_action(&two, 5.0, 0.1), Err(ExecError::NoAction { .. })));
    }

    #[test]
    fn fusion_averages_orientations_about_the_newest() {
        let mut a = still();
        let mut b = still();
        a.ee_left.r = crate::pose::Rotation::rot_z(0.2);
        b.ee_left.r = crate::pose::Rotation::rot_z(0.6);
        let buf = [
            BufferedChunk::new(0.0, 0.1, vec![a; 3]).unwrap(),
            BufferedChunk::new(0.0, 0.1, vec![b; 3]).unwrap(),
        ];
        let f = history_fusion_action(&buf, 0.1, 0.0).unwrap();
        assert!(crate::pose::geodesic_angle(&f.ee_left.r, &crate::pose::Rotation::rot_z(0.4)) < 1e-12);
    }

    /// Constant chunks whose level alternates between 0 and `amp`.
    struct Alternating {
        amp: f64,
        t1: f64,
        period: f64,
    }

    impl ChunkProvider for Alternating {
        fn next_chunk(&self, t_obs: f64) -> Result<(ActionChunk, f64), PolicyError> {
            let k = (t_obs / self.period).round() as u64;
            let v = if k % 2 == 0 { 0.0 } else { self.amp };
            let frames = vec![with_torso(v); 32];
            Ok((ActionChunk::new(t_obs, 0.1, frames, ReprTag::AbsoluteWorld)?, self.t1))
        }
    }

    fn cfg(duration: f64) -> ExecConfig {
        let v_max = (0..CHART_CHANNELS)
            .map(|c| match crate::action::chart_channel_group(c) {
                ChannelGroup::Gripper => 1.0,
                _ => 0.5,
            })
            .collect();
        let mut rtg = RtgConfig::new(v_max);
        rtg.w_acc = 1e-4;
        ExecConfig::new(duration, rtg)
    }

    #[test]
    fn synchronous_pauses_match_the_event_schedule() {
        let src = Alternating {
            amp: 0.0,
            t1: 0.15,
            period: 1.0,
        };
        let mut c = cfg(3.0);
        c.sync_horizon = Some(0.5);
        let r = run(StrategyKind::Synchronous, &src, &c, &still()).unwrap();
        let m = &r.metrics;
        // Cycles of 0.15 s inference + 0.5 s execution starting at 0.
        let cycles = (3.0f64 / 0.65).ceil() as usize;
        assert_eq!(m.chunks, cycles);
        assert_eq!(m.pause_count, cycles - 1);
        assert!((m.total_pause_time - 0.15 * (cycles - 1) as f64).abs() < 1e-9);
    }

    #[test]
    fn naive_switching_jumps_and_rtg_does_not() {
        let src = Alternating {
            amp: 0.2,
            t1: 0.1,
            period: 0.1,
        };
        let c = cfg(2.0);
        let naive = run(StrategyKind::AsyncNaive, &src, &c, &still()).unwrap();
        assert!(naive.metrics.boundary_position_max >= 0.2 - 1e-9);
        assert!(naive.metrics.max_velocity[3] > 0.5);
        let rtg = run(StrategyKind::Rtg, &src, &c, &still()).unwrap();
        assert!(rtg.metrics.max_velocity_ratio <= 1.0 + 1e-9, "{}", rtg.metrics.max_velocity_ratio);
        assert!(rtg.metrics.boundary_position_max <= 1e-6);
        assert!(rtg.metrics.boundary_count >= 10);
        assert_eq!(rtg.metrics.total_pause_time, 0.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let src = Alternating {
            amp: 0.1,
            t1: 0.13,
            period: 0.13,
        };
        let c = cfg(1.0);
        for s in StrategyKind::ALL {
            let a = run(s, &src, &c, &still()).unwrap();
            let b = run(s, &src, &c, &still()).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.samples, b.samples);
        }
    }

    #[test]
    fn concatenation_marks_boundaries() {
        let src = Alternating {
            amp: 0.2,
            t1: 0.0,
            period: 0.8,
        };
        let (frames, b) = concatenate_chunks(&src, RobotFrameAnchor::default(), &still(), 8, 3).unwrap();
        assert_eq!(frames.len(), 25);
        assert_eq!(b, vec![9, 17]);
        assert_eq!(frames[9].torso[0], 0.2);
        assert_eq!(frames[8].torso[0], 0.0);
    }
}
