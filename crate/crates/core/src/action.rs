//! Whole-body actions, action chunks, and the three trajectory representations
//! (absolute world, robot-frame delta, egocentric delta).
//!
//! Delta conventions:
//! - egocentric: `T[k+1] = T[k] · Δ[k]`, the increment lives in the current
//!   end-effector frame;
//! - robot frame: the translation step is rotated into the base frame and the
//!   rotation increment is conjugated by the base rotation,
//!   `Δp = R_bᵀ (p[k+1] − p[k])`, `ΔR = R_bᵀ R[k+1] R[k]ᵀ R_b`.
//!
//! Base and joint channels use plain scalar differences, with yaw wrapped to
//! `(−π, π]`.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::pose::{self, geodesic_angle, so3_exp, so3_log, wrap_angle, Pose, Rotation};

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("trajectory csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for ActionError {
    fn from(e: csv::Error) -> Self {
        ActionError::Csv(e.to_string())
    }
}

/// Planar base pose: meters and radians.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        PlanarPose { x, y, yaw }
    }

    /// The base as a rigid transform on the floor plane.
    pub fn to_pose(&self) -> Pose {
        Pose::new(Vector3::new(self.x, self.y, 0.0), Rotation::rot_z(self.yaw))
    }
}

/// One frame of whole-body commands.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WholeBodyAction {
    pub base: PlanarPose,
    pub torso: [f64; 4],
    pub ee_left: Pose,
    pub ee_right: Pose,
    pub grip_left: f64,
    pub grip_right: f64,
    pub head: [f64; 2],
}

impl Default for WholeBodyAction {
    fn default() -> Self {
        WholeBodyAction {
            base: PlanarPose::default(),
            torso: [0.0; 4],
            ee_left: Pose::identity(),
            ee_right: Pose::identity(),
            grip_left: 0.0,
            grip_right: 0.0,
            head: [0.0; 2],
        }
    }
}

impl WholeBodyAction {
    pub fn validate(&self) -> Result<(), ActionError> {
        let scalars_finite = [self.base.x, self.base.y, self.base.yaw]
            .iter()
            .chain(self.torso.iter())
            .chain(self.head.iter())
            .all(|v| v.is_finite());
        if !scalars_finite {
            return Err(ActionError::InvalidInput("non-finite base or joint value".into()));
        }
        for (name, g) in [("grip_left", self.grip_left), ("grip_right", self.grip_right)] {
            if !(0.0..=1.0).contains(&g) {
                return Err(ActionError::InvalidInput(format!("{name} = {g} outside [0, 1]")));
            }
        }
        for (name, ee) in [("ee_left", &self.ee_left), ("ee_right", &self.ee_right)] {
            if !ee.is_valid() {
                return Err(ActionError::InvalidInput(format!("{name} is not a valid pose")));
            }
        }
        Ok(())
    }
}

/// Which frame the poses of a chunk or trajectory are expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReprTag {
    AbsoluteWorld,
    RobotDelta,
    EgocentricDelta,
}

impl ReprTag {
    pub const ALL: [ReprTag; 3] = [ReprTag::AbsoluteWorld, ReprTag::RobotDelta, ReprTag::EgocentricDelta];

    pub fn name(&self) -> &'static str {
        match self {
            ReprTag::AbsoluteWorld => "absolute_world",
            ReprTag::RobotDelta => "robot_delta",
            ReprTag::EgocentricDelta => "egocentric_delta",
        }
    }

    pub fn is_delta(&self) -> bool {
        !matches!(self, ReprTag::AbsoluteWorld)
    }
}

/// What the robot frame of a robot-frame delta is anchored to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobotFrameAnchor {
    /// The base pose at the start of each step.
    #[default]
    InstantaneousBase,
    /// The base pose at the first frame of the sequence.
    EpisodeStartBase,
}

/// A uniformly sampled sequence of actions. Frame `i` sits at chunk-local time
/// `i · dt`, with local zero at the observation timestamp `t_obs`.
///
/// For delta representations frame 0 is the zero increment (the observed state
/// itself) and frame `i` is the increment from frame `i − 1` to frame `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub t_obs: f64,
    pub dt: f64,
    pub frames: Vec<WholeBodyAction>,
    pub repr: ReprTag,
}

impl ActionChunk {
    pub fn new(t_obs: f64, dt: f64, frames: Vec<WholeBodyAction>, repr: ReprTag) -> Result<Self, ActionError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(ActionError::InvalidInput(format!("chunk dt must be positive, got {dt}")));
        }
        if frames.is_empty() {
            return Err(ActionError::InvalidInput("chunk has no frames".into()));
        }
        if !t_obs.is_finite() {
            return Err(ActionError::InvalidInput("non-finite observation time".into()));
        }
        Ok(ActionChunk {
            t_obs,
            dt,
            frames,
            repr,
        })
    }

    /// Chunk duration `(len − 1) · dt`.
    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 * self.dt
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        self.t_obs + i as f64 * self.dt
    }

    /// Builds a chunk in representation `repr` from absolute frames.
    pub fn encode(
        t_obs: f64,
        dt: f64,
        absolute: &[WholeBodyAction],
        repr: ReprTag,
        anchor: RobotFrameAnchor,
    ) -> Result<Self, ActionError> {
        let frames = encode_frames(absolute, repr, anchor)?;
        ActionChunk::new(t_obs, dt, frames, repr)
    }

    /// Absolute frames of this chunk. `observed` is the robot state at `t_obs`;
    /// it is ignored for absolute chunks.
    pub fn to_absolute(
        &self,
        observed: &WholeBodyAction,
        anchor: RobotFrameAnchor,
    ) -> Result<Vec<WholeBodyAction>, ActionError> {
        decode_frames(observed, &self.frames, self.repr, anchor)
    }
}

/// Egocentric deltas `Δ[k] = T[k]⁻¹ T[k+1]`.
pub fn to_egocentric_delta(traj: &[Pose]) -> Result<Vec<Pose>, ActionError> {
    if traj.len() < 2 {
        return Err(ActionError::InvalidInput(format!(
            "need at least 2 poses for deltas, got {}",
            traj.len()
        )));
    }
    Ok(traj.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect())
}

/// Integrates egocentric deltas from `start`; the result has one more element
/// than `deltas`.
pub fn apply_egocentric_delta(start: &Pose, deltas: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut cur = *start;
    out.push(cur);
    for d in deltas {
        cur = cur.compose(d);
        cur.r = cur.r.renormalized();
        out.push(cur);
    }
    out
}

fn robot_frame(base: &[Pose], k: usize, anchor: RobotFrameAnchor) -> &Rotation {
    match anchor {
        RobotFrameAnchor::InstantaneousBase => &base[k].r,
        RobotFrameAnchor::EpisodeStartBase => &base[0].r,
    }
}

/// Robot-frame deltas of an end-effector trajectory given the base trajectory.
pub fn to_robot_delta(ee: &[Pose], base: &[Pose], anchor: RobotFrameAnchor) -> Result<Vec<Pose>, ActionError> {
    if ee.len() != base.len() {
        return Err(ActionError::InvalidInput(format!(
            "end-effector and base trajectories differ in length ({} vs {})",
            ee.len(),
            base.len()
        )));
    }
    if ee.len() < 2 {
        return Err(ActionError::InvalidInput(format!(
            "need at least 2 poses for deltas, got {}",
            ee.len()
        )));
    }
    Ok((0..ee.len() - 1)
        .map(|k| {
            let rb = robot_frame(base, k, anchor);
            let rbt = rb.inverse();
            let dp = rbt.rotate(&(ee[k + 1].p - ee[k].p));
            let dr = rbt.compose(&ee[k + 1].r).compose(&ee[k].r.inverse()).compose(rb);
            Pose::new(dp, dr)
        })
        .collect())
}

/// Inverse of [`to_robot_delta`]. `base` must cover every step, i.e. have at
/// least `deltas.len()` elements.
pub fn apply_robot_delta(
    start: &Pose,
    deltas: &[Pose],
    base: &[Pose],
    anchor: RobotFrameAnchor,
) -> Result<Vec<Pose>, ActionError> {
    if base.len() < deltas.len() || (base.is_empty() && !deltas.is_empty()) {
        return Err(ActionError::InvalidInput(format!(
            "base trajectory has {} poses for {} deltas",
            base.len(),
            deltas.len()
        )));
    }
    let mut out = Vec::with_capacity(deltas.len() + 1);
    let mut cur = *start;
    out.push(cur);
    for (k, d) in deltas.iter().enumerate() {
        let rb = robot_frame(base, k, anchor);
        let p = cur.p + rb.rotate(&d.p);
        let r = rb.compose(&d.r).compose(&rb.inverse()).compose(&cur.r).renormalized();
        cur = Pose::new(p, r);
        out.push(cur);
    }
    Ok(out)
}

fn zero_delta_frame() -> WholeBodyAction {
    WholeBodyAction {
        base: PlanarPose::default(),
        torso: [0.0; 4],
        ee_left: Pose::identity(),
        ee_right: Pose::identity(),
        grip_left: 0.0,
        grip_right: 0.0,
        head: [0.0; 2],
    }
}

fn scalar_delta(prev: &WholeBodyAction, next: &WholeBodyAction) -> WholeBodyAction {
    let mut d = zero_delta_frame();
    d.base = PlanarPose::new(
        next.base.x - prev.base.x,
        next.base.y - prev.base.y,
        wrap_angle(next.base.yaw - prev.base.yaw),
    );
    for i in 0..4 {
        d.torso[i] = next.torso[i] - prev.torso[i];
    }
    for i in 0..2 {
        d.head[i] = next.head[i] - prev.head[i];
    }
    // Gripper commands are absolute in every representation.
    d.grip_left = next.grip_left;
    d.grip_right = next.grip_right;
    d
}

fn apply_scalar_delta(prev: &WholeBodyAction, d: &WholeBodyAction) -> WholeBodyAction {
    let mut next = *prev;
    next.base = PlanarPose::new(prev.base.x + d.base.x, prev.base.y + d.base.y, prev.base.yaw + d.base.yaw);
    for i in 0..4 {
        next.torso[i] = prev.torso[i] + d.torso[i];
    }
    for i in 0..2 {
        next.head[i] = prev.head[i] + d.head[i];
    }
    next.grip_left = d.grip_left;
    next.grip_right = d.grip_right;
    next
}

/// Converts absolute frames into chunk frames of representation `repr`.
pub fn encode_frames(
    absolute: &[WholeBodyAction],
    repr: ReprTag,
    anchor: RobotFrameAnchor,
) -> Result<Vec<WholeBodyAction>, ActionError> {
    if absolute.is_empty() {
        return Err(ActionError::InvalidInput("no frames to encode".into()));
    }
    if repr == ReprTag::AbsoluteWorld {
        return Ok(absolute.to_vec());
    }
    let mut first = zero_delta_frame();
    first.grip_left = absolute[0].grip_left;
    first.grip_right = absolute[0].grip_right;
    let mut out = vec![first];
    if absolute.len() == 1 {
        return Ok(out);
    }
    let left: Vec<Pose> = absolute.iter().map(|a| a.ee_left).collect();
    let right: Vec<Pose> = absolute.iter().map(|a| a.ee_right).collect();
    let (dl, dr) = match repr {
        ReprTag::EgocentricDelta => (to_egocentric_delta(&left)?, to_egocentric_delta(&right)?),
        _ => {
            let base: Vec<Pose> = absolute.iter().map(|a| a.base.to_pose()).collect();
            (to_robot_delta(&left, &base, anchor)?, to_robot_delta(&right, &base, anchor)?)
        }
    };
    for k in 0..absolute.len() - 1 {
        let mut d = scalar_delta(&absolute[k], &absolute[k + 1]);
        d.ee_left = dl[k];
        d.ee_right = dr[k];
        out.push(d);
    }
    Ok(out)
}

/// Inverse of [`encode_frames`], anchored at the observed state.
pub fn decode_frames(
    observed: &WholeBodyAction,
    frames: &[WholeBodyAction],
    repr: ReprTag,
    anchor: RobotFrameAnchor,
) -> Result<Vec<WholeBodyAction>, ActionError> {
    if repr == ReprTag::AbsoluteWorld {
        return Ok(frames.to_vec());
    }
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    let mut start = *observed;
    start.grip_left = first.grip_left;
    start.grip_right = first.grip_right;
    let mut out = Vec::with_capacity(frames.len());
    out.push(start);
    for d in &frames[1..] {
        let prev = out.last().copied().unwrap_or(start);
        out.push(apply_scalar_delta(&prev, d));
    }
    let dl: Vec<Pose> = frames[1..].iter().map(|f| f.ee_left).collect();
    let dr: Vec<Pose> = frames[1..].iter().map(|f| f.ee_right).collect();
    let (left, right) = match repr {
        ReprTag::EgocentricDelta => (
            apply_egocentric_delta(&start.ee_left, &dl),
            apply_egocentric_delta(&start.ee_right, &dr),
        ),
        _ => {
            let base: Vec<Pose> = out.iter().map(|a| a.base.to_pose()).collect();
            (
                apply_robot_delta(&start.ee_left, &dl, &base, anchor)?,
                apply_robot_delta(&start.ee_right, &dr, &base, anchor)?,
            )
        }
    };
    for (k, frame) in out.iter_mut().enumerate() {
        frame.ee_left = left[k];
        frame.ee_right = right[k];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metric channels

/// Number of channels used by the discontinuity statistics.
pub const METRIC_CHANNELS: usize = 19;

/// Names of the metric channels, in order. End-effector orientations are one
/// channel each, measured as geodesic angle.
pub const METRIC_CHANNEL_NAMES: [&str; METRIC_CHANNELS] = [
    "base_x", "base_y", "base_yaw", "torso_1", "torso_2", "torso_3", "torso_4", "eeL_px", "eeL_py", "eeL_pz",
    "eeL_rot", "gripL", "eeR_px", "eeR_py", "eeR_pz", "eeR_rot", "gripR", "head_1", "head_2",
];

/// Per-channel absolute change between two frames.
pub fn frame_change(a: &WholeBodyAction, b: &WholeBodyAction) -> [f64; METRIC_CHANNELS] {
    let dl = b.ee_left.p - a.ee_left.p;
    let dr = b.ee_right.p - a.ee_right.p;
    [
        (b.base.x - a.base.x).abs(),
        (b.base.y - a.base.y).abs(),
        wrap_angle(b.base.yaw - a.base.yaw).abs(),
        (b.torso[0] - a.torso[0]).abs(),
        (b.torso[1] - a.torso[1]).abs(),
        (b.torso[2] - a.torso[2]).abs(),
        (b.torso[3] - a.torso[3]).abs(),
        dl.x.abs(),
        dl.y.abs(),
        dl.z.abs(),
        geodesic_angle(&a.ee_left.r, &b.ee_left.r),
        (b.grip_left - a.grip_left).abs(),
        dr.x.abs(),
        dr.y.abs(),
        dr.z.abs(),
        geodesic_angle(&a.ee_right.r, &b.ee_right.r),
        (b.grip_right - a.grip_right).abs(),
        (b.head[0] - a.head[0]).abs(),
        (b.head[1] - a.head[1]).abs(),
    ]
}

/// Step-change statistics of a trajectory.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TrajectoryStats {
    /// Mean absolute change over all consecutive pairs, per channel.
    pub mean_step_change: Vec<f64>,
    /// Same statistic restricted to pairs straddling a chunk boundary; `None`
    /// when no boundary was given.
    pub mean_boundary_change: Option<Vec<f64>>,
    /// Population variance of the per-step changes, per channel.
    pub variance: Vec<f64>,
}

impl TrajectoryStats {
    /// Weighted mean across channels of the step and boundary statistics.
    pub fn aggregate(&self, weights: &[f64]) -> (f64, Option<f64>) {
        let wsum: f64 = weights.iter().sum();
        let agg = |v: &[f64]| v.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / wsum;
        (agg(&self.mean_step_change), self.mean_boundary_change.as_deref().map(agg))
    }

    /// Uniform-weight aggregate.
    pub fn aggregate_uniform(&self) -> (f64, Option<f64>) {
        self.aggregate(&vec![1.0; self.mean_step_change.len()])
    }
}

/// Statistics of generic per-step change vectors. `changes[k]` is the change
/// between samples `k` and `k + 1`; boundary index `b` marks the pair
/// `(b − 1, b)`.
pub fn step_stats(changes: &[Vec<f64>], boundaries: &[usize]) -> Result<TrajectoryStats, ActionError> {
    if changes.is_empty() {
        return Err(ActionError::InvalidInput("need at least 2 frames".into()));
    }
    let channels = changes[0].len();
    let n = changes.len() as f64;
    let mut mean = vec![0.0; channels];
    for c in changes {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; channels];
    for c in changes {
        for ((s, v), m) in var.iter_mut().zip(c).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);

    let boundary = if boundaries.is_empty() {
        None
    } else {
        let mut acc = vec![0.0; channels];
        for &b in boundaries {
            if b == 0 || b > changes.len() {
                return Err(ActionError::InvalidInput(format!(
                    "boundary index {b} outside 1..={}",
                    changes.len()
                )));
            }
            for (a, v) in acc.iter_mut().zip(&changes[b - 1]) {
                *a += v;
            }
        }
        let nb = boundaries.len() as f64;
        acc.iter_mut().for_each(|a| *a /= nb);
        Some(acc)
    };
    Ok(TrajectoryStats {
        mean_step_change: mean,
        mean_boundary_change: boundary,
        variance: var,
    })
}

/// [`step_stats`] of a single scalar series.
pub fn scalar_step_stats(values: &[f64], boundaries: &[usize]) -> Result<TrajectoryStats, ActionError> {
    let changes: Vec<Vec<f64>> = values.windows(2).map(|w| vec![(w[1] - w[0]).abs()]).collect();
    step_stats(&changes, boundaries)
}

/// Per-channel discontinuity statistics of a whole-body trajectory.
pub fn trajectory_stats(traj: &[WholeBodyAction], chunk_boundaries: &[usize]) -> Result<TrajectoryStats, ActionError> {
    if traj.len() < 2 {
        return Err(ActionError::InvalidInput(format!("need at least 2 frames, got {}", traj.len())));
    }
    let changes: Vec<Vec<f64>> = traj.windows(2).map(|w| frame_change(&w[0], &w[1]).to_vec()).collect();
    step_stats(&changes, chunk_boundaries)
}

// ---------------------------------------------------------------------------
// Compactness

/// One arm's end-effector trajectory together with the base trajectory it was
/// recorded with.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmTrajectory {
    pub ee: Vec<Pose>,
    pub base: Vec<Pose>,
}

impl ArmTrajectory {
    /// A trajectory recorded with the base fixed at the world origin.
    pub fn fixed_base(ee: Vec<Pose>) -> Self {
        let base = vec![Pose::identity(); ee.len()];
        ArmTrajectory { ee, base }
    }

    pub fn resampled(&self, len: usize) -> Result<ArmTrajectory, ActionError> {
        Ok(ArmTrajectory {
            ee: resample_poses(&self.ee, len)?,
            base: resample_poses(&self.base, len)?,
        })
    }

    /// The trajectory in representation `tag`, as 6-dim tangent vectors.
    pub fn tangent_sequence(&self, tag: ReprTag, anchor: RobotFrameAnchor) -> Result<Vec<[f64; 6]>, ActionError> {
        let poses = match tag {
            ReprTag::AbsoluteWorld => self.ee.clone(),
            ReprTag::EgocentricDelta => to_egocentric_delta(&self.ee)?,
            ReprTag::RobotDelta => to_robot_delta(&self.ee, &self.base, anchor)?,
        };
        Ok(poses.iter().map(Pose::tangent6).collect())
    }
}

/// Linear-in-time resampling to `len` evenly spaced samples (geodesic for
/// rotations).
pub fn resample_poses(traj: &[Pose], len: usize) -> Result<Vec<Pose>, ActionError> {
    if traj.is_empty() || len == 0 {
        return Err(ActionError::InvalidInput("cannot resample an empty trajectory".into()));
    }
    if traj.len() == 1 || len == 1 {
        return Ok(vec![traj[0]; len]);
    }
    let last = (traj.len() - 1) as f64;
    Ok((0..len)
        .map(|i| {
            let s = i as f64 * last / (len - 1) as f64;
            let k = (s.floor() as usize).min(traj.len() - 2);
            let frac = s - k as f64;
            let (a, b) = (&traj[k], &traj[k + 1]);
            Pose::new(a.p + (b.p - a.p) * frac, pose::slerp(&a.r, &b.r, frac))
        })
        .collect())
}

/// Cross-trajectory variance summary of one representation.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CompactnessReport {
    pub tag: ReprTag,
    /// Trace of the cross-trajectory covariance of the 6-dim tangent vector, per
    /// time step.
    pub per_step_variance: Vec<f64>,
    pub mean_variance: f64,
}

/// Converts every trajectory into `tag` and reports per-step cross-trajectory
/// variance. All trajectories must already share one length.
pub fn repr_compactness(
    trajs: &[ArmTrajectory],
    tag: ReprTag,
    anchor: RobotFrameAnchor,
) -> Result<CompactnessReport, ActionError> {
    if trajs.len() < 2 {
        return Err(ActionError::InvalidInput("need at least 2 trajectories".into()));
    }
    let len = trajs[0].ee.len();
    if trajs.iter().any(|t| t.ee.len() != len || t.base.len() != len) {
        return Err(ActionError::InvalidInput(
            "trajectories differ in length; resample to a common length first".into(),
        ));
    }
    let seqs: Vec<Vec<[f64; 6]>> = trajs
        .iter()
        .map(|t| t.tangent_sequence(tag, anchor))
        .collect::<Result<_, _>>()?;
    let steps = seqs[0].len();
    let n = seqs.len() as f64;
    let per_step: Vec<f64> = (0..steps)
        .map(|k| {
            (0..6)
                .map(|c| {
                    let mean = seqs.iter().map(|s| s[k][c]).sum::<f64>() / n;
                    seqs.iter().map(|s| (s[k][c] - mean).powi(2)).sum::<f64>() / n
                })
                .sum()
        })
        .collect();
    let mean_variance = per_step.iter().sum::<f64>() / per_step.len() as f64;
    Ok(CompactnessReport {
        tag,
        per_step_variance: per_step,
        mean_variance,
    })
}

// ---------------------------------------------------------------------------
// Channel charts

/// Number of scalar channels the trajectory engine works on.
pub const CHART_CHANNELS: usize = 23;

/// Names of the chart channels, in order.
pub const CHART_CHANNEL_NAMES: [&str; CHART_CHANNELS] = [
    "base_x", "base_y", "base_yaw", "torso_1", "torso_2", "torso_3", "torso_4", "eeL_px", "eeL_py", "eeL_pz",
    "eeL_wx", "eeL_wy", "eeL_wz", "gripL", "eeR_px", "eeR_py", "eeR_pz", "eeR_wx", "eeR_wy", "eeR_wz", "gripR",
    "head_1", "head_2",
];

/// Channel group, used to assign per-group limits and noise levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelGroup {
    BaseXy,
    BaseYaw,
    Torso,
    EePosition,
    EeRotation,
    Gripper,
    Head,
}

pub fn chart_channel_group(i: usize) -> ChannelGroup {
    match i {
        0 | 1 => ChannelGroup::BaseXy,
        2 => ChannelGroup::BaseYaw,
        3..=6 => ChannelGroup::Torso,
        7..=9 | 14..=16 => ChannelGroup::EePosition,
        10..=12 | 17..=19 => ChannelGroup::EeRotation,
        13 | 20 => ChannelGroup::Gripper,
        _ => ChannelGroup::Head,
    }
}

/// Local coordinates for the non-Euclidean parts of a whole-body action:
/// orientations as rotation vectors relative to a reference rotation, yaw
/// unwrapped around a reference yaw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    pub yaw_ref: f64,
    pub left_ref: Rotation,
    pub right_ref: Rotation,
}

impl Chart {
    pub fn at(a: &WholeBodyAction) -> Self {
        Chart {
            yaw_ref: a.base.yaw,
            left_ref: a.ee_left.r,
            right_ref: a.ee_right.r,
        }
    }

    /// Largest rotation angle of `a` away from the reference orientations.
    pub fn rotation_excursion(&self, a: &WholeBodyAction) -> f64 {
        geodesic_angle(&self.left_ref, &a.ee_left.r).max(geodesic_angle(&self.right_ref, &a.ee_right.r))
    }

    pub fn to_channels(&self, a: &WholeBodyAction) -> [f64; CHART_CHANNELS] {
        let wl = so3_log(&self.left_ref.inverse().compose(&a.ee_left.r));
        let wr = so3_log(&self.right_ref.inverse().compose(&a.ee_right.r));
        [
            a.base.x,
            a.base.y,
            self.yaw_ref + wrap_angle(a.base.yaw - self.yaw_ref),
            a.torso[0],
            a.torso[1],
            a.torso[2],
            a.torso[3],
            a.ee_left.p.x,
            a.ee_left.p.y,
            a.ee_left.p.z,
            wl.x,
            wl.y,
            wl.z,
            a.grip_left,
            a.ee_right.p.x,
            a.ee_right.p.y,
            a.ee_right.p.z,
            wr.x,
            wr.y,
            wr.z,
            a.grip_right,
            a.head[0],
            a.head[1],
        ]
    }

    pub fn from_channels(&self, c: &[f64]) -> WholeBodyAction {
        debug_assert_eq!(c.len(), CHART_CHANNELS);
        let left_r = self.left_ref.compose(&so3_exp(&Vector3::new(c[10], c[11], c[12])));
        let right_r = self.right_ref.compose(&so3_exp(&Vector3::new(c[17], c[18], c[19])));
        WholeBodyAction {
            base: PlanarPose::new(c[0], c[1], c[2]),
            torso: [c[3], c[4], c[5], c[6]],
            ee_left: Pose::new(Vector3::new(c[7], c[8], c[9]), left_r),
            ee_right: Pose::new(Vector3::new(c[14], c[15], c[16]), right_r),
            grip_left: c[13].clamp(0.0, 1.0),
            grip_right: c[20].clamp(0.0, 1.0),
            head: [c[21], c[22]],
        }
    }
}

/// Unwraps yaw values in place so that each differs from its predecessor by at
/// most π, the first one relative to `reference`.
pub fn wrap_yaw_sequence<'a>(values: impl Iterator<Item = &'a mut f64>, reference: f64) {
    let mut prev = reference;
    for v in values {
        *v = prev + wrap_angle(*v - prev);
        prev = *v;
    }
}

// ---------------------------------------------------------------------------
// Trajectory CSV

/// Column names of the trajectory CSV format, in order.
pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = ["t", "base_x", "base_y", "base_yaw", "torso_1", "torso_2", "torso_3", "torso_4"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for (side, grip) in [("eeL", "gripL"), ("eeR", "gripR")] {
        for c in ["px", "py", "pz"] {
            h.push(format!("{side}_{c}"));
        }
        for r in 1..=3 {
            for c in 1..=3 {
                h.push(format!("{side}_r{r}{c}"));
            }
        }
        h.push(grip.to_string());
    }
    h.push("head_1".into());
    h.push("head_2".into());
    h
}

fn pose_fields(p: &Pose, out: &mut Vec<f64>) {
    out.extend_from_slice(&[p.p.x, p.p.y, p.p.z]);
    let m = p.r.matrix();
    for r in 0..3 {
        for c in 0..3 {
            out.push(m[(r, c)]);
        }
    }
}

/// Flattens a timestamped frame into the CSV column order.
pub fn csv_row(t: f64, a: &WholeBodyAction) -> Vec<f64> {
    let mut row = vec![t, a.base.x, a.base.y, a.base.yaw];
    row.extend_from_slice(&a.torso);
    pose_fields(&a.ee_left, &mut row);
    row.push(a.grip_left);
    pose_fields(&a.ee_right, &mut row);
    row.push(a.grip_right);
    row.extend_from_slice(&a.head);
    row
}

fn parse_pose(v: &[f64], line: u64, side: &str) -> Result<Pose, ActionError> {
    let m = Matrix3::new(v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11]);
    let r = Rotation::try_from_matrix(m)
        .ok_or_else(|| ActionError::Csv(format!("line {line}: {side} rotation is not in SO(3)")))?;
    Ok(Pose::new(Vector3::new(v[0], v[1], v[2]), r))
}

/// Writes frames in the trajectory CSV format. `comment`, if given, becomes a
/// leading `# ...` line.
pub fn write_trajectory_csv<W: Write>(
    w: W,
    frames: &[(f64, WholeBodyAction)],
    comment: Option<&str>,
) -> Result<(), ActionError> {
    let mut w = w;
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(csv_header())?;
    for (t, a) in frames {
        wr.write_record(csv_row(*t, a).iter().map(|v| v.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads the trajectory CSV format. Lines starting with `#` are skipped.
pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Vec<(f64, WholeBodyAction)>, ActionError> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let expected = csv_header();
    if header != expected {
        let first_bad = header
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(header.len().min(expected.len()));
        return Err(ActionError::Csv(format!(
            "header mismatch at column {} (expected {} columns starting {:?}, got {:?})",
            first_bad + 1,
            expected.len(),
            expected.get(first_bad),
            header.get(first_bad)
        )));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let v: Vec<f64> = rec
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .map_err(|_| ActionError::Csv(format!("line {line}, column {}: cannot parse {s:?}", i + 1)))
            })
            .collect::<Result<_, _>>()?;
        if v.len() != expected.len() {
            return Err(ActionError::Csv(format!(
                "line {line}: expected {} fields, got {}",
                expected.len(),
                v.len()
            )));
        }
        let a = WholeBodyAction {
            base: PlanarPose::new(v[1], v[2], v[3]),
            torso: [v[4], v[5], v[6], v[7]],
            ee_left: parse_pose(&v[8..20], line, "eeL")?,
            grip_left: v[20],
            ee_right: parse_pose(&v[21..33], line, "eeR")?,
            grip_right: v[33],
            head: [v[34], v[35]],
        };
        a.validate().map_err(|e| ActionError::Csv(format!("line {line}: {e}")))?;
        if let Some((t_prev, _)) = out.last() {
            if v[0] <= *t_prev {
                return Err(ActionError::Csv(format!("line {line}: timestamps must increase")));
            }
        }
        out.push((v[0], a));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
        (a.p - b.p).norm() <= tol && (a.r.matrix() - b.r.matrix()).norm() <= tol
    }

    #[test]
    fn egocentric_delta_identity_rotation() {
        let a = Pose::from_translation(1.0, 0.0, 0.0);
        let b = Pose::from_translation(1.0, 0.1, 0.0);
        let d = to_egocentric_delta(&[a, b]).unwrap();
        assert!(close(&d[0], &Pose::from_translation(0.0, 0.1, 0.0), 1e-15));
    }

    #[test]
    fn egocentric_delta_rotated_frame() {
        let r = Rotation::rot_z(FRAC_PI_2);
        let a = Pose::new(Vector3::new(1.0, 0.0, 0.0), r);
        let b = Pose::new(Vector3::new(1.0, 0.1, 0.0), r);
        let d = to_egocentric_delta(&[a, b]).unwrap();
        assert!(close(&d[0], &Pose::from_translation(0.1, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn egocentric_delta_needs_two_poses() {
        assert!(matches!(
            to_egocentric_delta(&[Pose::identity()]),
            Err(ActionError::InvalidInput(_))
        ));
    }

    #[test]
    fn constant_trajectory_has_identity_deltas() {
        let t = Pose::new(Vector3::new(0.2, 0.3, 0.4), Rotation::from_rpy(0.1, 0.2, 0.3));
        for d in to_egocentric_delta(&[t; 5]).unwrap() {
            assert!(close(&d, &Pose::identity(), 1e-15));
        }
        let base = [Pose::from_rotation(Rotation::rot_z(0.7)); 5];
        for d in to_robot_delta(&[t; 5], &base, RobotFrameAnchor::InstantaneousBase).unwrap() {
            assert!(close(&d, &Pose::identity(), 1e-15));
        }
    }

    #[test]
    fn apply_egocentric_delta_examples() {
        let t = Pose::new(Vector3::new(0.2, 0.3, 0.4), Rotation::rot_x(0.3));
        assert_eq!(apply_egocentric_delta(&t, &[]), vec![t]);
        let out = apply_egocentric_delta(&Pose::identity(), &[Pose::from_translation(0.1, 0.0, 0.0)]);
        assert_eq!(out, vec![Pose::identity(), Pose::from_translation(0.1, 0.0, 0.0)]);
    }

    #[test]
    fn robot_delta_examples() {
        let a = Pose::from_translation(1.0, 0.0, 0.0);
        let b = Pose::from_translation(1.0, 0.1, 0.0);
        let base_id = [Pose::identity(); 2];
        let d = to_robot_delta(&[a, b], &base_id, RobotFrameAnchor::InstantaneousBase).unwrap();
        assert!((d[0].p - Vector3::new(0.0, 0.1, 0.0)).norm() < 1e-15);

        let base_rot = [Pose::from_rotation(Rotation::rot_z(FRAC_PI_2)); 2];
        let d = to_robot_delta(&[a, b], &base_rot, RobotFrameAnchor::InstantaneousBase).unwrap();
        assert!((d[0].p - Vector3::new(0.1, 0.0, 0.0)).norm() < 1e-15);

        assert!(to_robot_delta(&[a, b], &[Pose::identity()], RobotFrameAnchor::InstantaneousBase).is_err());
    }

    #[test]
    fn scalar_stats_examples() {
        let s = scalar_step_stats(&[0.0, 0.1, 0.2], &[]).unwrap();
        assert!((s.mean_step_change[0] - 0.1).abs() < 1e-15);
        assert!(s.mean_boundary_change.is_none());

        let s = scalar_step_stats(&[0.0, 0.0, 0.5, 0.5], &[2]).unwrap();
        assert!((s.mean_step_change[0] - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(s.mean_boundary_change.unwrap()[0], 0.5);

        assert!(scalar_step_stats(&[0.0, 1.0], &[5]).is_err());
        assert!(scalar_step_stats(&[0.0], &[]).is_err());
    }

    #[test]
    fn chart_round_trip() {
        let mut a = WholeBodyAction::default();
        a.base = PlanarPose::new(0.3, -0.2, 3.0);
        a.ee_left = Pose::new(Vector3::new(0.5, 0.2, 1.0), Rotation::from_rpy(0.2, 0.1, -0.4));
        a.ee_right = Pose::new(Vector3::new(0.5, -0.2, 1.0), Rotation::from_rpy(-0.3, 0.4, 0.1));
        a.grip_left = 0.4;
        let mut chart = Chart::at(&a);
        chart.left_ref = Rotation::from_rpy(0.1, 0.0, -0.2);
        chart.yaw_ref = -3.0;
        let c = chart.to_channels(&a);
        // yaw is unwrapped next to the reference
        assert!((c[2] - (3.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-12);
        let back = chart.from_channels(&c);
        assert!(close(&back.ee_left, &a.ee_left, 1e-12));
        assert!(close(&back.ee_right, &a.ee_right, 1e-12));
        assert!((wrap_angle(back.base.yaw - a.base.yaw)).abs() < 1e-12);
        assert_eq!(back.grip_left, 0.4);
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let mut a = WholeBodyAction::default();
        a.ee_left = Pose::new(Vector3::new(0.5, 0.2, 1.0), Rotation::from_rpy(0.2, 0.1, -0.4));
        a.grip_right = 1.0;
        let frames = vec![(0.0, a), (0.1, a)];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &frames, Some("seed=3")).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=3\nt,base_x"));
        assert_eq!(csv_header().len(), 36);
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back, frames);

        let bad = text.replace("gripL", "grip_l");
        assert!(matches!(read_trajectory_csv(bad.as_bytes()), Err(ActionError::Csv(_))));
    }

    #[test]
    fn csv_rejects_bad_grip() {
        let mut a = WholeBodyAction::default();
        a.grip_left = 0.5;
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[(0.0, a)], None).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(",0.5,", ",1.5,");
        let err = read_trajectory_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("grip_left"));
    }
}
