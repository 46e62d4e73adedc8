//! Deterministic stand-in for a learned chunking policy.
//!
//! A [`ChunkSource`] samples a reference trajectory at the chunk timestamps,
//! encodes the frames in the requested representation, perturbs them with
//! truncated Gaussian noise and reports a simulated inference latency. All
//! randomness comes from a ChaCha stream keyed by `(seed, t_obs)`, so a chunk
//! depends only on the configuration and its observation time.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{
    chart_channel_group, encode_frames, read_trajectory_csv, wrap_yaw_sequence, ActionChunk, ActionError, ChannelGroup,
    Chart, ReprTag, RobotFrameAnchor, WholeBodyAction, CHART_CHANNELS,
};
use crate::kinematics::trial_rng;
use crate::pose::slerp;

/// Noise draws are truncated at this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("reference ends at {t_end} s; a chunk observed at {t_obs} s needs it until {needed} s")]
    Exhausted { t_obs: f64, needed: f64, t_end: f64 },
    #[error("file not found: {}", path.display())]
    FileNotFound { path: PathBuf },
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: ActionError },
    #[error(transparent)]
    Action(#[from] ActionError),
}

/// Reference trajectory with smooth interpolation between samples: cubic
/// Hermite on scalar channels, slerp on end-effector orientations.
#[derive(Clone, Debug)]
pub struct DenseTrajectory {
    times: Vec<f64>,
    frames: Vec<WholeBodyAction>,
    chart: Chart,
    values: Vec<[f64; CHART_CHANNELS]>,
    tangents: Vec<[f64; CHART_CHANNELS]>,
}

impl DenseTrajectory {
    pub fn new(samples: Vec<(f64, WholeBodyAction)>) -> Result<Self, PolicyError> {
        if samples.len() < 2 {
            return Err(PolicyError::InvalidInput("reference needs at least two samples".into()));
        }
        for w in samples.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(PolicyError::InvalidInput(format!(
                    "reference times must increase ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for (t, a) in &samples {
            if !t.is_finite() {
                return Err(PolicyError::InvalidInput("non-finite reference time".into()));
            }
            a.validate()?;
        }
        let (times, frames): (Vec<f64>, Vec<WholeBodyAction>) = samples.into_iter().unzip();
        let chart = Chart::at(&frames[0]);
        let mut values: Vec<[f64; CHART_CHANNELS]> = frames.iter().map(|a| chart.to_channels(a)).collect();
        wrap_yaw_sequence(values.iter_mut().map(|v| &mut v[2]), chart.yaw_ref);
        let n = times.len();
        let tangents = (0..n)
            .map(|i| {
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let mut m = [0.0; CHART_CHANNELS];
                for (ch, mc) in m.iter_mut().enumerate() {
                    *mc = (values[b][ch] - values[a][ch]) / (times[b] - times[a]);
                }
                m
            })
            .collect();
        Ok(DenseTrajectory {
            times,
            frames,
            chart,
            values,
            tangents,
        })
    }

    /// Loads a trajectory CSV.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PolicyError::FileNotFound { path: path.to_path_buf() },
            _ => PolicyError::Read {
                path: path.to_path_buf(),
                source: e.into(),
            },
        })?;
        let samples = read_trajectory_csv(file).map_err(|source| PolicyError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(samples)
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn samples(&self) -> impl Iterator<Item = (f64, &WholeBodyAction)> {
        self.times.iter().copied().zip(self.frames.iter())
    }

    /// Action at time `t`; sample times return the stored frame unchanged.
    pub fn sample(&self, t: f64) -> Result<WholeBodyAction, PolicyError> {
        let tol = 1e-9;
        if !(t >= self.t_start() - tol && t <= self.t_end() + tol) {
            return Err(PolicyError::Exhausted {
                t_obs: t,
                needed: t,
                t_end: self.t_end(),
            });
        }
        let t = t.clamp(self.t_start(), self.t_end());
        let j = self.times.partition_point(|&x| x <= t);
        if self.times[j - 1] == t {
            return Ok(self.frames[j - 1]);
        }
        let i = j - 1;
        let dt = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / dt;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (p0, p1, m0, m1) = (&self.values[i], &self.values[i + 1], &self.tangents[i], &self.tangents[i + 1]);
        let mut c = [0.0; CHART_CHANNELS];
        for ch in 0..CHART_CHANNELS {
            c[ch] = h00 * p0[ch] + h10 * dt * m0[ch] + h01 * p1[ch] + h11 * dt * m1[ch];
        }
        let mut a = self.chart.from_channels(&c);
        let (f0, f1) = (&self.frames[i], &self.frames[i + 1]);
        a.ee_left.r = slerp(&f0.ee_left.r, &f1.ee_left.r, s);
        a.ee_right.r = slerp(&f0.ee_right.r, &f1.ee_right.r, s);
        Ok(a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Independent draws for every frame.
    PerStep,
    /// One draw per chunk, shared by all its frames.
    PerChunkOffset,
}

/// Per-chart-channel standard deviations and the way draws are applied.
///
/// On absolute chunks a draw perturbs the frame itself. On delta chunks `σ` is
/// a rate: a draw `n` perturbs each increment by `n·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub sigma: [f64; CHART_CHANNELS],
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            mode: NoiseMode::PerStep,
            sigma: [0.0; CHART_CHANNELS],
        }
    }

    pub fn uniform(mode: NoiseMode, sigma: f64) -> Self {
        NoiseConfig {
            mode,
            sigma: [sigma; CHART_CHANNELS],
        }
    }

    pub fn by_group(mode: NoiseMode, sigma: impl Fn(ChannelGroup) -> f64) -> Self {
        let mut s = [0.0; CHART_CHANNELS];
        for (ch, v) in s.iter_mut().enumerate() {
            *v = sigma(chart_channel_group(ch));
        }
        NoiseConfig { mode, sigma: s }
    }

    pub fn is_zero(&self) -> bool {
        self.sigma.iter().all(|s| *s == 0.0)
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> [f64; CHART_CHANNELS] {
        let mut n = [0.0; CHART_CHANNELS];
        for (v, s) in n.iter_mut().zip(&self.sigma) {
            *v = truncated_normal(rng, *s);
        }
        n
    }
}

/// A draw from `N(0, σ²)` conditioned on `|x| ≤ 4σ`.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= TRUNCATION_SIGMAS {
            return sigma * z;
        }
    }
}

/// Simulated inference latency `t1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { t1: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let ok = match *self {
            LatencyModel::Constant { t1 } => t1 >= 0.0 && t1.is_finite(),
            LatencyModel::Uniform { lo, hi } => lo >= 0.0 && hi >= lo && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(PolicyError::InvalidInput(format!("invalid latency model {self:?}")))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LatencyModel::Constant { t1 } => t1,
            LatencyModel::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LatencyModel::Constant { t1 } => t1,
            LatencyModel::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChunkSourceConfig {
    pub reference: Arc<DenseTrajectory>,
    pub chunk_len: usize,
    pub dt: f64,
    pub repr: ReprTag,
    pub anchor: RobotFrameAnchor,
    pub noise: NoiseConfig,
    pub latency: LatencyModel,
    pub seed: u64,
}

impl ChunkSourceConfig {
    /// Noise-free, zero-latency absolute chunks of 32 frames at 0.1 s.
    pub fn new(reference: Arc<DenseTrajectory>) -> Self {
        ChunkSourceConfig {
            reference,
            chunk_len: 32,
            dt: 0.1,
            repr: ReprTag::AbsoluteWorld,
            anchor: RobotFrameAnchor::default(),
            noise: NoiseConfig::none(),
            latency: LatencyModel::Constant { t1: 0.0 },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.chunk_len < 2 {
            return Err(PolicyError::InvalidInput(format!("chunk_len = {} must be at least 2", self.chunk_len)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(PolicyError::InvalidInput(format!("dt = {} must be positive", self.dt)));
        }
        if let Some((i, s)) = self.noise.sigma.iter().enumerate().find(|(_, s)| !(**s >= 0.0) || !s.is_finite()) {
            return Err(PolicyError::InvalidInput(format!("sigma[{i}] = {s} must be non-negative")));
        }
        self.latency.validate()
    }
}

/// Anything that produces chunks on request.
pub trait ChunkProvider {
    /// Chunk observed at `t_obs` and its simulated inference latency.
    fn next_chunk(&self, t_obs: f64) -> Result<(ActionChunk, f64), PolicyError>;
}

#[derive(Clone, Debug)]
pub struct ChunkSource {
    cfg: ChunkSourceConfig,
}

impl ChunkSource {
    pub fn new(cfg: ChunkSourceConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(ChunkSource { cfg })
    }

    pub fn config(&self) -> &ChunkSourceConfig {
        &self.cfg
    }

    /// Same source with another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.cfg.clone();
        cfg.seed = seed;
        ChunkSource { cfg }
    }

    /// Noise-free absolute frames observed at `t_obs`.
    pub fn reference_frames(&self, t_obs: f64) -> Result<Vec<WholeBodyAction>, PolicyError> {
        let c = &self.cfg;
        let needed = t_obs + (c.chunk_len - 1) as f64 * c.dt;
        let r = &c.reference;
        if t_obs < r.t_start() - 1e-9 || needed > r.t_end() + 1e-9 {
            return Err(PolicyError::Exhausted {
                t_obs,
                needed,
                t_end: r.t_end(),
            });
        }
        (0..c.chunk_len).map(|i| r.sample(t_obs + i as f64 * c.dt)).collect()
    }
}

/// Adds chart-coordinate noise around `a`: scalars shift, orientations are
/// right-multiplied by `exp(n)`, grips are clamped to `[0, 1]`.
fn perturb(a: &WholeBodyAction, n: &[f64; CHART_CHANNELS], scale: f64) -> WholeBodyAction {
    let chart = Chart::at(a);
    let mut c = chart.to_channels(a);
    for (v, d) in c.iter_mut().zip(n) {
        *v += scale * d;
    }
    chart.from_channels(&c)
}

impl ChunkProvider for ChunkSource {
    fn next_chunk(&self, t_obs: f64) -> Result<(ActionChunk, f64), PolicyError> {
        let c = &self.cfg;
        let absolute = self.reference_frames(t_obs)?;
        let mut rng = trial_rng(c.seed, t_obs.to_bits());
        let t1 = c.latency.draw(&mut rng);
        let mut frames = encode_frames(&absolute, c.repr, c.anchor)?;
        if !c.noise.is_zero() {
            let offset = c.noise.draw(&mut rng);
            let (first, scale) = if c.repr.is_delta() { (1, c.dt) } else { (0, 1.0) };
            for f in frames.iter_mut().skip(first) {
                let n = match c.noise.mode {
                    NoiseMode::PerChunkOffset => offset,
                    NoiseMode::PerStep => c.noise.draw(&mut rng),
                };
                *f = perturb(f, &n, scale);
            }
        }
        Ok((ActionChunk::new(t_obs, c.dt, frames, c.repr)?, t1))
    }
}
