//! Scenario files: TOML text with one section per experiment ingredient.
//!
//! Parsing is two-stage. `toml` + serde catch syntax errors, unknown keys and
//! type mismatches with a byte span; [`Scenario::from_str`] then checks the
//! sections each kind needs and the ranges of every value, locating offending
//! keys by scanning the text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::action::{chart_channel_group, ChannelGroup, ReprTag, RobotFrameAnchor, CHART_CHANNELS, CHART_CHANNEL_NAMES};
use crate::exec::StrategyKind;
use crate::kinematics::BodySegment;
use crate::policy::{LatencyModel, NoiseMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    StrategyCompare,
    ReprAblation,
    ReprRoundtrip,
    ErrorPropagation,
    Throughput,
    RtgUnit,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::StrategyCompare => "strategy_compare",
            ExperimentKind::ReprAblation => "repr_ablation",
            ExperimentKind::ReprRoundtrip => "repr_roundtrip",
            ExperimentKind::ErrorPropagation => "error_propagation",
            ExperimentKind::Throughput => "throughput",
            ExperimentKind::RtgUnit => "rtg_unit",
        }
    }
}

/// A per-channel quantity: one scalar for every channel, an explicit list, or
/// a table keyed by channel group.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ChannelValues {
    Scalar(f64),
    List(Vec<f64>),
    Groups(GroupTable),
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTable {
    pub base_xy: Option<f64>,
    pub base_yaw: Option<f64>,
    pub torso: Option<f64>,
    pub ee_position: Option<f64>,
    pub ee_rotation: Option<f64>,
    pub gripper: Option<f64>,
    pub head: Option<f64>,
}

impl GroupTable {
    fn get(&self, g: ChannelGroup) -> (Option<f64>, &'static str) {
        match g {
            ChannelGroup::BaseXy => (self.base_xy, "base_xy"),
            ChannelGroup::BaseYaw => (self.base_yaw, "base_yaw"),
            ChannelGroup::Torso => (self.torso, "torso"),
            ChannelGroup::EePosition => (self.ee_position, "ee_position"),
            ChannelGroup::EeRotation => (self.ee_rotation, "ee_rotation"),
            ChannelGroup::Gripper => (self.gripper, "gripper"),
            ChannelGroup::Head => (self.head, "head"),
        }
    }
}

impl ChannelValues {
    /// Expands to `channels` values. Group tables only apply to the
    /// whole-body chart; `missing` fills groups left out of a table, and
    /// `None` makes them an error.
    pub fn expand(&self, channels: usize, missing: Option<f64>) -> Result<Vec<f64>, String> {
        match self {
            ChannelValues::Scalar(v) => Ok(vec![*v; channels]),
            ChannelValues::List(v) if v.len() == channels => Ok(v.clone()),
            ChannelValues::List(v) => Err(format!("expected {channels} values, got {}", v.len())),
            ChannelValues::Groups(t) => {
                if channels != CHART_CHANNELS {
                    return Err(format!("group tables need the {CHART_CHANNELS}-channel whole-body chart"));
                }
                (0..channels)
                    .map(|c| match t.get(chart_channel_group(c)) {
                        (Some(v), _) => Ok(v),
                        (None, name) => missing.ok_or_else(|| format!("missing group `{name}`")),
                    })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    /// Trajectory CSV, relative to the scenario file.
    pub path: String,
}

fn default_chunk_len() -> usize {
    32
}

fn default_dt() -> f64 {
    0.1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    #[serde(default = "default_chunk_len")]
    pub chunk_len: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_repr")]
    pub repr: ReprTag,
    #[serde(default)]
    pub anchor: RobotFrameAnchor,
    #[serde(default = "default_noise_mode")]
    pub noise_mode: NoiseMode,
    pub sigma: Option<ChannelValues>,
    pub latency: Option<LatencyModel>,
}

fn default_repr() -> ReprTag {
    ReprTag::AbsoluteWorld
}

fn default_noise_mode() -> NoiseMode {
    NoiseMode::PerChunkOffset
}

fn default_fusion_decay() -> f64 {
    0.1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecSection {
    pub duration: f64,
    pub strategies: Option<Vec<StrategyKind>>,
    pub sync_horizon: Option<f64>,
    #[serde(default = "default_fusion_decay")]
    pub fusion_decay: f64,
    pub control_rate: Option<f64>,
    pub min_inference_period: Option<f64>,
    /// Chart channel drawn in the overlay plots.
    pub plot_channel: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RtgSection {
    pub v_max: ChannelValues,
    pub dt_opt: Option<f64>,
    pub w_acc: Option<f64>,
    pub tau: Option<f64>,
    pub t_f_fraction: Option<f64>,
    pub t2_budget: Option<f64>,
    pub control_rate: Option<f64>,
    pub ingest_rate: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub name: String,
    pub repr: ReprTag,
    pub noise_mode: NoiseMode,
    pub sigma: f64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Frames executed from each chunk.
    pub horizon: usize,
    pub chunks: usize,
    #[serde(rename = "arm")]
    pub arms: Vec<AblationArm>,
}

fn default_steps() -> usize {
    500
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundtripSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Random walks per seed.
    pub trajectories: usize,
    /// Per-step standard deviations of the walk.
    pub step_position: f64,
    pub step_rotation: f64,
    /// Rigidly offset copies used for the compactness comparison.
    pub offset_copies: usize,
    pub tolerance: f64,
    pub offset_tolerance: f64,
    #[serde(default)]
    pub anchor: RobotFrameAnchor,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScopeEntry {
    pub name: String,
    pub segments: Vec<BodySegment>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmChoice {
    Left,
    Right,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPropagationSection {
    /// Model TOML relative to the scenario file; the shipped whole-body model
    /// when absent.
    pub model: Option<String>,
    pub arm: ArmChoice,
    pub sigma: f64,
    pub trials: usize,
    pub frames: usize,
    #[serde(rename = "scope")]
    pub scopes: Vec<ScopeEntry>,
}

fn default_scaling() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputSection {
    pub chunk_len: usize,
    pub channels: usize,
    pub repetitions: usize,
    /// Also time twice the channel count.
    #[serde(default = "default_scaling")]
    pub scaling: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkEntry {
    pub t_obs: f64,
    pub dt: f64,
    /// Arrival time; the latency is `arrival − t_obs`.
    pub arrival: f64,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Output root relative to the scenario file.
    pub dir: Option<String>,
}

/// The literal contents of a scenario file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub reference: Option<ReferenceSection>,
    pub source: Option<SourceSection>,
    pub exec: Option<ExecSection>,
    pub rtg: Option<RtgSection>,
    pub ablation: Option<AblationSection>,
    pub roundtrip: Option<RoundtripSection>,
    pub error_propagation: Option<ErrorPropagationSection>,
    pub throughput: Option<ThroughputSection>,
    #[serde(default, rename = "chunk")]
    pub chunks: Vec<ChunkEntry>,
    pub output: Option<OutputSection>,
}

/// A parsed and validated scenario.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub path: PathBuf,
    /// Hex SHA-256 of the file text.
    pub config_sha256: String,
    pub seeds: Vec<u64>,
}

/// 1-based line and column of byte `offset` in `text`.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |i| offset - i - 1) + 1;
    (line, col)
}

fn header_name(line: &str) -> Option<&str> {
    let t = line.trim();
    let t = t.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")).or_else(|| t.strip_prefix('[')?.strip_suffix(']'))?;
    Some(t.trim())
}

/// Line of `key` inside `[section]` (top level when `None`), or of the
/// section header when the key is absent.
pub fn locate_key(text: &str, section: Option<&str>, key: &str) -> Option<usize> {
    let mut current: Option<&str> = None;
    let mut header_line = None;
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = header_name(line) {
            current = Some(h);
            if Some(h) == section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        let t = line.trim_start();
        if let Some(rest) = t.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some(i + 1);
            }
        }
    }
    header_line
}

struct Checker<'a> {
    text: &'a str,
    path: &'a Path,
}

impl Checker<'_> {
    fn err(&self, section: Option<&str>, key: &str, message: impl Into<String>) -> HarnessError {
        let line = locate_key(self.text, section, key)
            .or_else(|| locate_key(self.text, None, "kind"))
            .unwrap_or(1);
        let where_ = match section {
            Some(s) => format!("{s}.{key}"),
            None => key.to_string(),
        };
        HarnessError::Invalid {
            path: self.path.to_path_buf(),
            line,
            message: format!("`{where_}`: {}", message.into()),
        }
    }

    fn require<'s, T>(&self, v: &'s Option<T>, section: &str, kind: ExperimentKind) -> Result<&'s T, HarnessError> {
        v.as_ref().ok_or_else(|| {
            self.err(None, "kind", format!("kind `{}` needs a [{section}] section", kind.name()))
        })
    }

    fn positive(&self, section: &str, key: &str, v: f64) -> Result<(), HarnessError> {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(self.err(Some(section), key, format!("must be positive, got {v}")))
        }
    }

    fn non_negative(&self, section: &str, key: &str, v: f64) -> Result<(), HarnessError> {
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(self.err(Some(section), key, format!("must be non-negative, got {v}")))
        }
    }

    fn at_least(&self, section: &str, key: &str, v: usize, min: usize) -> Result<(), HarnessError> {
        if v >= min {
            Ok(())
        } else {
            Err(self.err(Some(section), key, format!("must be at least {min}, got {v}")))
        }
    }

    fn source(&self, s: &SourceSection) -> Result<(), HarnessError> {
        self.at_least("source", "chunk_len", s.chunk_len, 2)?;
        self.positive("source", "dt", s.dt)?;
        if let Some(sigma) = &s.sigma {
            let v = sigma.expand(CHART_CHANNELS, Some(0.0)).map_err(|m| self.err(Some("source"), "sigma", m))?;
            if let Some(bad) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
                return Err(self.err(Some("source"), "sigma", format!("must be non-negative, got {bad}")));
            }
        }
        if let Some(l) = &s.latency {
            l.validate().map_err(|e| self.err(Some("source"), "latency", e.to_string()))?;
            if l.mean() >= s.dt * (s.chunk_len - 1) as f64 {
                return Err(self.err(Some("source"), "latency", "mean latency must be shorter than a chunk"));
            }
        }
        Ok(())
    }

    fn rtg(&self, r: &RtgSection, channels: usize) -> Result<(), HarnessError> {
        let v = r.v_max.expand(channels, None).map_err(|m| self.err(Some("rtg"), "v_max", m))?;
        if let Some(bad) = v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
            return Err(self.err(Some("rtg"), "v_max", format!("must be positive, got {bad}")));
        }
        for (key, val) in [("dt_opt", r.dt_opt), ("tau", r.tau), ("control_rate", r.control_rate), ("ingest_rate", r.ingest_rate)] {
            if let Some(x) = val {
                self.positive("rtg", key, x)?;
            }
        }
        for (key, val) in [("w_acc", r.w_acc), ("t2_budget", r.t2_budget)] {
            if let Some(x) = val {
                self.non_negative("rtg", key, x)?;
            }
        }
        if let Some(f) = r.t_f_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(self.err(Some("rtg"), "t_f_fraction", format!("must lie in (0, 1], got {f}")));
            }
        }
        if let Some(n) = r.max_iters {
            self.at_least("rtg", "max_iters", n, 1)?;
        }
        Ok(())
    }

    fn exec(&self, e: &ExecSection) -> Result<(), HarnessError> {
        self.positive("exec", "duration", e.duration)?;
        self.non_negative("exec", "fusion_decay", e.fusion_decay)?;
        for (key, val) in [
            ("sync_horizon", e.sync_horizon),
            ("control_rate", e.control_rate),
            ("min_inference_period", e.min_inference_period),
        ] {
            if let Some(x) = val {
                self.positive("exec", key, x)?;
            }
        }
        if let Some(s) = &e.strategies {
            if s.is_empty() {
                return Err(self.err(Some("exec"), "strategies", "needs at least one strategy"));
            }
        }
        if let Some(c) = &e.plot_channel {
            if !CHART_CHANNEL_NAMES.contains(&c.as_str()) {
                return Err(self.err(Some("exec"), "plot_channel", format!("unknown channel {c:?}")));
            }
        }
        Ok(())
    }
}

impl Scenario {
    /// Parses and validates scenario text. `path` is used for messages and to
    /// resolve relative paths.
    pub fn from_str(text: &str, path: &Path) -> Result<Scenario, HarnessError> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            HarnessError::Parse {
                path: path.to_path_buf(),
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })?;
        let ck = Checker { text, path };
        if file.name.trim().is_empty()
            || !file.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(ck.err(None, "name", "must be non-empty and use only [A-Za-z0-9_-]"));
        }
        let seeds = match (&file.seed, &file.seeds) {
            (Some(_), Some(_)) => return Err(ck.err(None, "seeds", "give either `seed` or `seeds`, not both")),
            (Some(s), None) => vec![*s],
            (None, Some(s)) if s.is_empty() => return Err(ck.err(None, "seeds", "must not be empty")),
            (None, Some(s)) => s.clone(),
            (None, None) => vec![0],
        };
        let kind = file.kind;
        match kind {
            ExperimentKind::StrategyCompare => {
                ck.require(&file.reference, "reference", kind)?;
                ck.source(ck.require(&file.source, "source", kind)?)?;
                ck.exec(ck.require(&file.exec, "exec", kind)?)?;
                ck.rtg(ck.require(&file.rtg, "rtg", kind)?, CHART_CHANNELS)?;
            }
            ExperimentKind::ReprAblation => {
                ck.require(&file.reference, "reference", kind)?;
                let src = ck.require(&file.source, "source", kind)?;
                ck.source(src)?;
                let a = ck.require(&file.ablation, "ablation", kind)?;
                ck.at_least("ablation", "horizon", a.horizon, 1)?;
                ck.at_least("ablation", "chunks", a.chunks, 2)?;
                if a.horizon >= src.chunk_len {
                    return Err(ck.err(Some("ablation"), "horizon", "must be shorter than source.chunk_len"));
                }
                if a.arms.len() < 2 {
                    return Err(ck.err(None, "kind", "repr_ablation needs at least two [[ablation.arm]] entries"));
                }
                for arm in &a.arms {
                    ck.non_negative("ablation.arm", "sigma", arm.sigma)?;
                }
            }
            ExperimentKind::ReprRoundtrip => {
                let r = ck.require(&file.roundtrip, "roundtrip", kind)?;
                ck.at_least("roundtrip", "steps", r.steps, 2)?;
                ck.at_least("roundtrip", "trajectories", r.trajectories, 1)?;
                ck.at_least("roundtrip", "offset_copies", r.offset_copies, 2)?;
                ck.non_negative("roundtrip", "step_position", r.step_position)?;
                ck.non_negative("roundtrip", "step_rotation", r.step_rotation)?;
                ck.positive("roundtrip", "tolerance", r.tolerance)?;
                ck.positive("roundtrip", "offset_tolerance", r.offset_tolerance)?;
            }
            ExperimentKind::ErrorPropagation => {
                let e = ck.require(&file.error_propagation, "error_propagation", kind)?;
                ck.non_negative("error_propagation", "sigma", e.sigma)?;
                ck.at_least("error_propagation", "trials", e.trials, 1)?;
                ck.at_least("error_propagation", "frames", e.frames, 1)?;
                if e.scopes.is_empty() {
                    return Err(ck.err(None, "kind", "error_propagation needs at least one [[error_propagation.scope]]"));
                }
                if let Some(s) = e.scopes.iter().find(|s| s.segments.is_empty()) {
                    return Err(ck.err(Some("error_propagation.scope"), "segments", format!("scope {:?} is empty", s.name)));
                }
            }
            ExperimentKind::Throughput => {
                let t = ck.require(&file.throughput, "throughput", kind)?;
                ck.at_least("throughput", "chunk_len", t.chunk_len, 2)?;
                ck.at_least("throughput", "channels", t.channels, 1)?;
                ck.at_least("throughput", "repetitions", t.repetitions, 100)?;
            }
            ExperimentKind::RtgUnit => {
                if file.chunks.is_empty() {
                    return Err(ck.err(None, "kind", "rtg_unit needs at least one [[chunk]]"));
                }
                let channels = file.chunks[0].frames.first().map_or(0, Vec::len);
                if channels == 0 {
                    return Err(ck.err(Some("chunk"), "frames", "frames must be non-empty"));
                }
                for c in &file.chunks {
                    ck.positive("chunk", "dt", c.dt)?;
                    ck.at_least("chunk", "frames", c.frames.len(), 2)?;
                    if c.frames.iter().any(|f| f.len() != channels) {
                        return Err(ck.err(Some("chunk"), "frames", format!("every frame needs {channels} values")));
                    }
                    if c.arrival < c.t_obs {
                        return Err(ck.err(Some("chunk"), "arrival", "must not precede t_obs"));
                    }
                }
                ck.rtg(ck.require(&file.rtg, "rtg", kind)?, channels)?;
            }
        }
        let config_sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(Scenario {
            file,
            path: path.to_path_buf(),
            config_sha256,
            seeds,
        })
    }

    pub fn load(path: &Path) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::from_io(path, e))?;
        Self::from_str(&text, path)
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn kind(&self) -> ExperimentKind {
        self.file.kind
    }

    /// `rel` resolved against the scenario file's directory.
    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            return p.to_path_buf();
        }
        self.path.parent().unwrap_or(Path::new(".")).join(p)
    }

    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }
}
