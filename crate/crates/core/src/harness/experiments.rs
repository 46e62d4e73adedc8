//! Runners for each experiment kind.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use super::bench::{machine_info, throughput_bench};
use super::config::{ArmChoice, ExperimentKind, RtgSection, Scenario, SourceSection};
use super::report::{line_plot_svg, num, Provenance, Series, Writer, PALETTE};
use super::{HarnessError, RunOptions, RunSummary};
use crate::action::{
    decode_frames, encode_frames, repr_compactness, to_egocentric_delta, trajectory_stats, write_trajectory_csv,
    ArmTrajectory, PlanarPose, ReprTag, WholeBodyAction, CHART_CHANNELS, CHART_CHANNEL_NAMES,
};
use crate::exec::{concatenate_chunks, run as run_strategy, ExecConfig, RunResult, StrategyKind};
use crate::kinematics::{error_propagation_trials, reference_reach, trial_rng, Arm, ChainModel};
use crate::policy::{ChunkSource, ChunkSourceConfig, DenseTrajectory, LatencyModel, NoiseConfig, PolicyError};
use crate::pose::{geodesic_angle, so3_exp, wrap_angle, Pose};
use crate::qp;
use crate::rtg::{write_telemetry_csv, ChannelChunk, RtgConfig, RtgEngine, RtgError};

pub(super) fn run(s: &Scenario, dir: &Path, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    let mut w = Writer::new(dir, Provenance::of(s));
    let report = match s.kind() {
        ExperimentKind::StrategyCompare => strategy_compare(s, &mut w, opts)?,
        ExperimentKind::ReprAblation => repr_ablation(s, &mut w)?,
        ExperimentKind::ReprRoundtrip => repr_roundtrip(s, &mut w)?,
        ExperimentKind::ErrorPropagation => error_propagation(s, &mut w)?,
        ExperimentKind::Throughput => throughput(s, &mut w)?,
        ExperimentKind::RtgUnit => rtg_unit(s, &mut w, opts)?,
    };
    Ok(RunSummary {
        scenario: s.name().to_string(),
        kind: s.kind(),
        out_dir: dir.to_path_buf(),
        files: w.files,
        report,
    })
}

fn failed(s: &Scenario, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Run {
        scenario: s.name().to_string(),
        message: e.to_string(),
    }
}

fn load_reference(s: &Scenario) -> Result<Arc<DenseTrajectory>, HarnessError> {
    let rel = &s.file.reference.as_ref().expect("validated").path;
    let path = s.resolve(rel);
    match DenseTrajectory::from_csv(&path) {
        Ok(r) => Ok(Arc::new(r)),
        Err(PolicyError::FileNotFound { .. }) => Err(HarnessError::FileNotFound { path }),
        Err(e) => Err(failed(s, e)),
    }
}

fn source_config(reference: Arc<DenseTrajectory>, src: &SourceSection) -> ChunkSourceConfig {
    let mut cfg = ChunkSourceConfig::new(reference);
    cfg.chunk_len = src.chunk_len;
    cfg.dt = src.dt;
    cfg.repr = src.repr;
    cfg.anchor = src.anchor;
    if let Some(sigma) = &src.sigma {
        let v = sigma.expand(CHART_CHANNELS, Some(0.0)).expect("validated");
        let mut arr = [0.0; CHART_CHANNELS];
        arr.copy_from_slice(&v);
        cfg.noise = NoiseConfig {
            mode: src.noise_mode,
            sigma: arr,
        };
    }
    cfg.latency = src.latency.unwrap_or(LatencyModel::Constant { t1: 0.0 });
    cfg
}

fn rtg_config(r: &RtgSection, channels: usize) -> RtgConfig {
    let mut c = RtgConfig::new(r.v_max.expand(channels, None).expect("validated"));
    c.dt_opt = r.dt_opt;
    if let Some(v) = r.w_acc {
        c.w_acc = v;
    }
    c.tau = r.tau;
    if let Some(v) = r.t_f_fraction {
        c.t_f_fraction = v;
    }
    if let Some(v) = r.t2_budget {
        c.t2_budget = v;
    }
    if let Some(v) = r.control_rate {
        c.control_rate = v;
    }
    if let Some(v) = r.ingest_rate {
        c.ingest_rate = v;
    }
    if let Some(v) = r.max_iters {
        c.qp.max_iters = v;
    }
    c
}

fn dump_qps(w: &mut Writer, prefix: &str, problems: &[qp::QpProblem]) -> Result<(), HarnessError> {
    for (c, p) in problems.iter().enumerate() {
        w.bytes(&format!("{prefix}_ch{c:02}.qp"), qp::dump(p).as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// strategy_compare

const METRIC_HEADER: [&str; 18] = [
    "seed",
    "strategy",
    "chunks",
    "boundary_count",
    "boundary_position_max",
    "boundary_position_mean",
    "boundary_velocity_max",
    "boundary_velocity_mean",
    "max_velocity_ratio",
    "velocity_violations",
    "total_pause_time",
    "pause_count",
    "tracking_rms",
    "latency_mean",
    "latency_min",
    "latency_max",
    "rejected_chunks",
    "truncated",
];

fn metric_row(seed: u64, r: &RunResult) -> Vec<String> {
    let m = &r.metrics;
    vec![
        seed.to_string(),
        m.strategy.name().into(),
        m.chunks.to_string(),
        m.boundary_count.to_string(),
        num(m.boundary_position_max),
        num(m.boundary_position_mean),
        num(m.boundary_velocity_max),
        num(m.boundary_velocity_mean),
        num(m.max_velocity_ratio),
        m.velocity_violations.to_string(),
        num(m.total_pause_time),
        m.pause_count.to_string(),
        num(m.tracking_rms),
        num(m.latency_mean),
        num(m.latency_min),
        num(m.latency_max),
        m.rejected_chunks.to_string(),
        m.truncated.to_string(),
    ]
}

fn overlay(res: &RunResult, channel: usize, title: &str, comment: &str) -> String {
    let mut series: Vec<Series> = res
        .chunks
        .iter()
        .enumerate()
        .map(|(k, c)| Series {
            points: c
                .frames
                .iter()
                .enumerate()
                .map(|(i, f)| (c.t_obs + i as f64 * c.dt, res.chart.to_channels(f)[channel]))
                .collect(),
            color: PALETTE[k % PALETTE.len()].into(),
            width: 1.0,
            opacity: 0.55,
        })
        .collect();
    series.push(Series {
        points: res.samples.iter().zip(&res.channels).map(|((t, _), v)| (*t, v[channel])).collect(),
        color: "#000000".into(),
        width: 2.0,
        opacity: 1.0,
    });
    line_plot_svg(
        title,
        "t [s]",
        CHART_CHANNEL_NAMES[channel],
        &series,
        &[("#000000", "executed"), (PALETTE[0], "chunks")],
        comment,
    )
}

/// Inputs of a `strategy_compare` scenario.
#[derive(Clone, Debug)]
pub struct StrategySetup {
    /// Chunk source with the scenario's first seed; see [`ChunkSource::with_seed`].
    pub source: ChunkSource,
    pub config: ExecConfig,
    /// Reference state at its first sample.
    pub initial: WholeBodyAction,
    pub strategies: Vec<StrategyKind>,
    /// Chart channel shown in the overlay plots.
    pub plot_channel: usize,
}

/// Builds the source, executor configuration and initial state of a
/// `strategy_compare` scenario.
pub fn strategy_setup(s: &Scenario) -> Result<StrategySetup, HarnessError> {
    let f = &s.file;
    let (Some(src), Some(ex), Some(rs)) = (f.source.as_ref(), f.exec.as_ref(), f.rtg.as_ref()) else {
        return Err(failed(s, "scenario lacks a [source], [exec] or [rtg] section"));
    };
    let reference = load_reference(s)?;
    let initial = reference.sample(reference.t_start()).map_err(|e| failed(s, e))?;
    let mut source_cfg = source_config(reference, src);
    source_cfg.seed = s.seeds.first().copied().unwrap_or(0);
    let source = ChunkSource::new(source_cfg).map_err(|e| failed(s, e))?;
    let mut cfg = ExecConfig::new(ex.duration, rtg_config(rs, CHART_CHANNELS));
    if let Some(v) = ex.control_rate {
        cfg.control_rate = v;
        cfg.rtg.control_rate = v;
    }
    if let Some(v) = ex.min_inference_period {
        cfg.min_inference_period = v;
    }
    cfg.sync_horizon = ex.sync_horizon;
    cfg.fusion_decay = ex.fusion_decay;
    cfg.anchor = src.anchor;
    cfg.validate().map_err(|e| failed(s, e))?;
    let strategies = ex.strategies.clone().unwrap_or_else(|| StrategyKind::ALL.to_vec());
    let plot_channel = ex
        .plot_channel
        .as_deref()
        .and_then(|n| CHART_CHANNEL_NAMES.iter().position(|c| *c == n))
        .unwrap_or(7);
    Ok(StrategySetup {
        source,
        config: cfg,
        initial,
        strategies,
        plot_channel,
    })
}

fn strategy_compare(s: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<Value, HarnessError> {
    let StrategySetup {
        source: base_source,
        config: mut cfg,
        initial,
        strategies,
        plot_channel: channel,
    } = strategy_setup(s)?;
    cfg.capture_qps = opts.dump_qp;

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut per_strategy: Vec<Vec<RunResult>> = vec![Vec::new(); strategies.len()];
    for (si, &seed) in s.seeds.iter().enumerate() {
        let source = base_source.with_seed(seed);
        for (k, &strategy) in strategies.iter().enumerate() {
            let res = run_strategy(strategy, &source, &cfg, &initial).map_err(|e| failed(s, e))?;
            rows.push(metric_row(seed, &res));
            let mut m = serde_json::to_value(&res.metrics).expect("serializable");
            m.as_object_mut().expect("object").insert("seed".into(), json!(seed));
            runs.push(m);
            if si == 0 {
                let name = strategy.name();
                let comment = w.prov.comment(&[seed]);
                let mut buf = Vec::new();
                write_trajectory_csv(&mut buf, &res.samples, Some(&comment)).map_err(|e| failed(s, e))?;
                w.bytes(&format!("trajectory_{name}.csv"), &buf)?;
                let jump_rows: Vec<Vec<String>> = res
                    .jumps
                    .iter()
                    .map(|j| vec![num(j.t), num(j.position), num(j.velocity)])
                    .collect();
                w.csv(&format!("jumps_{name}.csv"), &[seed], &["t", "position", "velocity"], &jump_rows)?;
                let title = format!("{} / {name} / {}", s.name(), CHART_CHANNEL_NAMES[channel]);
                w.bytes(&format!("overlay_{name}.svg"), overlay(&res, channel, &title, &comment).as_bytes())?;
                if strategy == StrategyKind::Rtg {
                    let mut buf = Vec::new();
                    write_telemetry_csv(&mut buf, &res.telemetry, Some(&comment), false)
                        .map_err(|e| HarnessError::from_io(&w.path("telemetry_rtg.csv"), e))?;
                    w.bytes("telemetry_rtg.csv", &buf)?;
                    if opts.dump_qp {
                        dump_qps(w, "qp/rtg", &res.qp_problems)?;
                    }
                }
            }
            per_strategy[k].push(res);
        }
    }
    w.csv("metrics.csv", &s.seeds, &METRIC_HEADER, &rows)?;

    let summary: Vec<Value> = strategies
        .iter()
        .zip(&per_strategy)
        .map(|(st, rs)| {
            let max = |f: &dyn Fn(&RunResult) -> f64| rs.iter().map(f).fold(0.0, f64::max);
            let mean = |f: &dyn Fn(&RunResult) -> f64| rs.iter().map(f).sum::<f64>() / rs.len() as f64;
            json!({
                "strategy": st.name(),
                "boundary_position_max": max(&|r| r.metrics.boundary_position_max),
                "boundary_velocity_max": max(&|r| r.metrics.boundary_velocity_max),
                "max_velocity_ratio": max(&|r| r.metrics.max_velocity_ratio),
                "velocity_violations": rs.iter().map(|r| r.metrics.velocity_violations).sum::<usize>(),
                "total_pause_time_mean": mean(&|r| r.metrics.total_pause_time),
                "tracking_rms_mean": mean(&|r| r.metrics.tracking_rms),
                "chunks_mean": mean(&|r| r.metrics.chunks as f64),
            })
        })
        .collect();
    w.json("metrics.json", &s.seeds, json!({ "runs": runs, "summary": summary }))
}

// ---------------------------------------------------------------------------
// repr_ablation

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn repr_ablation(s: &Scenario, w: &mut Writer) -> Result<Value, HarnessError> {
    let f = &s.file;
    let (src, ab) = (f.source.as_ref().expect("validated"), f.ablation.as_ref().expect("validated"));
    let reference = load_reference(s)?;
    let initial = reference.sample(reference.t_start()).map_err(|e| failed(s, e))?;
    let mut rows = Vec::new();
    let mut boundary: Vec<Vec<f64>> = vec![Vec::new(); ab.arms.len()];
    let mut step: Vec<Vec<f64>> = vec![Vec::new(); ab.arms.len()];
    for (si, &seed) in s.seeds.iter().enumerate() {
        for (k, arm) in ab.arms.iter().enumerate() {
            let mut cfg = source_config(Arc::clone(&reference), src);
            cfg.repr = arm.repr;
            cfg.noise = NoiseConfig::uniform(arm.noise_mode, arm.sigma);
            cfg.latency = LatencyModel::Constant { t1: 0.0 };
            cfg.seed = seed;
            let source = ChunkSource::new(cfg).map_err(|e| failed(s, e))?;
            let (frames, bounds) =
                concatenate_chunks(&source, src.anchor, &initial, ab.horizon, ab.chunks).map_err(|e| failed(s, e))?;
            let stats = trajectory_stats(&frames, &bounds).map_err(|e| failed(s, e))?;
            let (st, bd) = stats.aggregate_uniform();
            let bd = bd.expect("boundaries present");
            rows.push(vec![
                seed.to_string(),
                arm.name.clone(),
                arm.repr.name().into(),
                format!("{:?}", arm.noise_mode).to_lowercase(),
                num(arm.sigma),
                num(st),
                num(bd),
            ]);
            boundary[k].push(bd);
            step[k].push(st);
            if si == 0 {
                let timed: Vec<(f64, WholeBodyAction)> =
                    frames.iter().enumerate().map(|(i, a)| (i as f64 * src.dt, *a)).collect();
                let mut buf = Vec::new();
                write_trajectory_csv(&mut buf, &timed, Some(&w.prov.comment(&[seed]))).map_err(|e| failed(s, e))?;
                w.bytes(&format!("concatenated_{}.csv", arm.name), &buf)?;
            }
        }
    }
    w.csv(
        "ablation.csv",
        &s.seeds,
        &["seed", "arm", "repr", "noise_mode", "sigma", "mean_step_change", "mean_boundary_change"],
        &rows,
    )?;
    let last = median(&mut boundary.last().expect("two arms").clone());
    let arms: Vec<Value> = ab
        .arms
        .iter()
        .enumerate()
        .map(|(k, arm)| {
            let mb = median(&mut boundary[k].clone());
            json!({
                "name": arm.name,
                "repr": arm.repr.name(),
                "sigma": arm.sigma,
                "median_boundary_change": mb,
                "median_step_change": median(&mut step[k].clone()),
                "boundary_ratio_to_last": mb / last,
            })
        })
        .collect();
    w.json("ablation.json", &s.seeds, json!({ "arms": arms }))
}

// ---------------------------------------------------------------------------
// repr_roundtrip

fn gaussian3(rng: &mut impl rand::Rng, scale: f64) -> Vector3<f64> {
    let mut g = || -> f64 { StandardNormal.sample(&mut *rng) };
    Vector3::new(g(), g(), g()) * scale
}

/// A whole-body random walk of `steps` frames.
pub(crate) fn random_walk(seed: u64, index: u64, steps: usize, dp: f64, dr: f64) -> Vec<WholeBodyAction> {
    let mut rng = trial_rng(seed, index);
    let mut a = WholeBodyAction {
        base: PlanarPose::new(0.0, 0.0, 0.0),
        torso: [0.0; 4],
        ee_left: Pose::new(Vector3::new(0.6, 0.2, 1.2), so3_exp(&gaussian3(&mut rng, 0.5))),
        ee_right: Pose::new(Vector3::new(0.6, -0.2, 1.2), so3_exp(&gaussian3(&mut rng, 0.5))),
        grip_left: 0.5,
        grip_right: 0.5,
        head: [0.0; 2],
    };
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(a);
        let b = gaussian3(&mut rng, dp);
        let yaw = a.base.yaw + gaussian3(&mut rng, dr).x;
        a.base = PlanarPose::new(a.base.x + b.x, a.base.y + b.y, wrap_angle(yaw));
        for (i, v) in gaussian3(&mut rng, dr).iter().chain(gaussian3(&mut rng, dr).iter()).enumerate() {
            if i < 4 {
                a.torso[i] += v;
            } else {
                a.head[i - 4] += v;
            }
        }
        for ee in [&mut a.ee_left, &mut a.ee_right] {
            let p = ee.p + gaussian3(&mut rng, dp);
            let r = ee.r.compose(&so3_exp(&gaussian3(&mut rng, dr))).renormalized();
            *ee = Pose::new(p, r);
        }
        let g = gaussian3(&mut rng, 1.0);
        a.grip_left = (a.grip_left + 0.05 * g.x).clamp(0.0, 1.0);
        a.grip_right = (a.grip_right + 0.05 * g.y).clamp(0.0, 1.0);
    }
    out
}

/// Largest difference between two whole-body frames: positions and scalars
/// absolutely, rotations by geodesic angle, yaw wrapped.
pub(crate) fn frame_error(a: &WholeBodyAction, b: &WholeBodyAction) -> f64 {
    let mut e = (a.base.x - b.base.x)
        .abs()
        .max((a.base.y - b.base.y).abs())
        .max(wrap_angle(a.base.yaw - b.base.yaw).abs());
    for i in 0..4 {
        e = e.max((a.torso[i] - b.torso[i]).abs());
    }
    for i in 0..2 {
        e = e.max((a.head[i] - b.head[i]).abs());
    }
    for (p, q) in [(&a.ee_left, &b.ee_left), (&a.ee_right, &b.ee_right)] {
        e = e.max((p.p - q.p).amax()).max(geodesic_angle(&p.r, &q.r));
    }
    e.max((a.grip_left - b.grip_left).abs()).max((a.grip_right - b.grip_right).abs())
}

fn pose_diff(a: &Pose, b: &Pose) -> f64 {
    (a.p - b.p).amax().max((a.r.matrix() - b.r.matrix()).amax())
}

fn repr_roundtrip(s: &Scenario, w: &mut Writer) -> Result<Value, HarnessError> {
    let r = s.file.roundtrip.as_ref().expect("validated");
    let mut rows = Vec::new();
    let mut worst = [0.0f64; 3];
    let mut offset_worst = 0.0f64;
    let mut compact = [0.0f64; 3];
    for &seed in &s.seeds {
        for k in 0..r.trajectories {
            let traj = random_walk(seed, k as u64, r.steps, r.step_position, r.step_rotation);
            for (ti, tag) in ReprTag::ALL.iter().enumerate() {
                let enc = encode_frames(&traj, *tag, r.anchor).map_err(|e| failed(s, e))?;
                let dec = decode_frames(&traj[0], &enc, *tag, r.anchor).map_err(|e| failed(s, e))?;
                let err = traj.iter().zip(&dec).map(|(a, b)| frame_error(a, b)).fold(0.0, f64::max);
                worst[ti] = worst[ti].max(err);
                rows.push(vec![seed.to_string(), k.to_string(), tag.name().into(), num(err)]);
            }
        }
        // Rigidly offset copies of one end-effector path.
        let base_traj = random_walk(seed, r.trajectories as u64, r.steps, r.step_position, r.step_rotation);
        let ee: Vec<Pose> = base_traj.iter().map(|a| a.ee_left).collect();
        let d0 = to_egocentric_delta(&ee).map_err(|e| failed(s, e))?;
        let mut rng = trial_rng(seed, u64::MAX);
        let mut copies = Vec::with_capacity(r.offset_copies);
        for c in 0..r.offset_copies {
            let g = if c == 0 {
                Pose::identity()
            } else {
                Pose::new(gaussian3(&mut rng, 1.0), so3_exp(&gaussian3(&mut rng, 1.0)))
            };
            let moved: Vec<Pose> = ee.iter().map(|p| g.compose(p)).collect();
            let d = to_egocentric_delta(&moved).map_err(|e| failed(s, e))?;
            let diff = d0.iter().zip(&d).map(|(a, b)| pose_diff(a, b)).fold(0.0, f64::max);
            offset_worst = offset_worst.max(diff);
            copies.push(ArmTrajectory::fixed_base(moved));
        }
        for (ti, tag) in ReprTag::ALL.iter().enumerate() {
            let rep = repr_compactness(&copies, *tag, r.anchor).map_err(|e| failed(s, e))?;
            compact[ti] = compact[ti].max(rep.mean_variance);
        }
    }
    w.csv("roundtrip.csv", &s.seeds, &["seed", "trajectory", "repr", "max_error"], &rows)?;
    let per_repr: serde_json::Map<String, Value> =
        ReprTag::ALL.iter().zip(worst).map(|(t, e)| (t.name().to_string(), json!(e))).collect();
    let compactness: serde_json::Map<String, Value> =
        ReprTag::ALL.iter().zip(compact).map(|(t, v)| (t.name().to_string(), json!(v))).collect();
    let pass = worst.iter().all(|e| *e <= r.tolerance) && offset_worst <= r.offset_tolerance;
    w.json(
        "roundtrip.json",
        &s.seeds,
        json!({
            "steps": r.steps,
            "tolerance": r.tolerance,
            "max_roundtrip_error": per_repr,
            "offset_tolerance": r.offset_tolerance,
            "egocentric_offset_invariance_error": offset_worst,
            "offset_copies_mean_variance": compactness,
            "pass": pass,
        }),
    )
}

// ---------------------------------------------------------------------------
// error_propagation

fn error_propagation(s: &Scenario, w: &mut Writer) -> Result<Value, HarnessError> {
    let e = s.file.error_propagation.as_ref().expect("validated");
    let model = match &e.model {
        Some(rel) => {
            let path = s.resolve(rel);
            if !path.exists() {
                return Err(HarnessError::FileNotFound { path });
            }
            ChainModel::from_file(&path).map_err(|err| failed(s, err))?
        }
        None => ChainModel::whole_body(),
    };
    let arm = match e.arm {
        ArmChoice::Left => Arm::Left,
        ArmChoice::Right => Arm::Right,
    };
    let ee = model.ee_index(arm.ee_name()).map_err(|err| failed(s, err))?;
    let reference: Vec<DVector<f64>> = reference_reach(&model, arm, e.frames);
    let scopes: Vec<Vec<usize>> = e
        .scopes
        .iter()
        .map(|sc| {
            let mut j: Vec<usize> = sc.segments.iter().flat_map(|g| model.segment_joints(*g)).collect();
            j.sort_unstable();
            j.dedup();
            j
        })
        .collect();
    if let Some(i) = scopes.iter().position(Vec::is_empty) {
        return Err(failed(s, format!("scope {:?} selects no joints of the model", e.scopes[i].name)));
    }

    let mut header = vec!["seed".to_string(), "trial".to_string()];
    header.extend(e.scopes.iter().map(|sc| sc.name.clone()));
    let mut rows = Vec::new();
    let mut all: Vec<Vec<f64>> = vec![Vec::new(); scopes.len()];
    for &seed in &s.seeds {
        let per: Vec<Vec<f64>> = scopes
            .iter()
            .map(|sc| error_propagation_trials(&model, &reference, ee, e.sigma, sc, e.trials, seed))
            .collect::<Result<_, _>>()
            .map_err(|err| failed(s, err))?;
        for t in 0..e.trials {
            let mut row = vec![seed.to_string(), t.to_string()];
            row.extend(per.iter().map(|p| num(p[t])));
            rows.push(row);
        }
        for (a, p) in all.iter_mut().zip(per) {
            a.extend(p);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    w.csv("trials.csv", &s.seeds, &header_refs, &rows)?;
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    let results: Vec<Value> = e
        .scopes
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let positive = all[i].iter().zip(&all[0]).filter(|(a, b)| a > b).count();
            json!({
                "name": sc.name,
                "joints": scopes[i].len(),
                "rms_error": rms(&all[i]),
                "paired_exceeds_first_fraction": positive as f64 / all[i].len() as f64,
            })
        })
        .collect();
    w.json(
        "error_propagation.json",
        &s.seeds,
        json!({
            "model": model.name,
            "end_effector": arm.ee_name(),
            "sigma": e.sigma,
            "trials": e.trials,
            "frames": e.frames,
            "scopes": results,
        }),
    )
}

// ---------------------------------------------------------------------------
// throughput

fn throughput(s: &Scenario, w: &mut Writer) -> Result<Value, HarnessError> {
    let t = s.file.throughput.as_ref().expect("validated");
    let seed = s.seeds[0];
    let base = throughput_bench(t.chunk_len, t.channels, t.repetitions, seed).map_err(|e| failed(s, e))?;
    let mut body = json!({ "machine": machine_info(), "bench": base });
    if t.scaling {
        let doubled = throughput_bench(t.chunk_len, 2 * t.channels, t.repetitions, seed).map_err(|e| failed(s, e))?;
        let ratio = doubled.ingest_median / base.ingest_median;
        let o = body.as_object_mut().expect("object");
        o.insert("bench_doubled_channels".into(), json!(doubled));
        o.insert("doubling_median_ratio".into(), json!(ratio));
    }
    w.json("throughput.json", &s.seeds[..1], body)
}

// ---------------------------------------------------------------------------
// rtg_unit

fn rtg_unit(s: &Scenario, w: &mut Writer, opts: &RunOptions) -> Result<Value, HarnessError> {
    let f = &s.file;
    let channels = f.chunks[0].frames[0].len();
    let cfg = rtg_config(f.rtg.as_ref().expect("validated"), channels);
    let rate = cfg.control_rate;
    let v_max = cfg.v_max.clone();
    let mut engine = RtgEngine::new(cfg).map_err(|e| failed(s, e))?;
    engine.set_qp_capture(opts.dump_qp);
    let mut outcomes = Vec::new();
    for (k, c) in f.chunks.iter().enumerate() {
        let chunk = ChannelChunk::new(c.t_obs, c.dt, c.frames.clone()).map_err(|e| failed(s, e))?;
        match engine.ingest_channels(&chunk, c.arrival) {
            Ok(_) => {
                outcomes.push("accepted");
                if opts.dump_qp {
                    let qps = engine.captured_qps().to_vec();
                    dump_qps(w, &format!("qp/chunk{k:03}"), &qps)?;
                }
            }
            Err(e @ RtgError::InvalidInput(_)) => return Err(failed(s, e)),
            Err(_) => outcomes.push("rejected"),
        }
    }
    let seeds = &s.seeds[..1];
    let comment = w.prov.comment(seeds);
    let mut buf = Vec::new();
    write_telemetry_csv(&mut buf, engine.telemetry(), Some(&comment), false)
        .map_err(|e| HarnessError::from_io(&w.path("telemetry.csv"), e))?;
    w.bytes("telemetry.csv", &buf)?;

    let traj = Arc::clone(engine.trajectory());
    let mut rows = Vec::new();
    let mut max_ratio = 0.0f64;
    if let (Some(t0), Some(t1)) = (traj.t_start(), traj.t_end()) {
        let n = ((t1 - t0) * rate).round() as usize;
        let mut v = vec![0.0; channels];
        let mut r = vec![0.0; channels];
        for i in 0..=n {
            let t = t0 + i as f64 / rate;
            traj.sample_channels(t, &mut v, &mut r).map_err(|e| failed(s, e))?;
            for c in 0..channels {
                max_ratio = max_ratio.max(r[c].abs() / v_max[c]);
            }
            let mut row = vec![num(t)];
            row.extend(v.iter().map(|x| num(*x)));
            row.extend(r.iter().map(|x| num(*x)));
            rows.push(row);
        }
    }
    let mut header = vec!["t".to_string()];
    header.extend((0..channels).map(|c| format!("ch{c}")));
    header.extend((0..channels).map(|c| format!("rate{c}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    w.csv("trajectory.csv", seeds, &header_refs, &rows)?;
    let tel = engine.telemetry();
    let max_of = |g: &dyn Fn(&crate::rtg::TelemetryRecord) -> f64| tel.iter().map(g).fold(0.0, f64::max);
    w.json(
        "summary.json",
        seeds,
        json!({
            "channels": channels,
            "outcomes": outcomes,
            "segments": traj.segments().len(),
            "max_splice_position_jump": max_of(&|r| r.splice_position_jump),
            "max_splice_velocity_jump": max_of(&|r| r.splice_velocity_jump),
            "max_velocity_ratio": max_ratio,
        }),
    )
}
