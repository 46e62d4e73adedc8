//! End-to-end acceptance checks. Each criterion prints one `PASS` or `FAIL`
//! line on stdout; the test fails if any criterion fails.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::{dual_pg_oracle, random_qp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rtg_core::action::{
    decode_frames, encode_frames, to_egocentric_delta, PlanarPose, ReprTag, RobotFrameAnchor, WholeBodyAction,
};
use rtg_core::diffusion::{forward_noise, reconstruct, NoiseSchedule};
use rtg_core::exec::{run, RunResult, StrategyKind};
use rtg_core::harness::{run_loaded, strategy_setup, throughput_bench, RunOptions, Scenario};
use rtg_core::pose::{geodesic_angle, so3_exp, Pose};
use rtg_core::qp::{self, kkt_residuals, QpStatus};
use serde_json::Value;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.toml"))
}

fn load(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).expect("shipped scenario loads")
}

fn run_into(s: &Scenario, dir: &Path) -> Value {
    let opts = RunOptions {
        out_dir: Some(dir.to_path_buf()),
        ..RunOptions::default()
    };
    run_loaded(s, &opts).expect("scenario runs").report
}

fn qp_correctness() -> Outcome {
    let start = Instant::now();
    let (mut worst_x, mut worst_kkt, mut unsolved) = (0.0f64, 0.0f64, 0);
    for seed in 0..100 {
        let p = random_qp(seed);
        let sol = qp::solve(&p, 1e-9, 1e-9, 20_000).unwrap();
        unsolved += usize::from(sol.status != QpStatus::Solved);
        let (xo, _) = dual_pg_oracle(&p);
        worst_x = worst_x.max((&sol.x - &xo).amax());
        let r = kkt_residuals(&p, &sol.x, &sol.y).unwrap();
        worst_kkt = worst_kkt.max(r.primal).max(r.dual).max(r.complementarity);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        unsolved == 0 && worst_x <= 1e-5 && worst_kkt <= 1e-6 && secs < 5.0,
        format!("max |x - x_oracle| {worst_x:.2e}, max KKT residual {worst_kkt:.2e}, unsolved {unsolved}, {secs:.2} s"),
    )
}

/// All strategies of the comparison scenario over its seeds.
struct Comparison {
    v_max: Vec<f64>,
    dt: f64,
    sigma: f64,
    runs: HashMap<StrategyKind, Vec<RunResult>>,
}

fn comparison() -> Comparison {
    let s = load("fig9_compare");
    let setup = strategy_setup(&s).unwrap();
    let mut runs: HashMap<StrategyKind, Vec<RunResult>> = HashMap::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = s
            .seeds
            .iter()
            .map(|&seed| {
                let setup = &setup;
                scope.spawn(move || {
                    let src = setup.source.with_seed(seed);
                    setup
                        .strategies
                        .iter()
                        .map(|&k| run(k, &src, &setup.config, &setup.initial).unwrap())
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for r in h.join().unwrap() {
                runs.entry(r.strategy).or_default().push(r);
            }
        }
    });
    let sigma = s.file.source.as_ref().and_then(|src| src.sigma.as_ref()).map_or(0.0, |g| {
        g.expand(1, Some(0.0)).unwrap()[0]
    });
    Comparison {
        v_max: setup.config.rtg.v_max.clone(),
        dt: 1.0 / setup.config.control_rate,
        sigma,
        runs,
    }
}

fn velocity_bound(c: &Comparison) -> Outcome {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_ratio = 0.0f64;
    for r in &c.runs[&StrategyKind::Rtg] {
        for w in r.channels.windows(2) {
            for (ch, vm) in c.v_max.iter().enumerate() {
                let v = (w[1][ch] - w[0][ch]).abs() / c.dt;
                worst_excess = worst_excess.max(v - vm);
                worst_ratio = worst_ratio.max(v / vm);
            }
        }
    }
    outcome(
        worst_excess <= 1e-9,
        format!("largest finite-difference speed / v_max {worst_ratio:.6}, worst excess {worst_excess:.2e}"),
    )
}

fn splice_continuity(c: &Comparison) -> Outcome {
    let rtg = &c.runs[&StrategyKind::Rtg];
    let transitions: usize = rtg.iter().map(|r| r.jumps.len()).sum();
    let fewest = rtg.iter().map(|r| r.jumps.len()).min().unwrap_or(0);
    let pos = rtg.iter().flat_map(|r| &r.jumps).map(|j| j.position).fold(0.0, f64::max);
    let vel = rtg.iter().flat_map(|r| &r.jumps).map(|j| j.velocity).fold(0.0, f64::max);
    let tele_pos = rtg
        .iter()
        .flat_map(|r| &r.telemetry)
        .map(|t| t.splice_position_jump)
        .fold(0.0, f64::max);
    let tele_vel = rtg
        .iter()
        .flat_map(|r| &r.telemetry)
        .map(|t| t.splice_velocity_jump)
        .fold(0.0, f64::max);
    let naive = c.runs[&StrategyKind::AsyncNaive]
        .iter()
        .map(|r| r.metrics.boundary_position_max)
        .fold(0.0, f64::max);
    let floor = 1e-6;
    let pass = fewest >= 50 && pos.max(tele_pos) <= 1e-6 && vel.max(tele_vel) <= 1e-6 && naive >= 10.0 * floor;
    outcome(
        pass,
        format!(
            "{transitions} rtg transitions (fewest per seed {fewest}), max jump position {:.2e} velocity {:.2e}; \
             async_naive max jump {naive:.4} = {:.2e} x continuity tolerance, {:.2} x per-chunk sigma {}",
            pos.max(tele_pos),
            vel.max(tele_vel),
            naive / floor,
            naive / c.sigma,
            c.sigma
        ),
    )
}

fn strategy_ordering(c: &Comparison) -> Outcome {
    let max_jump = |k: StrategyKind| c.runs[&k].iter().map(|r| r.metrics.boundary_position_max).fold(0.0, f64::max);
    let (rtg, fusion, naive) = (
        max_jump(StrategyKind::Rtg),
        max_jump(StrategyKind::AsyncHistoryFusion),
        max_jump(StrategyKind::AsyncNaive),
    );
    let mut pause_err = 0.0f64;
    for r in &c.runs[&StrategyKind::Synchronous] {
        let expected: f64 = r.events.iter().skip(1).map(|e| e.t1).sum();
        pause_err = pause_err.max((r.metrics.total_pause_time - expected).abs());
    }
    let rtg_pause = c.runs[&StrategyKind::Rtg]
        .iter()
        .map(|r| r.metrics.total_pause_time)
        .fold(0.0, f64::max);
    outcome(
        rtg < fusion && fusion < naive && pause_err <= c.dt && rtg_pause == 0.0,
        format!(
            "max jump rtg {rtg:.2e} < fusion {fusion:.4} < naive {naive:.4}; \
             synchronous pause error {pause_err:.2e} s (tick {}), rtg pause {rtg_pause} s",
            c.dt
        ),
    )
}

fn repr_smoothness(dir: &Path) -> Outcome {
    let report = run_into(&load("repr_ablation"), dir);
    let arms = report["arms"].as_array().unwrap();
    let abs = arms[0]["median_boundary_change"].as_f64().unwrap();
    let ego = arms[1]["median_boundary_change"].as_f64().unwrap();
    outcome(
        abs >= 3.0 * ego,
        format!("median boundary change absolute {abs:.5} vs egocentric delta {ego:.5}, ratio {:.2}", abs / ego),
    )
}

fn error_propagation(dir: &Path) -> Outcome {
    let report = run_into(&load("error_propagation"), dir);
    let scopes = report["scopes"].as_array().unwrap();
    let arm = scopes.iter().find(|s| s["name"] == "arm_only").unwrap();
    let all = scopes.iter().find(|s| s["name"] == "base_torso_arm").unwrap();
    let (ra, rb) = (arm["rms_error"].as_f64().unwrap(), all["rms_error"].as_f64().unwrap());
    let frac = all["paired_exceeds_first_fraction"].as_f64().unwrap();
    outcome(
        rb > ra && frac >= 0.95,
        format!("rms arm only {ra:.5} m, base+torso+arm {rb:.5} m, paired fraction {frac:.3}"),
    )
}

fn pose_gap(a: &Pose, b: &Pose) -> f64 {
    (a.p - b.p).amax().max(geodesic_angle(&a.r, &b.r))
}

fn round_trips(dir: &Path) -> Outcome {
    let report = run_into(&load("repr_roundtrip"), dir);
    let harness_err = report["max_roundtrip_error"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_f64().unwrap())
        .fold(0.0, f64::max);
    let harness_offset = report["egocentric_offset_invariance_error"].as_f64().unwrap();

    // A second, independent walk through the public encoders.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut jitter = |s: f64| so3_exp(&nalgebra::Vector3::from_fn(|_, _| rng.random_range(-s..s)));
    let mut a = WholeBodyAction {
        base: PlanarPose::new(0.3, -0.2, 0.4),
        torso: [0.0; 4],
        ee_left: Pose::new(nalgebra::Vector3::new(0.5, 0.3, 1.0), jitter(1.0)),
        ee_right: Pose::new(nalgebra::Vector3::new(0.5, -0.3, 1.0), jitter(1.0)),
        grip_left: 0.2,
        grip_right: 0.8,
        head: [0.0; 2],
    };
    let mut frames = Vec::with_capacity(500);
    for k in 0..500 {
        let s = k as f64 * 0.01;
        a.base = PlanarPose::new(0.3 + 0.2 * s.sin(), -0.2 + 0.1 * s, 0.4 + 0.3 * s.cos());
        a.ee_left = a.ee_left.compose(&Pose::new(nalgebra::Vector3::new(0.004, -0.003, 0.002), jitter(0.02)));
        a.ee_right = a.ee_right.compose(&Pose::new(nalgebra::Vector3::new(-0.002, 0.003, 0.001), jitter(0.02)));
        frames.push(a);
    }
    let mut own = 0.0f64;
    for repr in ReprTag::ALL {
        for anchor in [RobotFrameAnchor::InstantaneousBase, RobotFrameAnchor::EpisodeStartBase] {
            let enc = encode_frames(&frames, repr, anchor).unwrap();
            let dec = decode_frames(&frames[0], &enc, repr, anchor).unwrap();
            for (x, y) in frames.iter().zip(&dec) {
                own = own.max(pose_gap(&x.ee_left, &y.ee_left)).max(pose_gap(&x.ee_right, &y.ee_right));
                own = own.max((x.base.x - y.base.x).abs()).max((x.base.yaw - y.base.yaw).abs());
            }
        }
    }
    let ee: Vec<Pose> = frames.iter().map(|f| f.ee_left).collect();
    let g = Pose::new(nalgebra::Vector3::new(3.0, -1.0, 0.5), so3_exp(&nalgebra::Vector3::new(0.4, 1.1, -2.0)));
    let moved: Vec<Pose> = ee.iter().map(|p| g.compose(p)).collect();
    let d0 = to_egocentric_delta(&ee).unwrap();
    let d1 = to_egocentric_delta(&moved).unwrap();
    let own_offset = d0.iter().zip(&d1).map(|(x, y)| (x.p - y.p).amax().max((x.r.matrix() - y.r.matrix()).amax())).fold(0.0, f64::max);

    let rt = harness_err.max(own);
    let off = harness_offset.max(own_offset);
    outcome(
        rt <= 1e-8 && off <= 1e-9,
        format!("max round-trip error {rt:.2e}, egocentric offset invariance error {off:.2e}"),
    )
}

fn diffusion_math() -> Outcome {
    let s = NoiseSchedule::linear_default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let mut rt = 0.0f64;
    for t in [1, 10, 100, 500, 999, 1000] {
        let x: Vec<f64> = (0..64).map(|_| 3.0 * normal()).collect();
        let eps: Vec<f64> = (0..64).map(|_| normal()).collect();
        let back = reconstruct(&forward_noise(&x, t, &eps, &s).unwrap(), t, &eps, &s).unwrap();
        rt = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(rt, f64::max);
    }

    let n = 1_000_000;
    let mut var_err = 0.0f64;
    for t in [1, 250, 500, 1000] {
        let x: Vec<f64> = (0..n).map(|_| normal()).collect();
        let eps: Vec<f64> = (0..n).map(|_| normal()).collect();
        let z = forward_noise(&x, t, &eps, &s).unwrap();
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var_err = var_err.max((var - 1.0).abs());
    }

    let ab = s.alpha_bars();
    let mut product = 1.0;
    let mut invariants = ab.len() == 1000;
    for t in 1..=1000 {
        product *= s.alpha(t).unwrap();
        invariants &= (ab[t - 1] - product).abs() <= 1e-15 && (t == 1 || ab[t - 1] <= ab[t - 2]);
    }
    let tail = ab[999].sqrt();
    invariants &= tail < 0.05;
    outcome(
        rt <= 1e-12 && var_err <= 0.01 && invariants,
        format!(
            "round trip {rt:.2e}, worst relative variance error {var_err:.4} at 1e6 samples, \
             alpha-bar invariants {}, sqrt(alpha_bar_T) {tail:.4}",
            if invariants { "hold" } else { "violated" }
        ),
    )
}

fn throughput() -> Outcome {
    let b = throughput_bench(32, 20, 1000, 0).unwrap();
    outcome(
        b.ingest_median <= 5e-3 && b.sample_p99 <= 50e-6,
        format!(
            "ingest median {:.3} ms (p99 {:.3} ms), sample p99 {:.2} us over {} samples",
            b.ingest_median * 1e3,
            b.ingest_p99 * 1e3,
            b.sample_p99 * 1e6,
            b.samples
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(root: &Path) -> Outcome {
    let mut compared = 0;
    let mut differing = Vec::new();
    for name in ["fig9_compare", "repr_ablation", "repr_roundtrip", "error_propagation", "rtg_unit"] {
        let mut s = load(name);
        if name == "fig9_compare" {
            s = s.with_seed_override(Some(4));
        }
        let a = root.join(format!("{name}_a"));
        let b = root.join(format!("{name}_b"));
        run_into(&s, &a);
        run_into(&s, &b);
        let (fa, fb) = (csv_files(&a), csv_files(&b));
        compared += fa.len();
        if fa != fb || fa.is_empty() {
            differing.push(name);
        }
    }
    outcome(
        differing.is_empty(),
        format!("{compared} CSV files compared across reruns, differing scenarios {differing:?}"),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let cmp = comparison();
    let results = [
        ("1 qp correctness", qp_correctness()),
        ("2 rtg velocity bound", velocity_bound(&cmp)),
        ("3 splice continuity", splice_continuity(&cmp)),
        ("4 strategy ordering", strategy_ordering(&cmp)),
        ("5 representation smoothness", repr_smoothness(tmp.path())),
        ("6 error propagation", error_propagation(tmp.path())),
        ("7 round trips", round_trips(tmp.path())),
        ("8 diffusion math", diffusion_math()),
        ("9 throughput", throughput()),
        ("10 determinism", determinism(&tmp.path().join("rerun"))),
    ];
    let mut out = std::io::stdout().lock();
    for (name, o) in &results {
        writeln!(out, "{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail).unwrap();
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
