//! Randomized invariants of the pose, representation, kinematics, diffusion,
//! chunk-source and executor modules.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtg_core::action::{
    apply_egocentric_delta, apply_robot_delta, decode_frames, encode_frames, repr_compactness, to_egocentric_delta,
    to_robot_delta, trajectory_stats, ArmTrajectory, PlanarPose, ReprTag, RobotFrameAnchor, WholeBodyAction,
};
use rtg_core::diffusion::{forward_noise, loss_target, reconstruct, NoiseSchedule};
use rtg_core::exec::{run, ExecConfig, StrategyKind};
use rtg_core::kinematics::{
    dls_ik_step, error_propagation_experiment, numeric_jacobian, reference_reach, Arm, BodySegment, ChainModel,
};
use rtg_core::policy::{ChunkProvider, ChunkSource, ChunkSourceConfig, DenseTrajectory, LatencyModel, NoiseConfig, NoiseMode};
use rtg_core::pose::{geodesic_angle, so3_exp, so3_log, Pose, Rotation};
use rtg_core::rtg::RtgConfig;

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-2.0f64..2.0).prop_map(|a| Vector3::new(a[0], a[1], a[2]))
}

fn rotation() -> impl Strategy<Value = Rotation> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..PI).prop_map(|(a, angle)| {
        let v = Vector3::new(a[0], a[1], a[2]);
        let axis = if v.norm() < 1e-3 { Vector3::z() } else { v.normalize() };
        Rotation::from_axis_angle(&axis, angle)
    })
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(), rotation()).prop_map(|(p, r)| Pose::new(p, r))
}

fn pose_distance(a: &Pose, b: &Pose) -> f64 {
    (a.p - b.p).norm().max(geodesic_angle(&a.r, &b.r))
}

fn frame_distance(a: &WholeBodyAction, b: &WholeBodyAction) -> f64 {
    let scalars = [
        a.base.x - b.base.x,
        a.base.y - b.base.y,
        a.base.yaw - b.base.yaw,
        a.grip_left - b.grip_left,
        a.grip_right - b.grip_right,
    ];
    let mut d = scalars.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..4 {
        d = d.max((a.torso[i] - b.torso[i]).abs());
    }
    for i in 0..2 {
        d = d.max((a.head[i] - b.head[i]).abs());
    }
    d.max(pose_distance(&a.ee_left, &b.ee_left)).max(pose_distance(&a.ee_right, &b.ee_right))
}

fn small_rotation(rng: &mut ChaCha8Rng, scale: f64) -> Rotation {
    so3_exp(&Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    ))
}

/// A random whole-body walk with small per-step motion.
fn walk(seed: u64, steps: usize) -> Vec<WholeBodyAction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = WholeBodyAction {
        base: PlanarPose::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-PI..PI)),
        torso: [0.1, -0.2, 0.0, 0.3],
        ee_left: Pose::new(Vector3::new(0.6, 0.2, 1.0), small_rotation(&mut rng, 2.0)),
        ee_right: Pose::new(Vector3::new(0.6, -0.2, 1.0), small_rotation(&mut rng, 2.0)),
        grip_left: 0.5,
        grip_right: 0.5,
        head: [0.0, 0.0],
    };
    let mut out = vec![a];
    for _ in 1..steps {
        a.base.x += rng.random_range(-0.01..0.01);
        a.base.y += rng.random_range(-0.01..0.01);
        a.base.yaw += rng.random_range(-0.02..0.02);
        for t in a.torso.iter_mut().chain(a.head.iter_mut()) {
            *t += rng.random_range(-0.01..0.01);
        }
        for ee in [&mut a.ee_left, &mut a.ee_right] {
            ee.p += Vector3::new(
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
            );
            ee.r = ee.r.compose(&small_rotation(&mut rng, 0.03));
        }
        a.grip_left = rng.random_range(0.0..1.0);
        a.grip_right = rng.random_range(0.0..1.0);
        out.push(a);
    }
    out
}

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compose_is_associative(a in pose(), b in pose(), c in pose()) {
        let l = a.compose(&b).compose(&c);
        let r = a.compose(&b.compose(&c));
        prop_assert!(pose_distance(&l, &r) <= 1e-9);
        prop_assert!(l.is_valid());
    }

    #[test]
    fn identity_and_inverse_laws(a in pose()) {
        prop_assert!(pose_distance(&a.compose(&Pose::identity()), &a) <= 1e-12);
        prop_assert!(pose_distance(&Pose::identity().compose(&a), &a) <= 1e-12);
        prop_assert!(pose_distance(&a.compose(&a.inverse()), &Pose::identity()) <= 1e-12);
        prop_assert!(pose_distance(&a.inverse().compose(&a), &Pose::identity()) <= 1e-12);
    }

    #[test]
    fn exp_log_are_inverse_inside_the_ball(dir in prop::array::uniform3(-1.0f64..1.0), angle in 0.0f64..(PI - 1e-6)) {
        let v = Vector3::new(dir[0], dir[1], dir[2]);
        prop_assume!(v.norm() > 1e-3);
        let w = v.normalize() * angle;
        prop_assert!((so3_log(&so3_exp(&w)) - w).norm() <= 1e-9);
    }

    #[test]
    fn log_exp_recovers_rotations(r in rotation()) {
        let back = so3_exp(&so3_log(&r));
        prop_assert!((back.matrix() - r.matrix()).amax() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn representations_round_trip(seed in any::<u64>(), steps in 2usize..=500) {
        let abs = walk(seed, steps);
        for repr in ReprTag::ALL {
            for anchor in [RobotFrameAnchor::InstantaneousBase, RobotFrameAnchor::EpisodeStartBase] {
                let enc = encode_frames(&abs, repr, anchor).unwrap();
                let dec = decode_frames(&abs[0], &enc, repr, anchor).unwrap();
                prop_assert_eq!(dec.len(), abs.len());
                let err = abs.iter().zip(&dec).map(|(a, b)| frame_distance(a, b)).fold(0.0, f64::max);
                prop_assert!(err <= 1e-8, "{} {:?}: {}", repr.name(), anchor, err);
            }
        }
    }

    #[test]
    fn pose_deltas_round_trip(seed in any::<u64>()) {
        let abs = walk(seed, 500);
        let ee: Vec<Pose> = abs.iter().map(|a| a.ee_left).collect();
        let base: Vec<Pose> = abs.iter().map(|a| a.base.to_pose()).collect();
        let ego = apply_egocentric_delta(&ee[0], &to_egocentric_delta(&ee).unwrap());
        let anchor = RobotFrameAnchor::InstantaneousBase;
        let rob = apply_robot_delta(&ee[0], &to_robot_delta(&ee, &base, anchor).unwrap(), &base, anchor).unwrap();
        for k in 0..ee.len() {
            prop_assert!(pose_distance(&ego[k], &ee[k]) <= 1e-8);
            prop_assert!(pose_distance(&rob[k], &ee[k]) <= 1e-8);
        }
    }

    #[test]
    fn egocentric_deltas_ignore_rigid_offsets(seed in any::<u64>(), g in pose()) {
        let ee: Vec<Pose> = walk(seed, 200).iter().map(|a| a.ee_right).collect();
        let moved: Vec<Pose> = ee.iter().map(|t| g.compose(t)).collect();
        let d0 = to_egocentric_delta(&ee).unwrap();
        let d1 = to_egocentric_delta(&moved).unwrap();
        for (a, b) in d0.iter().zip(&d1) {
            prop_assert!((a.p - b.p).amax() <= 1e-9);
            prop_assert!((a.r.matrix() - b.r.matrix()).amax() <= 1e-9);
        }
    }

    #[test]
    fn offset_copies_have_zero_egocentric_variance(seed in any::<u64>(), g in pose(), h in pose()) {
        let ee: Vec<Pose> = walk(seed, 50).iter().map(|a| a.ee_left).collect();
        let copies: Vec<ArmTrajectory> = [Pose::identity(), g, h]
            .iter()
            .map(|o| ArmTrajectory::fixed_base(ee.iter().map(|t| o.compose(t)).collect()))
            .collect();
        let rep = repr_compactness(&copies, ReprTag::EgocentricDelta, RobotFrameAnchor::default()).unwrap();
        prop_assert!(rep.mean_variance <= 1e-24, "{}", rep.mean_variance);
        let abs = repr_compactness(&copies, ReprTag::AbsoluteWorld, RobotFrameAnchor::default()).unwrap();
        prop_assert!(abs.mean_variance >= rep.mean_variance);
    }

    #[test]
    fn trajectory_stats_survive_round_trips(seed in any::<u64>()) {
        let abs = walk(seed, 120);
        let bounds = [30, 60, 90];
        let s0 = trajectory_stats(&abs, &bounds).unwrap();
        for repr in ReprTag::ALL {
            let anchor = RobotFrameAnchor::default();
            let dec = decode_frames(&abs[0], &encode_frames(&abs, repr, anchor).unwrap(), repr, anchor).unwrap();
            let s1 = trajectory_stats(&dec, &bounds).unwrap();
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-8);
            prop_assert!(close(&s0.mean_step_change, &s1.mean_step_change));
            prop_assert!(close(&s0.variance, &s1.variance));
            prop_assert!(close(
                s0.mean_boundary_change.as_deref().unwrap(),
                s1.mean_boundary_change.as_deref().unwrap()
            ));
        }
    }
}

fn random_q(model: &ChainModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(model.dof(), |_, _| rng.random_range(-1.2..1.2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fk_composes_over_any_split(seed in any::<u64>()) {
        let m = ChainModel::whole_body();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(&m, &mut rng);
        for ee in 0..2 {
            let full = m.fk(&q, ee).unwrap();
            let chain = m.end_effector_chain(ee);
            for &j in &chain {
                let (head, tail) = m.fk_split(&q, ee, j).unwrap();
                prop_assert!(pose_distance(&head.compose(&tail), &full) <= 1e-12);
            }
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences(seed in any::<u64>()) {
        let m = ChainModel::whole_body();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_q(&m, &mut rng);
        for ee in 0..2 {
            let a = m.jacobian(&q, ee).unwrap();
            let n = numeric_jacobian(&m, &q, ee).unwrap();
            prop_assert!((a - n).amax() <= 1e-5);
        }
    }
}

trait ChainOf {
    fn end_effector_chain(&self, ee: usize) -> Vec<usize>;
}

impl ChainOf for ChainModel {
    /// Joints on the path to `ee`: the ones with a nonzero Jacobian column at
    /// a generic configuration.
    fn end_effector_chain(&self, ee: usize) -> Vec<usize> {
        let q = DVector::from_fn(self.dof(), |i, _| 0.1 + 0.01 * i as f64);
        let j = self.jacobian(&q, ee).unwrap();
        (0..self.dof()).filter(|&c| j.column(c).amax() > 0.0).collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn error_grows_with_noise_scope(seed in any::<u64>(), sigma in 0.001f64..0.05) {
        let m = ChainModel::whole_body();
        let ee = m.ee_index(Arm::Left.ee_name()).unwrap();
        let reference = reference_reach(&m, Arm::Left, 8);
        let arm = m.segment_joints(BodySegment::ArmLeft);
        let mut torso_arm = m.segment_joints(BodySegment::Torso);
        torso_arm.extend(&arm);
        let mut all = m.segment_joints(BodySegment::Base);
        all.extend(&torso_arm);
        let e = |scope: &[usize]| error_propagation_experiment(&m, &reference, ee, sigma, scope, 100, seed).unwrap();
        let (e1, e2, e3) = (e(&arm), e(&torso_arm), e(&all));
        prop_assert!(e1 <= e2 && e2 <= e3, "{e1} {e2} {e3}");
    }

    #[test]
    fn dls_reaches_nearby_targets(seed in any::<u64>()) {
        let m = ChainModel::whole_body();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ee = rng.random_range(0..2usize);
        let mut q = random_q(&m, &mut rng) * 0.5;
        let start = m.fk(&q, ee).unwrap();
        let mut dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if dir.norm() < 1e-3 {
            dir = Vector3::x();
        }
        let target = Pose::new(start.p + dir.normalize() * rng.random_range(0.0..0.05), start.r);
        for _ in 0..100 {
            q = dls_ik_step(&m, &q, ee, &target, 1e-3).unwrap();
        }
        prop_assert!((m.fk(&q, ee).unwrap().p - target.p).norm() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_noise_round_trips_at_every_step(
        t in 1usize..=1000,
        x in prop::collection::vec(-3.0f64..3.0, 1..32),
        seed in any::<u64>(),
    ) {
        let s = NoiseSchedule::linear_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = x.iter().map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let z = forward_noise(&x, t, &eps, &s).unwrap();
        let back = reconstruct(&z, t, &eps, &s).unwrap();
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        prop_assert_eq!(loss_target(&eps, &eps).unwrap(), 0.0);
    }

    #[test]
    fn linear_schedules_keep_alpha_bar_invariants(b0 in 1e-5f64..0.01, b1 in 0.01f64..0.05, steps in 1usize..2000) {
        let s = NoiseSchedule::linear(b0, b1, steps).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab[0], s.alpha(1).unwrap());
        for t in 2..=steps {
            prop_assert_eq!(ab[t - 1], ab[t - 2] * s.alpha(t).unwrap());
            prop_assert!(ab[t - 1] <= ab[t - 2]);
            prop_assert!(ab[t - 1] > 0.0);
        }
    }
}

#[test]
fn default_schedule_ends_noise_dominated() {
    let s = NoiseSchedule::linear_default();
    assert_eq!(s.steps(), 1000);
    assert!(s.alpha_bar(1000).unwrap().sqrt() < 0.05);
}

fn reference() -> Arc<DenseTrajectory> {
    Arc::new(DenseTrajectory::from_csv(fixture("reference/tabletop_reach.csv")).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chunk_source_is_a_function_of_seed_and_time(seed in any::<u64>(), t_step in 0usize..40, per_step in any::<bool>()) {
        let mut cfg = ChunkSourceConfig::new(reference());
        let mode = if per_step { NoiseMode::PerStep } else { NoiseMode::PerChunkOffset };
        cfg.noise = NoiseConfig::uniform(mode, 0.02);
        cfg.latency = LatencyModel::Uniform { lo: 0.1, hi: 0.2 };
        cfg.seed = seed;
        let src = ChunkSource::new(cfg).unwrap();
        let t_obs = 0.1 * t_step as f64;
        let (a, la) = src.next_chunk(t_obs).unwrap();
        let (b, lb) = src.clone().next_chunk(t_obs).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        prop_assert!((0.1..=0.2).contains(&la));
        let (c, _) = src.with_seed(seed.wrapping_add(1)).next_chunk(t_obs).unwrap();
        prop_assert_ne!(a, c);
    }
}

#[test]
fn executor_runs_are_deterministic() {
    let mut cfg = ChunkSourceConfig::new(reference());
    cfg.noise = NoiseConfig::uniform(NoiseMode::PerChunkOffset, 0.02);
    cfg.latency = LatencyModel::Uniform { lo: 0.12, hi: 0.16 };
    cfg.seed = 3;
    let src = ChunkSource::new(cfg).unwrap();
    let initial = src.reference_frames(0.0).unwrap()[0];
    let mut exec = ExecConfig::new(4.0, RtgConfig::uniform(23, 0.5));
    exec.sync_horizon = Some(0.5);
    for strategy in StrategyKind::ALL {
        let a = run(strategy, &src, &exec, &initial).unwrap();
        let b = run(strategy, &src, &exec, &initial).unwrap();
        assert_eq!(a.metrics, b.metrics, "{}", strategy.name());
        assert_eq!(a.samples, b.samples, "{}", strategy.name());
    }
}
