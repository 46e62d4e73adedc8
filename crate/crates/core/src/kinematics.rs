//! Tree-structured kinematic model of the mobile manipulator: forward
//! kinematics, Jacobians, damped least-squares IK steps, and the Monte-Carlo
//! study of how joint noise reaches the end effectors.
//!
//! Each joint frame is `parent · origin · motion(q)`, where `motion` rotates
//! about (revolute) or translates along (prismatic) the joint axis expressed in
//! the joint frame. Jacobians are in the world frame, linear part taken at the
//! end-effector origin.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use thiserror::Error;

use crate::pose::{so3_exp, so3_log, Pose, Rotation};

/// Finite-difference step of [`numeric_jacobian`].
pub const JACOBIAN_STEP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("model file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    Prismatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BodySegment {
    Base,
    Torso,
    ArmLeft,
    ArmRight,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub segment: BodySegment,
    pub kind: JointType,
    /// Unit axis in the joint frame.
    pub axis: Vector3<f64>,
    /// Fixed transform from the parent frame.
    pub origin: Pose,
    /// Parent joint index; `None` for the world.
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndEffector {
    pub name: String,
    /// Joint the end effector is attached to.
    pub parent: usize,
    pub offset: Pose,
    /// Joint indices from the root to `parent`.
    chain: Vec<usize>,
}

impl EndEffector {
    pub fn chain(&self) -> &[usize] {
        &self.chain
    }
}

/// Arm selector for the whole-body model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub fn ee_name(&self) -> &'static str {
        match self {
            Arm::Left => "left",
            Arm::Right => "right",
        }
    }

    pub fn segment(&self) -> BodySegment {
        match self {
            Arm::Left => BodySegment::ArmLeft,
            Arm::Right => BodySegment::ArmRight,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default)]
    name: String,
    #[serde(default)]
    joint: Vec<JointSpec>,
    #[serde(default)]
    end_effector: Vec<EeSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointSpec {
    name: String,
    segment: BodySegment,
    #[serde(rename = "type")]
    kind: JointType,
    axis: [f64; 3],
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
    parent: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EeSpec {
    name: String,
    parent: String,
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

fn origin(xyz: [f64; 3], rpy: [f64; 3]) -> Pose {
    Pose::new(Vector3::from(xyz), Rotation::from_rpy(rpy[0], rpy[1], rpy[2]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainModel {
    pub name: String,
    pub joints: Vec<Joint>,
    pub end_effectors: Vec<EndEffector>,
}

impl ChainModel {
    /// Builds a model; end-effector chains are derived from the parent links.
    pub fn new(
        name: impl Into<String>,
        joints: Vec<Joint>,
        ees: Vec<(String, usize, Pose)>,
    ) -> Result<Self, KinematicsError> {
        for (i, j) in joints.iter().enumerate() {
            if ((j.axis.norm() - 1.0).abs()) > 1e-9 || !j.axis.iter().all(|v| v.is_finite()) {
                return Err(KinematicsError::InvalidInput(format!("axis of joint {:?} is not a unit vector", j.name)));
            }
            if !j.origin.is_valid() {
                return Err(KinematicsError::InvalidInput(format!("origin of joint {:?} is not a rigid transform", j.name)));
            }
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(KinematicsError::InvalidInput(format!(
                        "joint {:?} must come after its parent",
                        j.name
                    )));
                }
            }
        }
        let mut end_effectors = Vec::new();
        for (name, parent, offset) in ees {
            if parent >= joints.len() {
                return Err(KinematicsError::InvalidInput(format!("end effector {name:?} has no parent joint")));
            }
            let mut chain = vec![parent];
            while let Some(p) = joints[*chain.last().unwrap_or(&parent)].parent {
                chain.push(p);
            }
            chain.reverse();
            end_effectors.push(EndEffector {
                name,
                parent,
                offset,
                chain,
            });
        }
        Ok(ChainModel {
            name: name.into(),
            joints,
            end_effectors,
        })
    }

    pub fn from_toml_str(text: &str) -> Result<Self, KinematicsError> {
        let file: ModelFile = toml::from_str(text).map_err(|e| KinematicsError::Parse(e.to_string()))?;
        let mut joints: Vec<Joint> = Vec::with_capacity(file.joint.len());
        for (i, spec) in file.joint.into_iter().enumerate() {
            let parent = match spec.parent.as_deref() {
                None => i.checked_sub(1),
                Some("world") => None,
                Some(p) => Some(
                    joints
                        .iter()
                        .position(|j| j.name == p)
                        .ok_or_else(|| KinematicsError::Parse(format!("joint {:?}: unknown parent {p:?}", spec.name)))?,
                ),
            };
            if joints.iter().any(|j| j.name == spec.name) {
                return Err(KinematicsError::Parse(format!("duplicate joint name {:?}", spec.name)));
            }
            joints.push(Joint {
                name: spec.name,
                segment: spec.segment,
                kind: spec.kind,
                axis: Vector3::from(spec.axis),
                origin: origin(spec.xyz, spec.rpy),
                parent,
            });
        }
        let mut ees = Vec::new();
        for e in file.end_effector {
            let parent = joints
                .iter()
                .position(|j| j.name == e.parent)
                .ok_or_else(|| KinematicsError::Parse(format!("end effector {:?}: unknown parent {:?}", e.name, e.parent)))?;
            ees.push((e.name, parent, origin(e.xyz, e.rpy)));
        }
        Self::new(file.name, joints, ees)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, KinematicsError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// The shipped whole-body model.
    pub fn whole_body() -> Self {
        Self::from_toml_str(include_str!("../fixtures/models/whole_body.toml"))
            .expect("shipped whole-body model is valid")
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn ee_index(&self, name: &str) -> Result<usize, KinematicsError> {
        self.end_effectors
            .iter()
            .position(|e| e.name == name)
            .ok_or_else(|| KinematicsError::InvalidInput(format!("unknown end effector {name:?}")))
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Joint indices belonging to `segment`, in model order.
    pub fn segment_joints(&self, segment: BodySegment) -> Vec<usize> {
        (0..self.joints.len()).filter(|&i| self.joints[i].segment == segment).collect()
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.joints.len() {
            return Err(KinematicsError::InvalidInput(format!(
                "joint vector has {} entries, model has {} joints",
                q.len(),
                self.joints.len()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(KinematicsError::InvalidInput("non-finite joint value".into()));
        }
        Ok(())
    }

    fn motion(&self, j: usize, q: f64) -> Pose {
        let joint = &self.joints[j];
        match joint.kind {
            JointType::Revolute => Pose::from_rotation(so3_exp(&(joint.axis * q))),
            JointType::Prismatic => Pose::new(joint.axis * q, Rotation::identity()),
        }
    }

    /// Frames along the chain of `ee`: for each chain joint, the frame before
    /// its motion (where the axis lives), followed by the end-effector pose.
    fn chain_frames(&self, q: &DVector<f64>, ee: usize) -> (Vec<Pose>, Pose) {
        let e = &self.end_effectors[ee];
        let mut pre = Vec::with_capacity(e.chain.len());
        let mut t = Pose::identity();
        for &j in &e.chain {
            let f = t.compose(&self.joints[j].origin);
            pre.push(f);
            t = f.compose(&self.motion(j, q[j]));
        }
        (pre, t.compose(&e.offset))
    }

    /// World pose of end effector `ee` at configuration `q`.
    pub fn fk(&self, q: &DVector<f64>, ee: usize) -> Result<Pose, KinematicsError> {
        self.check_q(q)?;
        self.check_ee(ee)?;
        Ok(self.chain_frames(q, ee).1)
    }

    /// Pose of the frame after joint `upto` (inclusive) along the chain of
    /// `ee`, and the remaining transform to the end effector.
    pub fn fk_split(&self, q: &DVector<f64>, ee: usize, upto: usize) -> Result<(Pose, Pose), KinematicsError> {
        self.check_q(q)?;
        self.check_ee(ee)?;
        let e = &self.end_effectors[ee];
        let mut head = Pose::identity();
        let mut tail = Pose::identity();
        let mut past = false;
        for &j in &e.chain {
            let step = self.joints[j].origin.compose(&self.motion(j, q[j]));
            if past {
                tail = tail.compose(&step);
            } else {
                head = head.compose(&step);
            }
            if j == upto {
                past = true;
            }
        }
        Ok((head, tail.compose(&e.offset)))
    }

    fn check_ee(&self, ee: usize) -> Result<(), KinematicsError> {
        if ee >= self.end_effectors.len() {
            return Err(KinematicsError::InvalidInput(format!("end effector index {ee} out of range")));
        }
        Ok(())
    }

    /// Analytic world-frame Jacobian `[v; ω]` of end effector `ee`. Joints off
    /// the chain have zero columns.
    pub fn jacobian(&self, q: &DVector<f64>, ee: usize) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_q(q)?;
        self.check_ee(ee)?;
        let (pre, tip) = self.chain_frames(q, ee);
        let mut jm = DMatrix::zeros(6, self.joints.len());
        for (f, &j) in pre.iter().zip(&self.end_effectors[ee].chain) {
            let a = f.r.rotate(&self.joints[j].axis);
            match self.joints[j].kind {
                JointType::Revolute => {
                    let v = a.cross(&(tip.p - f.p));
                    jm.fixed_view_mut::<3, 1>(0, j).copy_from(&v);
                    jm.fixed_view_mut::<3, 1>(3, j).copy_from(&a);
                }
                JointType::Prismatic => {
                    jm.fixed_view_mut::<3, 1>(0, j).copy_from(&a);
                }
            }
        }
        Ok(jm)
    }
}

/// Convenience wrapper around [`ChainModel::fk`].
pub fn fk(model: &ChainModel, q: &DVector<f64>, ee: usize) -> Result<Pose, KinematicsError> {
    model.fk(q, ee)
}

/// Central-difference Jacobian with step [`JACOBIAN_STEP`]. Angular rows are
/// world-frame rotation vectors `vee(log(R₊ R₋ᵀ)) / 2h`.
pub fn numeric_jacobian(model: &ChainModel, q: &DVector<f64>, ee: usize) -> Result<DMatrix<f64>, KinematicsError> {
    model.check_q(q)?;
    model.check_ee(ee)?;
    let h = JACOBIAN_STEP;
    let n = model.dof();
    let mut jm = DMatrix::zeros(6, n);
    for j in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        let a = model.chain_frames(&qp, ee).1;
        let b = model.chain_frames(&qm, ee).1;
        let dp = (a.p - b.p) / (2.0 * h);
        let dw = so3_log(&a.r.compose(&b.r.inverse())) / (2.0 * h);
        jm.fixed_view_mut::<3, 1>(0, j).copy_from(&dp);
        jm.fixed_view_mut::<3, 1>(3, j).copy_from(&dw);
    }
    Ok(jm)
}

/// World-frame pose error `[p_t − p; log(R_t Rᵀ)]`.
pub fn pose_error(current: &Pose, target: &Pose) -> DVector<f64> {
    let dp = target.p - current.p;
    let dw = so3_log(&target.r.compose(&current.r.inverse()));
    DVector::from_column_slice(&[dp.x, dp.y, dp.z, dw.x, dw.y, dw.z])
}

/// One damped least-squares step `q + Jᵀ(JJᵀ + λ²I)⁻¹ e` toward `target`.
pub fn dls_ik_step(
    model: &ChainModel,
    q: &DVector<f64>,
    ee: usize,
    target: &Pose,
    damping: f64,
) -> Result<DVector<f64>, KinematicsError> {
    if !(damping > 0.0) {
        return Err(KinematicsError::InvalidInput(format!("damping must be positive, got {damping}")));
    }
    let current = model.fk(q, ee)?;
    let e = pose_error(&current, target);
    if e.iter().all(|v| *v == 0.0) {
        return Ok(q.clone());
    }
    let j = model.jacobian(q, ee)?;
    let mut m = &j * j.transpose();
    for i in 0..6 {
        m[(i, i)] += damping * damping;
    }
    let y = m
        .cholesky()
        .ok_or_else(|| KinematicsError::InvalidInput("damped normal matrix not positive definite".into()))?
        .solve(&e);
    Ok(q + j.transpose() * y)
}

/// Per-trial RNG stream derived from `(seed, trial)`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut s = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(trial.wrapping_add(1));
    s ^= s >> 31;
    ChaCha8Rng::seed_from_u64(s.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// Monte-Carlo RMS end-effector position error when Gaussian noise of
/// standard deviation `sigma` is added to the joints in `scope`.
///
/// Every trial draws noise for all joints and then masks it, so runs with
/// different scopes and the same seed are paired sample by sample. Each
/// trajectory frame gets its own draw.
pub fn error_propagation_experiment(
    model: &ChainModel,
    reference: &[DVector<f64>],
    ee: usize,
    sigma: f64,
    scope: &[usize],
    trials: usize,
    seed: u64,
) -> Result<f64, KinematicsError> {
    let per_trial = error_propagation_trials(model, reference, ee, sigma, scope, trials, seed)?;
    let ms = per_trial.iter().map(|e| e * e).sum::<f64>() / per_trial.len() as f64;
    Ok(ms.sqrt())
}

/// Per-trial RMS errors of [`error_propagation_experiment`], in trial order.
pub fn error_propagation_trials(
    model: &ChainModel,
    reference: &[DVector<f64>],
    ee: usize,
    sigma: f64,
    scope: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>, KinematicsError> {
    if !(sigma >= 0.0) || trials == 0 {
        return Err(KinematicsError::InvalidInput("need sigma >= 0 and at least one trial".into()));
    }
    if reference.is_empty() {
        return Err(KinematicsError::InvalidInput("empty reference trajectory".into()));
    }
    if let Some(&bad) = scope.iter().find(|&&j| j >= model.dof()) {
        return Err(KinematicsError::InvalidInput(format!("scope joint {bad} out of range")));
    }
    for q in reference {
        model.check_q(q)?;
    }
    model.check_ee(ee)?;
    if scope.is_empty() || sigma == 0.0 {
        return Ok(vec![0.0; trials]);
    }
    let n = model.dof();
    let mut mask = vec![0.0; n];
    for &j in scope {
        mask[j] = 1.0;
    }
    let nominal: Vec<Vector3<f64>> = reference.iter().map(|q| model.chain_frames(q, ee).1.p).collect();
    let mut noisy = DVector::zeros(n);
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial as u64);
        let mut sum = 0.0;
        for (q, p0) in reference.iter().zip(&nominal) {
            for j in 0..n {
                let z: f64 = StandardNormal.sample(&mut rng);
                noisy[j] = q[j] + sigma * mask[j] * z;
            }
            let p = model.chain_frames(&noisy, ee).1.p;
            sum += (p - p0).norm_squared();
        }
        out.push((sum / reference.len() as f64).sqrt());
    }
    Ok(out)
}

/// A smooth reaching motion on the whole-body model: arm joints sweep while
/// the torso leans, `frames` samples over one period.
pub fn reference_reach(model: &ChainModel, arm: Arm, frames: usize) -> Vec<DVector<f64>> {
    let arm_joints = model.segment_joints(arm.segment());
    let torso = model.segment_joints(BodySegment::Torso);
    (0..frames)
        .map(|i| {
            let s = i as f64 / frames.max(2).saturating_sub(1) as f64;
            let mut q = DVector::zeros(model.dof());
            let phase = std::f64::consts::PI * s;
            for (k, &j) in arm_joints.iter().enumerate() {
                q[j] = 0.3 * (phase + 0.4 * k as f64).sin() * if k % 2 == 0 { 1.0 } else { -0.6 };
            }
            for (k, &j) in torso.iter().enumerate() {
                q[j] = 0.1 * (phase * 0.5 + k as f64).sin();
            }
            q
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn planar2() -> ChainModel {
        ChainModel::from_toml_str(include_str!("../fixtures/models/planar_2link.toml")).unwrap()
    }

    fn planar1() -> ChainModel {
        ChainModel::from_toml_str(include_str!("../fixtures/models/planar_1link.toml")).unwrap()
    }

    #[test]
    fn planar_two_link_positions() {
        let m = planar2();
        let p = m.fk(&DVector::from_vec(vec![0.0, 0.0]), 0).unwrap().p;
        assert!((p - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-12);
        let p = m.fk(&DVector::from_vec(vec![FRAC_PI_2, 0.0]), 0).unwrap().p;
        assert!((p - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn one_link_jacobian_columns() {
        let m = planar1();
        let q = DVector::from_vec(vec![0.0]);
        let j = numeric_jacobian(&m, &q, 0).unwrap();
        let expect = [0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        for i in 0..6 {
            assert!((j[(i, 0)] - expect[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn prismatic_joint_has_no_angular_column() {
        let joint = Joint {
            name: "slide".into(),
            segment: BodySegment::Base,
            kind: JointType::Prismatic,
            axis: Vector3::new(0.0, 0.6, 0.8),
            origin: Pose::identity(),
            parent: None,
        };
        let m = ChainModel::new("slide", vec![joint], vec![("tool".into(), 0, Pose::from_translation(0.0, 0.0, 1.0))])
            .unwrap();
        let j = numeric_jacobian(&m, &DVector::from_vec(vec![0.3]), 0).unwrap();
        for i in 3..6 {
            assert!(j[(i, 0)].abs() < 1e-12);
        }
        assert!((j[(1, 0)] - 0.6).abs() < 1e-8 && (j[(2, 0)] - 0.8).abs() < 1e-8);
    }

    #[test]
    fn whole_body_home_pose() {
        let m = ChainModel::whole_body();
        assert_eq!(m.dof(), 3 + 4 + 7 + 7 + 2);
        let q = DVector::zeros(m.dof());
        let l = m.fk(&q, m.ee_index("left").unwrap()).unwrap();
        let r = m.fk(&q, m.ee_index("right").unwrap()).unwrap();
        assert!((l.p - Vector3::new(0.65, 0.22, 1.40)).norm() < 1e-12);
        assert!((r.p - Vector3::new(0.65, -0.22, 1.40)).norm() < 1e-12);
        assert!(l.r.orthonormality_residual() < 1e-12);
    }

    #[test]
    fn dls_step_on_one_link() {
        let m = planar1();
        let q = DVector::from_vec(vec![0.0]);
        let target = m.fk(&DVector::from_vec(vec![0.1]), 0).unwrap();
        let q1 = dls_ik_step(&m, &q, 0, &target, 1e-3).unwrap();
        assert!((q1[0] - 0.1).abs() < 1e-3);
        let here = m.fk(&q, 0).unwrap();
        assert_eq!(dls_ik_step(&m, &q, 0, &here, 1e-3).unwrap(), q);
    }

    #[test]
    fn empty_scope_and_zero_sigma_give_zero() {
        let m = ChainModel::whole_body();
        let refq = reference_reach(&m, Arm::Left, 4);
        let ee = m.ee_index("left").unwrap();
        assert_eq!(error_propagation_experiment(&m, &refq, ee, 0.01, &[], 10, 1).unwrap(), 0.0);
        assert_eq!(error_propagation_experiment(&m, &refq, ee, 0.0, &[0, 1], 10, 1).unwrap(), 0.0);
    }

    #[test]
    fn model_file_errors() {
        assert!(matches!(
            ChainModel::from_toml_str("[[joint]]\nname = \"a\"\nsegment = \"base\"\ntype = \"revolute\"\naxis = [0.0, 0.0, 2.0]\n"),
            Err(KinematicsError::InvalidInput(_))
        ));
        assert!(matches!(
            ChainModel::from_toml_str("[[joint]]\nname = \"a\"\nsegment = \"base\"\ntype = \"twist\"\naxis = [0.0, 0.0, 1.0]\n"),
            Err(KinematicsError::Parse(_))
        ));
    }
}
