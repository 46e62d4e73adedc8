//! Real-time blending of policy action chunks into smooth, velocity-bounded
//! trajectories, plus the supporting whole-body kinematics, chunk-execution
//! simulator and experiment harness.

pub mod action;
pub mod diffusion;
pub mod exec;
pub mod harness;
pub mod kinematics;
pub mod policy;
pub mod pose;
pub mod qp;
pub mod rtg;
