//! Rigid-body primitives: rotations stored as 3x3 matrices, poses, twists,
//! and the SO(3) exponential/logarithm maps.
//!
//! Everything here is a plain value type. Operations are pure and can be
//! called from any thread.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Matrix3, Vector3};

/// Tolerance used by the validity checks on rotation matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Above this angle `so3_log` recovers the axis from the symmetric part.
const NEAR_PI_BRANCH: f64 = PI - 1e-4;

/// A rotation in SO(3), held as an orthonormal matrix with determinant +1.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl fmt::Debug for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = &self.0;
        write!(
            f,
            "Rotation[[{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}], [{:.6}, {:.6}, {:.6}]]",
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)]
        )
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking it. Use [`Rotation::try_from_matrix`]
    /// for data that comes from outside the process.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    /// Accepts `m` if it is orthonormal with determinant +1 within
    /// [`ORTHONORMAL_TOL`].
    pub fn try_from_matrix(m: Matrix3<f64>) -> Option<Self> {
        let r = Rotation(m);
        r.is_valid().then_some(r)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        so3_exp(&(axis * (angle / n)))
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Roll-pitch-yaw (fixed-axis x, then y, then z): `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rot_z(yaw)
            .compose(&Self::rot_y(pitch))
            .compose(&Self::rot_x(roll))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn inverse(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Frobenius norm of `mᵀm − I`.
    pub fn orthonormality_residual(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).norm()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
            && self.orthonormality_residual() <= ORTHONORMAL_TOL
            && (self.0.determinant() - 1.0).abs() <= ORTHONORMAL_TOL
    }

    /// Projects back onto SO(3) (nearest rotation via polar decomposition).
    pub fn orthonormalized(&self) -> Rotation {
        let svd = self.0.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return *self,
        };
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    /// Re-orthonormalizes only when drift exceeds [`ORTHONORMAL_TOL`].
    pub fn renormalized(&self) -> Rotation {
        if self.orthonormality_residual() > ORTHONORMAL_TOL {
            self.orthonormalized()
        } else {
            *self
        }
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    pub fn angle(&self) -> f64 {
        geodesic_angle(&Rotation::identity(), self)
    }
}

/// A rigid transform. Position in meters.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub p: Vector3<f64>,
    pub r: Rotation,
}

impl Pose {
    pub fn new(p: Vector3<f64>, r: Rotation) -> Self {
        Pose { p, r }
    }

    pub fn identity() -> Self {
        Pose {
            p: Vector3::zeros(),
            r: Rotation::identity(),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose {
            p: Vector3::new(x, y, z),
            r: Rotation::identity(),
        }
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Pose {
            p: Vector3::zeros(),
            r,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.p.iter().all(|v| v.is_finite()) && self.r.is_valid()
    }

    /// `self · other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn transform_point(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.r.rotate(v) + self.p
    }

    /// Translation plus rotation log, the 6-dim tangent coordinates used by the
    /// compactness statistics.
    pub fn tangent6(&self) -> [f64; 6] {
        let w = so3_log(&self.r);
        [self.p.x, self.p.y, self.p.z, w.x, w.y, w.z]
    }
}

/// A spatial velocity: linear part in m/s, angular part in rad/s.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Twist { v, w }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z]
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose {
        p: a.r.rotate(&b.p) + a.p,
        r: a.r.compose(&b.r),
    }
}

pub fn inverse(t: &Pose) -> Pose {
    let rt = t.r.inverse();
    Pose {
        p: -rt.rotate(&t.p),
        r: rt,
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues' formula.
pub fn so3_exp(w: &Vector3<f64>) -> Rotation {
    let theta2 = w.norm_squared();
    let k = hat(w);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor terms up to theta^4.
        (1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0, 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

/// Rotation vector of `r`, with norm in `[0, π]`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let s = vee(m); // sin(theta) * axis
    let sin_theta = s.norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-6 {
        // theta / sin(theta) ≈ 1 + theta²/6
        return s * (1.0 + theta * theta / 6.0);
    }
    if theta <= NEAR_PI_BRANCH {
        return s * (theta / sin_theta);
    }

    // Near π the antisymmetric part vanishes; read the axis off the symmetric
    // part, (m + mᵀ)/2 = cosθ I + (1 − cosθ) a aᵀ.
    let sym = (m + m.transpose()) * 0.5;
    let denom = 1.0 - cos_theta;
    let aat = (sym - Matrix3::identity() * cos_theta) / denom;
    let mut best = 0;
    for i in 1..3 {
        if aat[(i, i)] > aat[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = aat.column(best).into();
    axis /= aat[(best, best)].max(0.0).sqrt().max(f64::MIN_POSITIVE);
    axis.normalize_mut();
    if axis.dot(&s) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Angle of the relative rotation `aᵀb`, in `[0, π]`.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    let rel = a.inverse().compose(b);
    let m = rel.matrix();
    let sin_theta = vee(m).norm();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    sin_theta.atan2(cos_theta)
}

/// Right Jacobian of SO(3): maps rates of the rotation vector `phi` to the body
/// angular velocity of `exp(phi)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Geodesic interpolation `a · exp(s · log(aᵀb))`.
pub fn slerp(a: &Rotation, b: &Rotation, s: f64) -> Rotation {
    let rel = so3_log(&a.inverse().compose(b));
    a.compose(&so3_exp(&(rel * s)))
}

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = a.rem_euclid(two_pi);
    if w > PI {
        w -= two_pi;
    }
    w
}
