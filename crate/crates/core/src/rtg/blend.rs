//! The per-channel blending QP.
//!
//! Variables are the control points `c[0..=K+1]` of a midpoint-form quadratic
//! B-spline on the window grid (see [`super::spline`]), so that knot values are
//! `y[k] = (c[k] + c[k+1]) / 2` and knot velocities `(c[k+1] − c[k]) / h`.
//!
//! ```text
//! S1 = w_acc Σ_k ((c[k] − 2c[k+1] + c[k+2]) / h²)²      k = 0..K−1
//! S2 = Σ_k W1[k] (y[k] − old[k])²
//! S3 = Σ_k W2[k] (y[k] − new[k])²
//! C1 = |c[k+1] − c[k]| / h ≤ v_max
//! ```
//!
//! With a splice, the position and velocity at knot 0 are pinned to the old
//! trajectory and the velocity row of knot 0 becomes an equality.

use nalgebra::{DMatrix, DVector};

use crate::qp::QpProblem;

/// Time-varying weights of the old and new targets on the knots
/// `t[k] = t_s + k·h`. Knots after `t_f` give full weight to the new chunk.
pub fn window_weights(intervals: usize, h: f64, t_f_offset: f64, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut w1 = Vec::with_capacity(intervals + 1);
    let mut w2 = Vec::with_capacity(intervals + 1);
    for k in 0..=intervals {
        let dt = k as f64 * h;
        let a = if dt <= t_f_offset + 1e-12 {
            if tau > 0.0 {
                (-dt / tau).exp()
            } else if k == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            0.0
        };
        w1.push(a);
        w2.push(1.0 - a);
    }
    (w1, w2)
}

/// Weights for a chunk with nothing to blend against.
pub fn initial_weights(intervals: usize) -> (Vec<f64>, Vec<f64>) {
    (vec![0.0; intervals + 1], vec![1.0; intervals + 1])
}

/// Objective and constraint matrices for a window of `w1.len() − 1` intervals.
/// They depend only on the grid and the weights, so channels sharing a window
/// share them.
pub fn blend_matrices(h: f64, w1: &[f64], w2: &[f64], w_acc: f64, splice: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let knots = w1.len();
    let n = knots + 1;
    let mut hm = DMatrix::zeros(n, n);
    let h2 = h * h;
    let acc = [1.0 / h2, -2.0 / h2, 1.0 / h2];
    for k in 0..knots.saturating_sub(1) {
        for i in 0..3 {
            for j in 0..3 {
                hm[(k + i, k + j)] += 2.0 * w_acc * acc[i] * acc[j];
            }
        }
    }
    for k in 0..knots {
        let w = w1[k] + w2[k];
        for i in 0..2 {
            for j in 0..2 {
                hm[(k + i, k + j)] += 0.5 * w;
            }
        }
    }
    let rows = if splice { knots + 1 } else { knots };
    let mut a = DMatrix::zeros(rows, n);
    let mut r = 0;
    if splice {
        a[(0, 0)] = 0.5;
        a[(0, 1)] = 0.5;
        r = 1;
    }
    for k in 0..knots {
        a[(r + k, k)] = -1.0 / h;
        a[(r + k, k + 1)] = 1.0 / h;
    }
    (hm, a)
}

/// Linear term and bounds for one channel. `splice` is the pinned
/// `(position, velocity)` at knot 0.
pub fn blend_vectors(
    old: &[f64],
    new: &[f64],
    w1: &[f64],
    w2: &[f64],
    v_max: f64,
    splice: Option<(f64, f64)>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let knots = w1.len();
    let mut g = DVector::zeros(knots + 1);
    for k in 0..knots {
        let mut t = w2[k] * new[k];
        if w1[k] != 0.0 {
            t += w1[k] * old[k];
        }
        g[k] -= t;
        g[k + 1] -= t;
    }
    let rows = if splice.is_some() { knots + 1 } else { knots };
    let mut l = DVector::from_element(rows, -v_max);
    let mut u = DVector::from_element(rows, v_max);
    if let Some((p, v)) = splice {
        l[0] = p;
        u[0] = p;
        l[1] = v;
        u[1] = v;
    }
    (g, l, u)
}

/// The complete blending QP of one channel. `old` may be shorter than `new`
/// where `W1` is zero.
#[allow(clippy::too_many_arguments)]
pub fn blend_window_qp(
    old: &[f64],
    new: &[f64],
    w1: &[f64],
    w2: &[f64],
    h: f64,
    w_acc: f64,
    v_max: f64,
    splice: Option<(f64, f64)>,
) -> QpProblem {
    let mut old_full = old.to_vec();
    old_full.resize(new.len(), 0.0);
    let (hm, a) = blend_matrices(h, w1, w2, w_acc, splice.is_some());
    let (g, l, u) = blend_vectors(&old_full, new, w1, w2, v_max, splice);
    QpProblem {
        h: hm,
        g,
        a,
        l,
        u,
        bandwidth: Some(2),
    }
}
