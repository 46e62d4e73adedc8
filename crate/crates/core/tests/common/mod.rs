//! Shared test helpers: an independent QP oracle and random problem generators.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtg_core::qp::QpProblem;

/// Minimizer of a strictly convex QP by accelerated projected gradient ascent
/// on the dual, `x(λ) = −H⁻¹(g + Aᵀ(λ⁺ − λ⁻))` with `λ± ≥ 0`.
///
/// Returns `(x, y)` with `y = λ⁺ − λ⁻`.
pub fn dual_pg_oracle(p: &QpProblem) -> (DVector<f64>, DVector<f64>) {
    let m = p.m();
    let hinv = p
        .h
        .clone()
        .cholesky()
        .expect("oracle needs a positive definite H")
        .inverse();
    if m == 0 {
        return (-&hinv * &p.g, DVector::zeros(0));
    }
    let at = p.a.transpose();
    let x_of = |y: &DVector<f64>| -&hinv * (&p.g + &at * y);
    let k = &p.a * &hinv * &at;
    let lmax = k.symmetric_eigenvalues().max().max(1e-12);
    let step = 1.0 / (2.0 * lmax);

    let project = |lu: &mut DVector<f64>, ll: &mut DVector<f64>| {
        for i in 0..m {
            lu[i] = if p.u[i].is_finite() { lu[i].max(0.0) } else { 0.0 };
            ll[i] = if p.l[i].is_finite() { ll[i].max(0.0) } else { 0.0 };
        }
    };
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };

    let mut lu = DVector::zeros(m);
    let mut ll = DVector::zeros(m);
    let (mut zu, mut zl) = (lu.clone(), ll.clone());
    let mut t = 1.0f64;
    for it in 0..200_000 {
        let x = x_of(&(&zu - &zl));
        let ax = &p.a * &x;
        let mut nu = &zu + (&ax - &p.u).map(finite) * step;
        let mut nl = &zl + (&p.l - &ax).map(finite) * step;
        project(&mut nu, &mut nl);
        // Gradient restart: drop momentum once it points downhill.
        let uphill = (&zu - &nu).dot(&(&nu - &lu)) + (&zl - &nl).dot(&(&nl - &ll));
        let t_next = if uphill > 0.0 { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        let beta = if uphill > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        zu = &nu + (&nu - &lu) * beta;
        zl = &nl + (&nl - &ll) * beta;
        lu = nu;
        ll = nl;
        t = t_next;
        if it % 50 == 0 && kkt_gap(p, &x_of(&(&lu - &ll)), &(&lu - &ll)) < 1e-12 {
            break;
        }
    }
    let y = &lu - &ll;
    let x = x_of(&y);
    match active_set_finish(p, &y) {
        Some((xf, yf)) if kkt_gap(p, &xf, &yf) < kkt_gap(p, &x, &y) => (xf, yf),
        _ => (x, y),
    }
}

/// Largest primal violation, complementarity product or stationarity residual.
fn kkt_gap(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let ax = &p.a * x;
    let mut gap = 0.0f64;
    for i in 0..p.m() {
        gap = gap.max(ax[i] - p.u[i]).max(p.l[i] - ax[i]);
        if y[i] > 0.0 {
            gap = gap.max(y[i] * (p.u[i] - ax[i]).abs());
        } else if y[i] < 0.0 {
            gap = gap.max(-y[i] * (ax[i] - p.l[i]).abs());
        }
        if y[i] < 0.0 && !p.l[i].is_finite() || y[i] > 0.0 && !p.u[i].is_finite() {
            gap = f64::INFINITY;
        }
    }
    let stat = &p.h * x + &p.g + p.a.transpose() * y;
    gap.max(stat.amax())
}

/// Solves the equality-constrained problem on the rows with nonzero
/// multipliers of `y` and returns it when the signs stay consistent.
fn active_set_finish(p: &QpProblem, y: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = p.n();
    let rows: Vec<(usize, f64)> = (0..p.m())
        .filter(|&i| y[i] != 0.0)
        .map(|i| (i, if y[i] > 0.0 { p.u[i] } else { p.l[i] }))
        .collect();
    let k = rows.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    let mut rhs = DVector::zeros(n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
    for j in 0..n {
        rhs[j] = -p.g[j];
    }
    for (r, &(i, b)) in rows.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = p.a[(i, j)];
            kkt[(j, n + r)] = p.a[(i, j)];
        }
        rhs[n + r] = b;
    }
    let sol = kkt.svd(true, true).solve(&rhs, 1e-13).ok()?;
    let x = sol.rows(0, n).into_owned();
    let mut yf = DVector::zeros(p.m());
    for (r, &(i, _)) in rows.iter().enumerate() {
        if sol[n + r] * y[i] < 0.0 {
            return None;
        }
        yf[i] = sol[n + r];
    }
    Some((x, yf))
}

/// `max(0, Ax − u, l − Ax)` in the infinity norm.
pub fn infeasibility(p: &QpProblem, x: &DVector<f64>) -> f64 {
    let ax = &p.a * x;
    (0..p.m())
        .map(|i| (ax[i] - p.u[i]).max(p.l[i] - ax[i]))
        .fold(0.0, f64::max)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// A strictly convex, feasible QP with `n ≤ 8` variables and `m ≤ 12` rows:
/// two-sided, one-sided and (a few) equality rows around a random interior
/// point.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8usize);
    let m = rng.random_range(0..=12usize);
    let b = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
    let mut h = b.transpose() * &b + DMatrix::identity(n, n) * 0.5;
    h = (&h + h.transpose()) * 0.5;
    let g = DVector::from_fn(n, |_, _| 2.0 * normal(&mut rng));
    let a = DMatrix::from_fn(m, n, |_, _| normal(&mut rng));
    let x0 = DVector::from_fn(n, |_, _| normal(&mut rng));
    let ax0 = &a * &x0;
    let max_eq = n / 2;
    let mut eqs = 0;
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..m {
        let lo = rng.random_range(0.05..1.0);
        let hi = rng.random_range(0.05..1.0);
        match rng.random_range(0..4u8) {
            0 => {
                l[i] = ax0[i] - lo;
                u[i] = ax0[i] + hi;
            }
            1 => {
                l[i] = f64::NEG_INFINITY;
                u[i] = ax0[i] + hi;
            }
            2 => {
                l[i] = ax0[i] - lo;
                u[i] = f64::INFINITY;
            }
            _ if eqs < max_eq => {
                eqs += 1;
                l[i] = ax0[i];
                u[i] = ax0[i];
            }
            _ => {
                l[i] = ax0[i] - lo;
                u[i] = ax0[i] + hi;
            }
        }
    }
    QpProblem::new(h, g, a, l, u).expect("generated problem is valid")
}

/// Largest absolute finite-difference rate of `values` sampled every `dt`.
pub fn max_fd_rate(values: &[f64], dt: f64) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]).abs() / dt).fold(0.0, f64::max)
}
