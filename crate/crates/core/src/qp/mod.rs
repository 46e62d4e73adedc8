//! Dense convex QP solver:
//!
//! ```text
//! minimize   ½ xᵀ H x + gᵀ x
//! subject to l ≤ A x ≤ u
//! ```
//!
//! Operator splitting (ADMM) in the OSQP form, with Ruiz equilibration, a
//! per-row penalty (equality rows get a stiffer one), over-relaxation, and a
//! single factorization of `H + σI + Aᵀ diag(ρ) A` reused across iterations
//! and across solves that share `H` and `A`. When the problem declares a
//! bandwidth the factorization is banded.
//!
//! Infeasibility is reported through the usual primal/dual certificates, with
//! a hard divergence guard on iterate norms.

mod banded;

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

pub use banded::{bandwidth, BandedCholesky};

#[derive(Debug, Error, PartialEq)]
pub enum QpError {
    #[error("invalid qp: {0}")]
    InvalidInput(String),
    #[error("objective matrix is not positive semidefinite")]
    NotConvex,
    #[error("qp dump parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Symmetry tolerance on `‖H − Hᵀ‖∞`.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    /// Half-bandwidth hint; enables the banded factorization.
    pub bandwidth: Option<usize>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        g: DVector<f64>,
        a: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self, QpError> {
        let p = QpProblem {
            h,
            g,
            a,
            l,
            u,
            bandwidth: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// A problem without constraints.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Result<Self, QpError> {
        let n = g.len();
        Self::new(h, g, DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    pub fn with_bandwidth(mut self, bw: usize) -> Self {
        self.bandwidth = Some(bw);
        self
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.g.len();
        let m = self.l.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(QpError::InvalidInput(format!(
                "H is {}x{}, expected {n}x{n}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a.nrows() != m || self.a.ncols() != n || self.u.len() != m {
            return Err(QpError::InvalidInput(format!(
                "A is {}x{}, l has {m}, u has {} entries (n = {n})",
                self.a.nrows(),
                self.a.ncols(),
                self.u.len()
            )));
        }
        let asym = (&self.h - self.h.transpose())
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if !(asym <= SYMMETRY_TOL) {
            return Err(QpError::InvalidInput(format!("H is not symmetric (‖H − Hᵀ‖∞ = {asym:e})")));
        }
        if self.h.iter().chain(self.g.iter()).chain(self.a.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::InvalidInput("non-finite entries in H, g or A".into()));
        }
        for i in 0..m {
            if self.l[i].is_nan() || self.u[i].is_nan() || self.l[i] > self.u[i] {
                return Err(QpError::InvalidInput(format!(
                    "bounds of row {i} are inconsistent: l = {}, u = {}",
                    self.l[i], self.u[i]
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIters,
    /// Primal infeasible, or unbounded below (dual infeasible).
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint multipliers; positive on active upper bounds.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    /// Multiplier applied to `rho` on equality rows.
    pub eq_rho_scale: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iters: usize,
    pub scaling_iters: usize,
    pub infeasibility_tol: f64,
    /// Iterate norm above which the run is declared divergent.
    pub divergence_limit: f64,
    /// Refine ADMM iterates by an equality-constrained solve on the guessed
    /// active set.
    pub polish: bool,
    /// Residual level below which polishing is attempted.
    pub polish_trigger: f64,
    /// Iterations between polishing attempts.
    pub polish_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eq_rho_scale: 1e3,
            tol_primal: 1e-8,
            tol_dual: 1e-8,
            max_iters: 4000,
            scaling_iters: 10,
            infeasibility_tol: 1e-6,
            divergence_limit: 1e10,
            polish: true,
            polish_trigger: 1e-3,
            polish_every: 25,
        }
    }
}

/// Row-compressed copy of a dense matrix.
#[derive(Clone, Debug)]
struct SparseRows {
    ptr: Vec<usize>,
    col: Vec<usize>,
    val: Vec<f64>,
}

impl SparseRows {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut s = SparseRows {
            ptr: vec![0],
            col: Vec::new(),
            val: Vec::new(),
        };
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    s.col.push(j);
                    s.val.push(v);
                }
            }
            s.ptr.push(s.col.len());
        }
        s
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.ptr[i]..self.ptr[i + 1] {
                acc += self.val[k] * x[self.col[k]];
            }
            *o = acc;
        }
    }
}

enum Factor {
    Dense(Cholesky<f64, Dyn>),
    Banded(BandedCholesky),
}

impl Factor {
    fn factor(k: DMatrix<f64>, banded: bool) -> Option<Self> {
        if banded {
            let bw = bandwidth(&k);
            BandedCholesky::factor(&k, bw).map(Factor::Banded)
        } else {
            Cholesky::new(k).map(Factor::Dense)
        }
    }

    fn solve_mut(&self, b: &mut [f64]) {
        match self {
            Factor::Banded(f) => f.solve_mut(b),
            Factor::Dense(c) => {
                let mut v = DVector::from_column_slice(b);
                c.solve_mut(&mut v);
                b.copy_from_slice(v.as_slice());
            }
        }
    }
}

fn check_psd(h: &DMatrix<f64>, banded: bool) -> Result<(), QpError> {
    let n = h.nrows();
    if n == 0 {
        return Ok(());
    }
    let scale = h.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let shift = 1e-9 * (1.0 + scale);
    let shifted = h + DMatrix::identity(n, n) * shift;
    Factor::factor(shifted, banded).map(|_| ()).ok_or(QpError::NotConvex)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Scaled data and factorization for a fixed `(H, A)` pair.
///
/// `g`, `l` and `u` may change between solves; the factorization is kept.
pub struct QpWorkspace {
    settings: QpSettings,
    n: usize,
    m: usize,
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
    h: SparseRows,
    a: SparseRows,
    at: SparseRows,
    rho: Vec<f64>,
    factor: Factor,
    h_raw: DMatrix<f64>,
    a_raw: DMatrix<f64>,
}

impl QpWorkspace {
    /// Equilibrates and factors. Rows with `l = u` in `p` get the equality
    /// penalty.
    pub fn new(p: &QpProblem, settings: QpSettings) -> Result<Self, QpError> {
        p.validate()?;
        let (n, m) = (p.n(), p.m());
        let banded = p.bandwidth.is_some();
        check_psd(&p.h, banded)?;

        let (d, e, c) = ruiz(&p.h, &p.a, settings.scaling_iters);
        let mut hs = p.h.clone();
        for i in 0..n {
            for j in 0..n {
                hs[(i, j)] *= c * d[i] * d[j];
            }
        }
        let mut as_ = p.a.clone();
        for i in 0..m {
            for j in 0..n {
                as_[(i, j)] *= e[i] * d[j];
            }
        }
        let rho: Vec<f64> = (0..m)
            .map(|i| {
                if p.l[i] == p.u[i] {
                    settings.rho * settings.eq_rho_scale
                } else {
                    settings.rho
                }
            })
            .collect();

        let mut k = hs.clone() + DMatrix::identity(n, n) * settings.sigma;
        for i in 0..m {
            for j1 in 0..n {
                let a1 = as_[(i, j1)];
                if a1 == 0.0 {
                    continue;
                }
                for j2 in 0..n {
                    k[(j1, j2)] += rho[i] * a1 * as_[(i, j2)];
                }
            }
        }
        let factor = Factor::factor(k, banded).ok_or(QpError::NotConvex)?;

        Ok(QpWorkspace {
            settings,
            n,
            m,
            d,
            e,
            c,
            h: SparseRows::from_dense(&hs),
            at: SparseRows::from_dense(&as_.transpose()),
            a: SparseRows::from_dense(&as_),
            rho,
            factor,
            h_raw: p.h.clone(),
            a_raw: p.a.clone(),
        })
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    /// Solves with the factored `(H, A)` and the given vectors. `warm` is an
    /// optional `(x, y)` starting point in unscaled units.
    pub fn solve(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        warm: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<QpSolution, QpError> {
        let (n, m) = (self.n, self.m);
        if g.len() != n || l.len() != m || u.len() != m {
            return Err(QpError::InvalidInput("vector dimensions do not match the workspace".into()));
        }
        for i in 0..m {
            if l[i].is_nan() || u[i].is_nan() || l[i] > u[i] {
                return Err(QpError::InvalidInput(format!("bounds of row {i} are inconsistent")));
            }
        }
        let s = &self.settings;
        let (d, e, c) = (&self.d, &self.e, self.c);

        let gs: Vec<f64> = (0..n).map(|i| c * d[i] * g[i]).collect();
        let ls: Vec<f64> = (0..m).map(|i| e[i] * l[i]).collect();
        let us: Vec<f64> = (0..m).map(|i| e[i] * u[i]).collect();

        let mut x = vec![0.0; n];
        let mut y = vec![0.0; m];
        let mut z = vec![0.0; m];
        if let Some((x0, y0)) = warm {
            if x0.len() != n || y0.len() != m {
                return Err(QpError::InvalidInput("warm start dimensions do not match".into()));
            }
            for i in 0..n {
                x[i] = x0[i] / d[i];
            }
            for i in 0..m {
                y[i] = c * y0[i] / e[i];
            }
            self.a.mul(&x, &mut z);
            for i in 0..m {
                z[i] = z[i].clamp(ls[i], us[i]);
            }
        }

        let mut rhs = vec![0.0; n];
        let mut tmp_m = vec![0.0; m];
        let mut tmp_n = vec![0.0; n];
        let mut ztil = vec![0.0; m];
        let mut ax = vec![0.0; m];
        let mut dy = vec![0.0; m];
        let mut dx = vec![0.0; n];

        let mut status = QpStatus::MaxIters;
        let mut iterations = s.max_iters;
        let mut r_prim = f64::INFINITY;
        let mut r_dual = f64::INFINITY;

        for k in 1..=s.max_iters {
            // x̃ from (H + σI + AᵀRA) x̃ = σx − g + Aᵀ(Rz − y)
            for i in 0..m {
                tmp_m[i] = self.rho[i] * z[i] - y[i];
            }
            self.at.mul(&tmp_m, &mut rhs);
            for i in 0..n {
                rhs[i] += s.sigma * x[i] - gs[i];
            }
            self.factor.solve_mut(&mut rhs);
            self.a.mul(&rhs, &mut ztil);

            for i in 0..n {
                let xn = s.alpha * rhs[i] + (1.0 - s.alpha) * x[i];
                dx[i] = xn - x[i];
                x[i] = xn;
            }
            for i in 0..m {
                let zh = s.alpha * ztil[i] + (1.0 - s.alpha) * z[i];
                let zn = (zh + y[i] / self.rho[i]).clamp(ls[i], us[i]);
                let yn = y[i] + self.rho[i] * (zh - zn);
                dy[i] = yn - y[i];
                y[i] = yn;
                z[i] = zn;
            }

            // Unscaled residuals.
            self.a.mul(&x, &mut ax);
            r_prim = (0..m).map(|i| ((ax[i] - z[i]) / e[i]).abs()).fold(0.0, f64::max);
            self.h.mul(&x, &mut tmp_n);
            self.at.mul(&y, &mut rhs);
            r_dual = (0..n)
                .map(|i| ((tmp_n[i] + gs[i] + rhs[i]) / (c * d[i])).abs())
                .fold(0.0, f64::max);

            if r_prim <= s.tol_primal && r_dual <= s.tol_dual {
                status = QpStatus::Solved;
                iterations = k;
                break;
            }
            if s.polish && k % s.polish_every == 0 && r_prim <= s.polish_trigger && r_dual <= s.polish_trigger {
                let xs = DVector::from_iterator(n, (0..n).map(|i| d[i] * x[i]));
                let ys = DVector::from_iterator(m, (0..m).map(|i| e[i] * y[i] / c));
                if let Some(sol) = self.polish(g, l, u, &xs, &ys, k) {
                    return Ok(sol);
                }
            }
            if self.primal_infeasible(&dy, &ls, &us) || self.dual_infeasible(&dx, &gs, &ls, &us) {
                status = QpStatus::Infeasible;
                iterations = k;
                break;
            }
            if inf_norm(&x) > s.divergence_limit || inf_norm(&y) > s.divergence_limit {
                status = QpStatus::Infeasible;
                iterations = k;
                break;
            }
        }

        let xs = DVector::from_iterator(n, (0..n).map(|i| d[i] * x[i]));
        let ys = DVector::from_iterator(m, (0..m).map(|i| e[i] * y[i] / c));
        if status == QpStatus::MaxIters && s.polish {
            if let Some(sol) = self.polish(g, l, u, &xs, &ys, iterations) {
                return Ok(sol);
            }
        }
        Ok(QpSolution {
            x: xs,
            y: ys,
            status,
            iterations,
            primal_residual: r_prim,
            dual_residual: r_dual,
        })
    }

    /// Solves the KKT system of the active set guessed from `(x, y)` and
    /// returns the result if it meets the tolerances.
    fn polish(
        &self,
        g: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
        iterations: usize,
    ) -> Option<QpSolution> {
        let (n, m) = (self.n, self.m);
        let s = &self.settings;
        let ax = &self.a_raw * x;
        // +1 upper, -1 lower
        let mut active: Vec<(usize, f64, i8)> = Vec::new();
        for i in 0..m {
            if l[i] == u[i] {
                active.push((i, l[i], 0));
            } else if u[i].is_finite() && u[i] - ax[i] < y[i] {
                active.push((i, u[i], 1));
            } else if l[i].is_finite() && ax[i] - l[i] < -y[i] {
                active.push((i, l[i], -1));
            }
        }
        let na = active.len();
        let dim = n + na;
        let delta = 1e-10;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.h_raw);
        for (r, &(i, _, _)) in active.iter().enumerate() {
            for j in 0..n {
                let v = self.a_raw[(i, j)];
                kkt[(n + r, j)] = v;
                kkt[(j, n + r)] = v;
            }
        }
        let exact = kkt.clone();
        for i in 0..n {
            kkt[(i, i)] += delta;
        }
        for r in 0..na {
            kkt[(n + r, n + r)] -= delta;
        }
        let lu = kkt.lu();
        let mut rhs = DVector::zeros(dim);
        for i in 0..n {
            rhs[i] = -g[i];
        }
        for (r, &(_, b, _)) in active.iter().enumerate() {
            rhs[n + r] = b;
        }
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..4 {
            let res = &rhs - &exact * &sol;
            if res.amax() < 1e-14 {
                break;
            }
            sol += lu.solve(&res)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let xp = DVector::from_iterator(n, sol.iter().take(n).copied());
        let mut yp = DVector::zeros(m);
        for (r, &(i, _, side)) in active.iter().enumerate() {
            let v = sol[n + r];
            let v = match side {
                1 if v < 0.0 => {
                    if v < -s.tol_dual {
                        return None;
                    }
                    0.0
                }
                -1 if v > 0.0 => {
                    if v > s.tol_dual {
                        return None;
                    }
                    0.0
                }
                _ => v,
            };
            yp[i] = v;
        }
        let axp = &self.a_raw * &xp;
        let r_prim = (0..m).fold(0.0f64, |a, i| a.max(axp[i] - u[i]).max(l[i] - axp[i]));
        let r_dual = (&self.h_raw * &xp + g + self.a_raw.transpose() * &yp).amax();
        if r_prim <= s.tol_primal && r_dual <= s.tol_dual {
            Some(QpSolution {
                x: xp,
                y: yp,
                status: QpStatus::Solved,
                iterations,
                primal_residual: r_prim,
                dual_residual: r_dual,
            })
        } else {
            None
        }
    }

    fn primal_infeasible(&self, dy: &[f64], ls: &[f64], us: &[f64]) -> bool {
        if self.m == 0 {
            return false;
        }
        let eps = self.settings.infeasibility_tol;
        let norm = (0..self.m).map(|i| (dy[i] * self.e[i]).abs()).fold(0.0, f64::max);
        if norm < 1e-30 {
            return false;
        }
        let mut aty = vec![0.0; self.n];
        self.at.mul(dy, &mut aty);
        let at_norm = (0..self.n).map(|i| (aty[i] * self.d[i]).abs()).fold(0.0, f64::max);
        if at_norm > eps * norm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            if dy[i] > 0.0 {
                if us[i].is_infinite() {
                    if dy[i] * self.e[i] > eps * norm {
                        return false;
                    }
                    continue;
                }
                support += us[i] * dy[i];
            } else if dy[i] < 0.0 {
                if ls[i].is_infinite() {
                    if -dy[i] * self.e[i] > eps * norm {
                        return false;
                    }
                    continue;
                }
                support += ls[i] * dy[i];
            }
        }
        support < -eps * norm
    }

    fn dual_infeasible(&self, dx: &[f64], gs: &[f64], ls: &[f64], us: &[f64]) -> bool {
        let eps = self.settings.infeasibility_tol;
        let norm = (0..self.n).map(|i| (dx[i] * self.d[i]).abs()).fold(0.0, f64::max);
        if norm < 1e-30 {
            return false;
        }
        let gdx: f64 = (0..self.n).map(|i| gs[i] * dx[i]).sum::<f64>() / self.c;
        if gdx > -eps * norm {
            return false;
        }
        let mut hdx = vec![0.0; self.n];
        self.h.mul(dx, &mut hdx);
        if (0..self.n).map(|i| (hdx[i] / self.d[i]).abs()).fold(0.0, f64::max) / self.c > eps * norm {
            return false;
        }
        let mut adx = vec![0.0; self.m];
        self.a.mul(dx, &mut adx);
        for i in 0..self.m {
            let v = adx[i] / self.e[i];
            let tol = eps * norm;
            let upper_ok = us[i].is_infinite() || v <= tol;
            let lower_ok = ls[i].is_infinite() || v >= -tol;
            if !(upper_ok && lower_ok) {
                return false;
            }
        }
        true
    }
}

/// Ruiz equilibration of `[H Aᵀ; A 0]` followed by cost scaling.
fn ruiz(h: &DMatrix<f64>, a: &DMatrix<f64>, iters: usize) -> (Vec<f64>, Vec<f64>, f64) {
    let (n, m) = (h.nrows(), a.nrows());
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.clamp(1e-4, 1e4) };
    for _ in 0..iters {
        let mut dd = vec![0.0f64; n];
        let mut de = vec![0.0f64; m];
        for j in 0..n {
            for i in 0..n {
                dd[j] = dd[j].max((d[i] * h[(i, j)] * d[j]).abs());
            }
            for i in 0..m {
                dd[j] = dd[j].max((e[i] * a[(i, j)] * d[j]).abs());
            }
        }
        for i in 0..m {
            for j in 0..n {
                de[i] = de[i].max((e[i] * a[(i, j)] * d[j]).abs());
            }
        }
        for j in 0..n {
            d[j] /= clamp(dd[j]).sqrt();
        }
        for i in 0..m {
            e[i] /= clamp(de[i]).sqrt();
        }
    }
    let mut mean_col = 0.0;
    if n > 0 {
        for j in 0..n {
            let mut col = 0.0f64;
            for i in 0..n {
                col = col.max((d[i] * h[(i, j)] * d[j]).abs());
            }
            mean_col += col;
        }
        mean_col /= n as f64;
    }
    let c = if mean_col > 1e-4 { (1.0 / mean_col).clamp(1e-4, 1e4) } else { 1.0 };
    (d, e, c)
}

/// Solves `p` with default settings apart from the given tolerances.
pub fn solve(p: &QpProblem, tol_primal: f64, tol_dual: f64, max_iters: usize) -> Result<QpSolution, QpError> {
    let settings = QpSettings {
        tol_primal,
        tol_dual,
        max_iters,
        ..QpSettings::default()
    };
    QpWorkspace::new(p, settings)?.solve(&p.g, &p.l, &p.u, None)
}

/// Solves `p` with `settings`, optionally warm-started from `(x, y)`.
pub fn solve_with(
    p: &QpProblem,
    settings: QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    QpWorkspace::new(p, settings)?.solve(&p.g, &p.l, &p.u, warm)
}

/// KKT residuals of a primal-dual pair.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct KktResiduals {
    /// `max(0, Ax − u, l − Ax)`, infinity norm.
    pub primal: f64,
    /// `‖Hx + g + Aᵀy‖∞`.
    pub dual: f64,
    /// Largest product of a multiplier with the slack of the bound it acts on.
    /// A multiplier pushing on an infinite bound counts with its own magnitude.
    pub complementarity: f64,
}

pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> Result<KktResiduals, QpError> {
    if x.len() != p.n() || y.len() != p.m() {
        return Err(QpError::InvalidInput(format!(
            "x has {} entries and y has {}, problem is {}x{}",
            x.len(),
            y.len(),
            p.m(),
            p.n()
        )));
    }
    let ax = &p.a * x;
    let mut primal = 0.0f64;
    let mut comp = 0.0f64;
    for i in 0..p.m() {
        primal = primal.max(ax[i] - p.u[i]).max(p.l[i] - ax[i]);
        let yi = y[i];
        let c = if yi > 0.0 {
            if p.u[i].is_finite() {
                yi * (p.u[i] - ax[i]).abs()
            } else {
                yi
            }
        } else if yi < 0.0 {
            if p.l[i].is_finite() {
                -yi * (ax[i] - p.l[i]).abs()
            } else {
                -yi
            }
        } else {
            0.0
        };
        comp = comp.max(c);
    }
    let stat = &p.h * x + &p.g + p.a.transpose() * y;
    Ok(KktResiduals {
        primal: primal.max(0.0),
        dual: stat.amax(),
        complementarity: comp,
    })
}

// ---------------------------------------------------------------------------
// Text dump

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:e}")
    }
}

/// Renders `p` in the matrix text format (see `docs/formats.md`).
pub fn dump(p: &QpProblem) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# qp dump: minimize 1/2 x'Hx + g'x s.t. l <= Ax <= u");
    let _ = writeln!(s, "n {}", p.n());
    let _ = writeln!(s, "m {}", p.m());
    if let Some(bw) = p.bandwidth {
        let _ = writeln!(s, "bandwidth {bw}");
    }
    let row = |it: &mut dyn Iterator<Item = f64>| it.map(fmt_num).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "H");
    for r in p.h.row_iter() {
        let _ = writeln!(s, "{}", row(&mut r.iter().copied()));
    }
    let _ = writeln!(s, "g");
    let _ = writeln!(s, "{}", row(&mut p.g.iter().copied()));
    let _ = writeln!(s, "A");
    for r in p.a.row_iter() {
        let _ = writeln!(s, "{}", row(&mut r.iter().copied()));
    }
    let _ = writeln!(s, "l");
    let _ = writeln!(s, "{}", row(&mut p.l.iter().copied()));
    let _ = writeln!(s, "u");
    let _ = writeln!(s, "{}", row(&mut p.u.iter().copied()));
    s
}

struct Cursor<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

fn parse_err(line: usize, msg: &str) -> QpError {
    QpError::Parse {
        line,
        msg: msg.to_string(),
    }
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str), QpError> {
        let last = self.lines.last().map_or(0, |l| l.0);
        let r = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| parse_err(last, &format!("unexpected end of input, expected {what}")));
        self.pos += 1;
        r
    }

    fn header(&mut self, key: &str) -> Result<usize, QpError> {
        let (line, l) = self.next(key)?;
        let mut it = l.split_whitespace();
        if it.next() != Some(key) {
            return Err(parse_err(line, &format!("expected `{key} <count>`")));
        }
        it.next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(line, &format!("bad `{key}` count")))
    }

    fn keyword(&mut self, key: &str) -> Result<(), QpError> {
        let (line, l) = self.next(key)?;
        if l != key {
            return Err(parse_err(line, &format!("expected `{key}`")));
        }
        Ok(())
    }

    fn numbers(&mut self, what: &str, want: usize) -> Result<Vec<f64>, QpError> {
        if want == 0 {
            return Ok(Vec::new());
        }
        let (line, l) = self.next(what)?;
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|t| match t {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                _ => t.parse::<f64>().map_err(|_| parse_err(line, &format!("bad number {t:?}"))),
            })
            .collect::<Result<_, _>>()?;
        if v.len() != want {
            return Err(parse_err(line, &format!("expected {want} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn matrix(&mut self, key: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>, QpError> {
        self.keyword(key)?;
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for (j, v) in self.numbers(key, cols)?.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    fn vector(&mut self, key: &str, len: usize) -> Result<DVector<f64>, QpError> {
        self.keyword(key)?;
        Ok(DVector::from_vec(self.numbers(key, len)?))
    }
}

/// Parses the matrix text format produced by [`dump`].
pub fn parse_dump(text: &str) -> Result<QpProblem, QpError> {
    let mut c = Cursor {
        lines: text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .collect(),
        pos: 0,
    };
    let n = c.header("n")?;
    let m = c.header("m")?;
    let bw = match c.lines.get(c.pos) {
        Some((_, l)) if l.starts_with("bandwidth") => Some(c.header("bandwidth")?),
        _ => None,
    };
    let h = c.matrix("H", n, n)?;
    let g = c.vector("g", n)?;
    let a = c.matrix("A", m, n)?;
    let lo = c.vector("l", m)?;
    let up = c.vector("u", m)?;
    let mut p = QpProblem::new(h, g, a, lo, up)?;
    p.bandwidth = bw;
    Ok(p)
}
