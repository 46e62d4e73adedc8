//! Uniform quadratic B-splines in "midpoint" form.
//!
//! Control points `c[0..=K+1]` on a grid `t[k] = t0 + k·h`, `k = 0..=K`. The
//! value at knot `k` is `(c[k] + c[k+1]) / 2` and the velocity there is
//! `(c[k+1] − c[k]) / h`; between knots velocity is the linear interpolation of
//! the two adjacent control differences. The curve is C¹, and bounding every
//! control difference by `v·h` bounds the velocity everywhere by `v`.

/// Snap distance, in grid units, for treating a query as a knot.
const KNOT_SNAP: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SplineSegment {
    pub t0: f64,
    pub h: f64,
    /// Number of grid intervals `K`.
    pub intervals: usize,
    /// Control points per channel, `K + 2` each.
    pub ctrl: Vec<Vec<f64>>,
}

impl SplineSegment {
    pub fn new(t0: f64, h: f64, ctrl: Vec<Vec<f64>>) -> Self {
        let intervals = ctrl.first().map_or(0, |c| c.len().saturating_sub(2));
        debug_assert!(ctrl.iter().all(|c| c.len() == intervals + 2));
        SplineSegment { t0, h, intervals, ctrl }
    }

    pub fn channels(&self) -> usize {
        self.ctrl.len()
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.h * self.intervals as f64
    }

    pub fn knot_time(&self, k: usize) -> f64 {
        self.t0 + self.h * k as f64
    }

    pub fn knot_value(&self, ch: usize, k: usize) -> f64 {
        0.5 * (self.ctrl[ch][k] + self.ctrl[ch][k + 1])
    }

    /// Interval index and local parameter in `[0, 1]` for time `t`, clamped to
    /// the domain.
    fn locate(&self, t: f64) -> (usize, f64) {
        let kmax = self.intervals.max(1);
        let u = ((t - self.t0) / self.h).clamp(0.0, self.intervals as f64);
        let r = u.round();
        if (u - r).abs() < KNOT_SNAP {
            let k = r as usize;
            return if k >= kmax { (kmax - 1, 1.0) } else { (k, 0.0) };
        }
        let k = (u.floor() as usize).min(kmax - 1);
        (k, u - k as f64)
    }

    /// Value and first derivative of channel `ch` at `t` (clamped to the
    /// domain).
    pub fn eval(&self, ch: usize, t: f64) -> (f64, f64) {
        let (k, s) = self.locate(t);
        self.eval_at(ch, k, s)
    }

    fn eval_at(&self, ch: usize, k: usize, s: f64) -> (f64, f64) {
        let c = &self.ctrl[ch];
        let d0 = c[k + 1] - c[k];
        let d1 = c[k + 2] - c[k + 1];
        let v = if s == 0.0 {
            0.5 * (c[k] + c[k + 1])
        } else if s == 1.0 {
            0.5 * (c[k + 1] + c[k + 2])
        } else {
            0.5 * ((1.0 - s) * (1.0 - s) * c[k] + (1.0 + 2.0 * s - 2.0 * s * s) * c[k + 1] + s * s * c[k + 2])
        };
        let d = if s == 0.0 {
            d0
        } else if s == 1.0 {
            d1
        } else {
            (1.0 - s) * d0 + s * d1
        };
        (v, d / self.h)
    }

    /// Values and derivatives of every channel at `t`.
    pub fn eval_all(&self, t: f64, values: &mut [f64], rates: &mut [f64]) {
        let (k, s) = self.locate(t);
        for ch in 0..self.ctrl.len() {
            let (v, d) = self.eval_at(ch, k, s);
            values[ch] = v;
            rates[ch] = d;
        }
    }

    /// Largest control-difference velocity of channel `ch`, which bounds the
    /// curve's speed.
    pub fn max_speed(&self, ch: usize) -> f64 {
        self.ctrl[ch].windows(2).map(|w| (w[1] - w[0]).abs() / self.h).fold(0.0, f64::max)
    }
}
