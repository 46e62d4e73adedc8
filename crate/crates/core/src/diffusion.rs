//! Forward-noising helpers of a denoising diffusion policy.
//!
//! A schedule holds per-step `α_t = 1 − β_t` and the running products
//! `ᾱ_t = Π_{s ≤ t} α_s`, indexed from `t = 1`. Noising an action vector `x`
//! with standard normal `ε` gives `z_t = √ᾱ_t·x + √(1 − ᾱ_t)·ε`; the
//! noise-prediction training target is `ε` itself.

use thiserror::Error;

/// `ᾱ_t` at or below this cannot be inverted reliably.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cannot reconstruct at step {t}: alpha_bar = {alpha_bar:e} is degenerate")]
    DegenerateSchedule { t: usize, alpha_bar: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from `α_1..α_T`, each in `(0, 1]`.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self, DiffusionError> {
        if alphas.is_empty() {
            return Err(DiffusionError::InvalidInput("schedule needs at least one step".into()));
        }
        if let Some((i, a)) = alphas.iter().enumerate().find(|(_, a)| !(**a > 0.0 && **a <= 1.0)) {
            return Err(DiffusionError::InvalidInput(format!("alpha_{} = {a} outside (0, 1]", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { alphas, alpha_bars })
    }

    /// Linearly spaced `β` from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::InvalidInput("steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(DiffusionError::InvalidInput(format!(
                "betas must lie in [0, 1), got {beta_start} and {beta_end}"
            )));
        }
        let alphas = (0..steps)
            .map(|i| {
                let s = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                1.0 - (beta_start + s * (beta_end - beta_start))
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// `β` from 1e-4 to 0.02 over 1000 steps.
    pub fn linear_default() -> Self {
        Self::linear(1e-4, 0.02, 1000).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.alphas.len()
    }

    fn check_step(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::InvalidInput(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::InvalidInput(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

/// `z_t = √ᾱ_t·x + √(1 − ᾱ_t)·ε`.
pub fn forward_noise(x: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    same_len(x, eps)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Recovers `x` from `z_t` and the noise that produced it.
pub fn reconstruct(z: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    same_len(z, eps)?;
    let ab = schedule.alpha_bar(t)?;
    if ab <= MIN_ALPHA_BAR {
        return Err(DiffusionError::DegenerateSchedule { t, alpha_bar: ab });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z.iter().zip(eps).map(|(z, e)| (z - b * e) / a).collect())
}

/// Mean squared error between the true and predicted noise.
pub fn loss_target(eps_true: &[f64], eps_pred: &[f64]) -> Result<f64, DiffusionError> {
    same_len(eps_true, eps_pred)?;
    if eps_true.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = eps_true.iter().zip(eps_pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / eps_true.len() as f64)
}
