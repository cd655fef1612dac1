//! Discrete diffusion schedules.
//!
//! Arrays are indexed by step `t = 0..=N`; entry 0 is the clean state
//! (`a_0 = c_0 = 1`, `b_0 = d_0 = 0`). The forward chain is
//! `x_t = a_t x_{t-1} + b_t n_t` with marginal `x_t | x_0 ~ N(c_t x_0, d_t² I)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ddpm,
    Ddm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub n_steps: usize,
    /// Per-step attenuation `a_t`.
    pub a: Vec<f64>,
    /// Per-step noise scale `b_t`.
    pub b: Vec<f64>,
    /// Cumulative attenuation `c_t = a_1 ⋯ a_t` (equals `γ_t` for DDM).
    pub c: Vec<f64>,
    /// Marginal noise std `d_t` (equals `δ_t` for DDM).
    pub d: Vec<f64>,
    /// Reverse proposal std `σ_t`.
    pub sigma_step: Vec<f64>,
    /// `β_t` for DDPM; empty for DDM.
    pub beta: Vec<f64>,
}

/// Default DDPM bounds for `n_steps`, rescaled from the 1000-step linear schedule.
pub fn default_betas(n_steps: usize) -> (f64, f64) {
    (1e-4, 0.02 * 1000.0 / n_steps as f64)
}

pub fn make_ddpm_schedule(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if n_steps < 2 {
        return Err(Error::param("steps", "need at least 2 steps"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::param("beta", "require 0 < beta_min <= beta_max < 1"));
    }
    let n = n_steps;
    let mut beta = vec![0.0; n + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = beta_min + (beta_max - beta_min) * (t - 1) as f64 / (n - 1) as f64;
    }
    Ok(ddpm_from_betas(&beta[1..]))
}

/// Builds a DDPM schedule from explicit `β_1..β_N`.
pub fn ddpm_from_betas(betas: &[f64]) -> NoiseSchedule {
    let n = betas.len();
    let mut beta = vec![0.0];
    beta.extend_from_slice(betas);
    let mut a = vec![1.0; n + 1];
    let mut b = vec![0.0; n + 1];
    let mut c = vec![1.0; n + 1];
    let mut d2 = vec![0.0; n + 1];
    let mut sigma_step = vec![0.0; n + 1];
    for t in 1..=n {
        a[t] = (1.0 - beta[t]).sqrt();
        b[t] = beta[t].sqrt();
        c[t] = c[t - 1] * a[t];
        d2[t] = a[t] * a[t] * d2[t - 1] + beta[t];
        sigma_step[t] = if t == 1 {
            b[1]
        } else {
            (beta[t] * d2[t - 1] / d2[t]).sqrt()
        };
    }
    NoiseSchedule {
        kind: ScheduleKind::Ddpm,
        n_steps: n,
        a,
        b,
        c,
        d: d2.iter().map(|v| v.sqrt()).collect(),
        sigma_step,
        beta,
    }
}

/// Decoupled schedule on normalized time `t_k = k / N`: `γ = 1 - t_k`, `δ = √t_k`.
pub fn make_ddm_schedule(n_steps: usize) -> Result<NoiseSchedule> {
    if n_steps < 2 {
        return Err(Error::param("steps", "need at least 2 steps"));
    }
    let n = n_steps;
    let time = |k: usize| k as f64 / n as f64;
    let gamma: Vec<f64> = (0..=n).map(|k| 1.0 - time(k)).collect();
    let delta: Vec<f64> = (0..=n).map(|k| time(k).sqrt()).collect();
    let mut a = vec![1.0; n + 1];
    let mut b = vec![0.0; n + 1];
    let mut sigma_step = vec![0.0; n + 1];
    let dt = 1.0 / n as f64;
    for k in 1..=n {
        a[k] = gamma[k] / gamma[k - 1];
        b[k] = (delta[k].powi(2) - a[k].powi(2) * delta[k - 1].powi(2)).max(0.0).sqrt();
        let t = time(k);
        sigma_step[k] = (dt * (t - dt) / t).max(0.0).sqrt();
    }
    Ok(NoiseSchedule {
        kind: ScheduleKind::Ddm,
        n_steps: n,
        a,
        b,
        c: gamma,
        d: delta,
        sigma_step,
        beta: Vec::new(),
    })
}

impl NoiseSchedule {
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t > self.n_steps {
            return Err(Error::StepOutOfRange { t, n: self.n_steps });
        }
        Ok(())
    }

    pub fn require_ddpm(&self, what: &'static str) -> Result<()> {
        match self.kind {
            ScheduleKind::Ddpm => Ok(()),
            ScheduleKind::Ddm => Err(Error::UnsupportedSchedule(what)),
        }
    }

    /// Normalized DDM time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.n_steps as f64
    }
}

/// Draws `x_t ~ N(c_t x_0, d_t² I)` (`γ_t`, `δ_t` for DDM).
pub fn forward_sample(schedule: &NoiseSchedule, x0: &Grid, t: usize, seed: u64) -> Result<Grid> {
    if t == 0 || t > schedule.n_steps {
        return Err(Error::StepOutOfRange {
            t,
            n: schedule.n_steps,
        });
    }
    let (c, d) = (schedule.c[t], schedule.d[t]);
    if d == 0.0 {
        return Ok(x0.map(|v| c * v));
    }
    let mut rng = rng::stream(seed, &[tag::FORWARD, t as u64]);
    Ok(x0.map(|v| c * v + d * rng::normal(&mut rng)))
}

/// Runs the one-step recursion `x_s = a_s x_{s-1} + b_s n_s` for `s = 1..=t`.
pub fn forward_iterate(schedule: &NoiseSchedule, x0: &Grid, t: usize, seed: u64) -> Result<Grid> {
    schedule.check_step(t)?;
    let mut rng = rng::stream(seed, &[tag::FORWARD, u64::MAX]);
    let mut x = x0.clone();
    for s in 1..=t {
        let (a, b) = (schedule.a[s], schedule.b[s]);
        for v in &mut x.values {
            *v = a * *v + b * rng::normal(&mut rng);
        }
    }
    Ok(x)
}

/// Coefficients of `q(z_t | z_{t+1}, z_0) = N(u z_0 + v z_{t+1}, w²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoeffs {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

pub fn bridge_coeffs(schedule: &NoiseSchedule, t: usize) -> Result<BridgeCoeffs> {
    schedule.require_ddpm("observation bridge")?;
    if t >= schedule.n_steps {
        return Err(Error::StepOutOfRange {
            t,
            n: schedule.n_steps - 1,
        });
    }
    Ok(bridge_from(schedule.a[t + 1], schedule.b[t + 1], schedule.c[t], schedule.d[t]))
}

/// Ancestral bridge from next-step `(a, b)` and current marginal `(c, d)`.
pub fn bridge_from(a_next: f64, b_next: f64, c: f64, d: f64) -> BridgeCoeffs {
    let b2 = b_next * b_next;
    let d2 = d * d;
    let denom = a_next * a_next * d2 + b2;
    if denom == 0.0 {
        // deterministic step from a pinned state
        return BridgeCoeffs { u: c, v: 0.0, w: 0.0 };
    }
    BridgeCoeffs {
        u: c * b2 / denom,
        v: a_next * d2 / denom,
        w: (b2 * d2 / denom).sqrt(),
    }
}
