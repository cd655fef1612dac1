//! Closed-form inference for a diagonal Gaussian prior under a selection mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::observation::ObservationSet;
use crate::prior::GaussianPrior;
use crate::sampler::ObservationSequence;
use crate::schedule::NoiseSchedule;

/// Per-cell Gaussian; `var = 0` marks a hard constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: Grid,
    pub var: Grid,
}

fn check_obs(prior: &GaussianPrior, obs: &ObservationSet) -> Result<()> {
    if prior.dims() != obs.dims() {
        let (w, h) = prior.dims();
        return Err(Error::dims(w * h, obs.mask.cells()));
    }
    Ok(())
}

/// Conjugate update of one cell with one measurement.
fn conjugate(m: f64, v: f64, y: f64, noise_var: f64) -> (f64, f64) {
    if noise_var == 0.0 {
        return (y, 0.0);
    }
    if v == 0.0 {
        return (m, 0.0);
    }
    let post = 1.0 / (1.0 / v + 1.0 / noise_var);
    (post * (m / v + y / noise_var), post)
}

/// Exact posterior `p(x | y)`.
pub fn posterior_gaussian(prior: &GaussianPrior, obs: &ObservationSet) -> Result<GaussianPosterior> {
    check_obs(prior, obs)?;
    let mut mean = prior.mean.clone();
    let mut var = prior.var.clone();
    for (j, &cell) in obs.mask.observed.iter().enumerate() {
        let s = obs.noise_std[j];
        let (m, v) = conjugate(prior.mean.values[cell], prior.var.values[cell], obs.y[j], s * s);
        mean.values[cell] = m;
        var.values[cell] = v;
    }
    Ok(GaussianPosterior { mean, var })
}

/// Regularized least squares `(AᵀA + σ²Σ⁻¹)⁻¹Aᵀ(y - A m) + m`.
///
/// For a zero-mean prior this is the textbook Tikhonov estimate: observed cells
/// become `y / (1 + σ²/v)` and unobserved cells stay at zero.
pub fn map_tikhonov(prior: &GaussianPrior, obs: &ObservationSet) -> Result<Grid> {
    check_obs(prior, obs)?;
    let mut out = prior.mean.clone();
    for (j, &cell) in obs.mask.observed.iter().enumerate() {
        let s2 = obs.noise_std[j].powi(2);
        let (m, v) = (prior.mean.values[cell], prior.var.values[cell]);
        out.values[cell] = if v == 0.0 { m } else { m + (obs.y[j] - m) / (1.0 + s2 / v) };
    }
    Ok(out)
}

/// Kalman filter run backward over the diffused chain, `p(x_t | y_{t..N})` for every `t`.
///
/// Entry `t` of the result is the filtering distribution at step `t`.
pub fn sequential_filter(
    seq: &ObservationSequence,
    mask: &crate::observation::MaskOperator,
    prior: &GaussianPrior,
    schedule: &NoiseSchedule,
) -> Result<Vec<GaussianPosterior>> {
    sequential_filter_with(seq, mask, prior, schedule, |_| true)
}

/// As [`sequential_filter`], applying the measurement update only at steps where `include(t)`.
pub fn sequential_filter_with(
    seq: &ObservationSequence,
    mask: &crate::observation::MaskOperator,
    prior: &GaussianPrior,
    schedule: &NoiseSchedule,
    include: impl Fn(usize) -> bool,
) -> Result<Vec<GaussianPosterior>> {
    schedule.require_ddpm("sequential filter")?;
    let n = schedule.n_steps;
    if seq.n_steps != n || seq.y.len() != n + 1 {
        return Err(Error::dims(n + 1, seq.y.len()));
    }
    if prior.dims() != (mask.width, mask.height) {
        return Err(Error::dims(prior.mean.len(), mask.cells()));
    }
    let cells = prior.mean.len();
    let (w, h) = prior.dims();
    let marginal = |t: usize, i: usize| {
        let c = schedule.c[t];
        let d = schedule.d[t];
        (c * prior.mean.values[i], c * c * prior.var.values[i] + d * d)
    };
    let update = |mean: &mut [f64], var: &mut [f64], t: usize| {
        if !include(t) {
            return;
        }
        let c2 = schedule.c[t].powi(2);
        for (j, &cell) in mask.observed.iter().enumerate() {
            let nv = c2 * seq.sigma[j].powi(2);
            let (m, v) = conjugate(mean[cell], var[cell], seq.y[t][j], nv);
            mean[cell] = m;
            var[cell] = v;
        }
    };
    let mut mean: Vec<f64> = (0..cells).map(|i| marginal(n, i).0).collect();
    let mut var: Vec<f64> = (0..cells).map(|i| marginal(n, i).1).collect();
    update(&mut mean, &mut var, n);
    let mut out = vec![None; n + 1];
    out[n] = Some((mean.clone(), var.clone()));
    for t in (1..=n).rev() {
        let (a, b2) = (schedule.a[t], schedule.b[t].powi(2));
        for i in 0..cells {
            // reverse conditional x_{t-1} | x_t of the exact Gaussian chain
            let (mp, vp) = marginal(t - 1, i);
            let vt = a * a * vp + b2;
            let gain = a * vp / vt;
            let offset = mp - gain * a * mp;
            let noise = vp * b2 / vt;
            mean[i] = offset + gain * mean[i];
            var[i] = gain * gain * var[i] + noise;
        }
        update(&mut mean, &mut var, t - 1);
        out[t - 1] = Some((mean.clone(), var.clone()));
    }
    out.into_iter()
        .map(|e| {
            let (m, v) = e.expect("every step filled");
            Ok(GaussianPosterior {
                mean: Grid::from_vec(w, h, m)?,
                var: Grid::from_vec(w, h, v)?,
            })
        })
        .collect()
}
