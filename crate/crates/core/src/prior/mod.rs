//! Priors over maps: an analytic per-cell Gaussian and a learned denoiser.

pub mod denoiser;
pub mod nn;

use serde::{Deserialize, Serialize};

pub use denoiser::{
    moving_average, train_denoiser, train_denoiser_with, write_loss_csv, Architecture, DataScaling, DenoiserModel, LossRecord,
    TrainConfig,
};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{self, tag};
use crate::schedule::{NoiseSchedule, ScheduleKind};

/// Independent per-cell Gaussian prior `x0 ~ N(mean, diag(var))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: Grid,
    pub var: Grid,
}

impl GaussianPrior {
    pub fn new(mean: Grid, var: Grid) -> Result<Self> {
        mean.check_same(&var)?;
        if var.values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param("var", "must be finite and non-negative"));
        }
        Ok(GaussianPrior { mean, var })
    }

    pub fn homogeneous(width: usize, height: usize, mean: f64, var: f64) -> Result<Self> {
        Self::new(Grid::filled(width, height, mean), Grid::filled(width, height, var))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mean.dims()
    }

    /// Exact `E[x0 | x_t]` under `x_t = c x0 + d n`.
    pub fn posterior_mean(&self, x_t: &Grid, c: f64, d: f64) -> Result<Grid> {
        self.mean.check_same(x_t)?;
        Ok(Grid {
            width: x_t.width,
            height: x_t.height,
            values: (0..x_t.len())
                .map(|i| {
                    let (m, v) = (self.mean.values[i], self.var.values[i]);
                    let denom = c * c * v + d * d;
                    if denom == 0.0 {
                        m
                    } else {
                        m + c * v * (x_t.values[i] - c * m) / denom
                    }
                })
                .collect(),
        })
    }
}

/// Per-cell mean and variance of a collection of maps.
pub fn fit_gaussian_prior(maps: &[Grid], var_floor: f64) -> Result<GaussianPrior> {
    let first = maps.first().ok_or(Error::EmptyRegion)?;
    let n = maps.len() as f64;
    let mut mean = Grid::zeros(first.width, first.height);
    for m in maps {
        first.check_same(m)?;
        for (a, b) in mean.values.iter_mut().zip(&m.values) {
            *a += b / n;
        }
    }
    let mut var = Grid::zeros(first.width, first.height);
    for m in maps {
        for ((v, x), mu) in var.values.iter_mut().zip(&m.values).zip(&mean.values) {
            *v += (x - mu).powi(2) / n;
        }
    }
    var.values.iter_mut().for_each(|v| *v = v.max(var_floor));
    GaussianPrior::new(mean, var)
}

/// Score of the diffused Gaussian marginal `N(c_t m, c_t² v + d_t²)`.
pub fn gaussian_score(prior: &GaussianPrior, x_t: &Grid, t: usize, schedule: &NoiseSchedule) -> Result<Grid> {
    schedule.check_step(t)?;
    prior.mean.check_same(x_t)?;
    let (c, d) = (schedule.c[t], schedule.d[t]);
    Ok(Grid {
        width: x_t.width,
        height: x_t.height,
        values: (0..x_t.len())
            .map(|i| -(x_t.values[i] - c * prior.mean.values[i]) / (c * c * prior.var.values[i] + d * d))
            .collect(),
    })
}

/// `x0_hat = (x_t + d_t² s) / c_t`.
pub fn tweedie_x0(schedule: &NoiseSchedule, x_t: &Grid, t: usize, score: &Grid) -> Result<Grid> {
    schedule.check_step(t)?;
    let (c, d) = (schedule.c[t], schedule.d[t]);
    if c <= 0.0 {
        return Err(Error::param("t", format!("signal coefficient vanishes at step {t}")));
    }
    x_t.zip_map(score, |x, s| (x + d * d * s) / c)
}

fn noise_scale(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule.check_step(t)?;
    let d = schedule.d[t];
    if d <= 0.0 {
        return Err(Error::param("t", format!("noise coefficient vanishes at step {t}")));
    }
    Ok(d)
}

/// `s = -eps / d_t`.
pub fn epsilon_to_score(schedule: &NoiseSchedule, eps: &Grid, t: usize) -> Result<Grid> {
    let d = noise_scale(schedule, t)?;
    Ok(eps.map(|e| -e / d))
}

/// `eps = -d_t s`.
pub fn score_to_epsilon(schedule: &NoiseSchedule, score: &Grid, t: usize) -> Result<Grid> {
    let d = noise_scale(schedule, t)?;
    Ok(score.map(|s| -d * s))
}

/// Reverse-step mean of `prior` at `x_t`; see [`PriorHandle::reverse_mean`].
pub fn denoiser_mean(prior: &PriorHandle, x_t: &Grid, t: usize, schedule: &NoiseSchedule) -> Result<Grid> {
    let eps = prior.epsilon(x_t, t, schedule)?;
    prior.reverse_mean(x_t, &eps, t, schedule)
}

/// Reverse-step mean from a precomputed noise estimate.
pub fn ancestral_mean(schedule: &NoiseSchedule, x_t: &Grid, eps: &Grid, t: usize) -> Result<Grid> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, n: schedule.n_steps });
    }
    let d = noise_scale(schedule, t)?;
    let (a, b) = (schedule.a[t], schedule.b[t]);
    x_t.zip_map(eps, |x, e| (x - b * b / d * e) / a)
}

/// Reverse-step mean through a clipped clean estimate:
/// `x0 = clamp((x_t - d_t eps) / c_t, lo, hi)`, mean `= c_{t-1} β_t / d_t² x0 + a_t d_{t-1}² / d_t² x_t`.
///
/// Without clipping this equals [`ancestral_mean`].
pub fn clipped_mean(schedule: &NoiseSchedule, x_t: &Grid, eps: &Grid, t: usize, lo: f64, hi: f64) -> Result<Grid> {
    if t == 0 {
        return Err(Error::StepOutOfRange { t, n: schedule.n_steps });
    }
    schedule.require_ddpm("clipped reverse mean")?;
    let d = noise_scale(schedule, t)?;
    let c = schedule.c[t];
    if c <= 0.0 {
        return Err(Error::param("t", format!("signal coefficient vanishes at step {t}")));
    }
    let (a, beta, cp, dp) = (schedule.a[t], schedule.beta[t], schedule.c[t - 1], schedule.d[t - 1]);
    let (k0, kx) = (cp * beta / (d * d), a * dp * dp / (d * d));
    x_t.zip_map(eps, |x, e| k0 * ((x - d * e) / c).clamp(lo, hi) + kx * x)
}

/// A prior usable by the samplers; all grids it sees are in model space.
#[derive(Debug, Clone)]
pub enum PriorHandle {
    Gaussian(GaussianPrior),
    Learned(Box<DenoiserModel>),
}

impl PriorHandle {
    pub fn name(&self) -> &'static str {
        match self {
            PriorHandle::Gaussian(_) => "gaussian",
            PriorHandle::Learned(_) => "learned",
        }
    }

    pub fn scaling(&self) -> DataScaling {
        match self {
            PriorHandle::Gaussian(_) => DataScaling::IDENTITY,
            PriorHandle::Learned(m) => m.scaling,
        }
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            PriorHandle::Gaussian(g) => Some(g.dims()),
            PriorHandle::Learned(_) => None,
        }
    }

    /// Checks that this prior can drive `schedule`.
    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        match self {
            PriorHandle::Gaussian(_) => Ok(()),
            PriorHandle::Learned(m) => {
                schedule.require_ddpm("learned prior")?;
                if m.n_steps != schedule.n_steps {
                    return Err(Error::param(
                        "n_steps",
                        format!("model was trained with {} steps, schedule has {}", m.n_steps, schedule.n_steps),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Noise estimates for a batch of grids at step `t`.
    pub fn epsilon_batch(&self, xs: &[&Grid], t: usize, schedule: &NoiseSchedule) -> Result<Vec<Grid>> {
        schedule.check_step(t)?;
        let d = schedule.d[t];
        match self {
            PriorHandle::Gaussian(g) => xs
                .iter()
                .map(|x| Ok(gaussian_score(g, x, t, schedule)?.map(|s| -d * s)))
                .collect(),
            PriorHandle::Learned(m) => m.predict_batch(xs, &vec![t as f64; xs.len()]),
        }
    }

    pub fn epsilon(&self, x_t: &Grid, t: usize, schedule: &NoiseSchedule) -> Result<Grid> {
        Ok(self.epsilon_batch(&[x_t], t, schedule)?.remove(0))
    }

    /// Reverse-step mean given the noise estimate `eps`.
    ///
    /// The Gaussian prior uses the exact ancestral mean; the learned prior clips its clean
    /// estimate to the model-space image of `[0, 1]`.
    pub fn reverse_mean(&self, x_t: &Grid, eps: &Grid, t: usize, schedule: &NoiseSchedule) -> Result<Grid> {
        match self {
            PriorHandle::Gaussian(_) => ancestral_mean(schedule, x_t, eps, t),
            PriorHandle::Learned(m) => {
                let (lo, hi) = (m.scaling.to_model(0.0), m.scaling.to_model(1.0));
                clipped_mean(schedule, x_t, eps, t, lo.min(hi), lo.max(hi))
            }
        }
    }

    /// Estimate of `E[x0 | x_t]`.
    pub fn x0_estimate(&self, x_t: &Grid, t: usize, schedule: &NoiseSchedule) -> Result<Grid> {
        schedule.check_step(t)?;
        let (c, d) = (schedule.c[t], schedule.d[t]);
        match self {
            PriorHandle::Gaussian(g) => g.posterior_mean(x_t, c, d),
            PriorHandle::Learned(_) => {
                if c == 0.0 {
                    return Err(Error::UnsupportedSchedule("learned prior cannot estimate x0 where the signal vanishes"));
                }
                let eps = self.epsilon(x_t, t, schedule)?;
                tweedie_x0(schedule, x_t, t, &epsilon_to_score(schedule, &eps, t)?)
            }
        }
    }
}

/// Draws an unconditional map by ancestral sampling; the result is in data space.
pub fn sample_prior(prior: &PriorHandle, schedule: &NoiseSchedule, width: usize, height: usize, seed: u64) -> Result<Grid> {
    prior.check_schedule(schedule)?;
    if let Some(d) = prior.dims() {
        if d != (width, height) {
            return Err(Error::dims(d.0 * d.1, width * height));
        }
    }
    let n = schedule.n_steps;
    let mut r = rng::stream(seed, &[tag::PRIOR_SAMPLE]);
    let len = width * height;
    let mut x = Grid::from_vec(width, height, rng::normals(&mut r, len))?;
    for t in (1..=n).rev() {
        let mean = match schedule.kind {
            ScheduleKind::Ddpm => denoiser_mean(prior, &x, t, schedule)?,
            ScheduleKind::Ddm => ddm_mean(prior, &x, t, schedule)?,
        };
        let sigma = schedule.sigma_step[t];
        let noise = rng::normals(&mut r, len);
        x = Grid {
            width,
            height,
            values: mean.values.iter().zip(&noise).map(|(m, g)| m + sigma * g).collect(),
        };
    }
    let scaling = prior.scaling();
    Ok(x.map(|z| scaling.to_data(z)))
}

/// Reverse mean `x_t + dt x0_hat - (dt / sqrt(t)) eps_hat` of the linear-interpolation schedule.
pub fn ddm_mean(prior: &PriorHandle, x_t: &Grid, k: usize, schedule: &NoiseSchedule) -> Result<Grid> {
    let tk = schedule.time(k);
    let dt = 1.0 / schedule.n_steps as f64;
    let (gamma, delta) = (schedule.c[k], schedule.d[k]);
    let x0 = prior.x0_estimate(x_t, k, schedule)?;
    Ok(Grid {
        width: x_t.width,
        height: x_t.height,
        values: x_t
            .values
            .iter()
            .zip(&x0.values)
            .map(|(&x, &x0)| {
                let eps = (x - gamma * x0) / delta;
                x + dt * x0 - dt / tk.sqrt() * eps
            })
            .collect(),
    })
}
