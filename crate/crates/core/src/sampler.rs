//! Posterior sampling by backward filtering over the diffusion chain.
//!
//! A noised observation sequence `y_N, ..., y_0` is drawn first. The reverse
//! chain then proposes `M` candidates per step around the denoiser mean,
//! weights them by the likelihood of `y_{t-1}`, and keeps one.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap};
use crate::observation::{MaskOperator, ObservationSet};
use crate::prior::{DataScaling, PriorHandle};
use crate::rng::{self, tag};
use crate::schedule::{bridge_coeffs, NoiseSchedule};

/// Smallest likelihood variance; keeps noiseless entries finite.
pub const VARIANCE_FLOOR: f64 = 1e-24;

/// Per-step noised observations; `y[t]` lives on the observed cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    pub y: Vec<Vec<f64>>,
    /// Measurement noise std per observed entry.
    pub sigma: Vec<f64>,
    pub n_steps: usize,
}

impl ObservationSequence {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Draws `y_N` from its marginal `N(c_N y_0, d_N²)` and bridges back towards the raw observation `y_0`.
///
/// With `c_N ≈ 0` the start is the standard normal `N(0, I)`.
pub fn generate_obs_sequence(obs: &ObservationSet, schedule: &NoiseSchedule, seed: u64) -> Result<ObservationSequence> {
    schedule.require_ddpm("observation sequence")?;
    let n = schedule.n_steps;
    let k = obs.len();
    let mut r = rng::stream(seed, &[tag::OBS_SEQ]);
    let mut y = vec![Vec::new(); n + 1];
    y[0] = obs.y.clone();
    let (cn, dn) = (schedule.c[n], schedule.d[n]);
    y[n] = obs.y.iter().map(|&v| cn * v + dn * rng::normal(&mut r)).collect();
    for t in (1..n).rev() {
        let bc = bridge_coeffs(schedule, t)?;
        let next = &y[t + 1];
        y[t] = (0..k)
            .map(|i| bc.u * obs.y[i] + bc.v * next[i] + bc.w * rng::normal(&mut r))
            .collect();
    }
    Ok(ObservationSequence {
        y,
        sigma: obs.noise_std.clone(),
        n_steps: n,
    })
}

/// Samples `x_N` from the posterior of a standard-normal state given `y_N`.
pub fn init_terminal_posterior(y_n: &[f64], mask: &MaskOperator, schedule: &NoiseSchedule, sigma: &[f64], seed: u64) -> Result<Grid> {
    schedule.require_ddpm("terminal posterior")?;
    if y_n.len() != mask.len() {
        return Err(Error::dims(mask.len(), y_n.len()));
    }
    if sigma.len() != mask.len() {
        return Err(Error::dims(mask.len(), sigma.len()));
    }
    let c2 = schedule.c[schedule.n_steps].powi(2);
    let mut r = rng::stream(seed, &[tag::TERMINAL]);
    let mut x = Grid::from_vec(mask.width, mask.height, rng::normals(&mut r, mask.cells()))?;
    for (j, &cell) in mask.observed.iter().enumerate() {
        let k = c2 * sigma[j] * sigma[j];
        let mean = y_n[j] / (1.0 + k);
        let var = k / (1.0 + k);
        x.values[cell] = mean + var.sqrt() * x.values[cell];
    }
    Ok(x)
}

/// Candidates for `x_{t-1}` with their (unnormalized then normalized) log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub t: usize,
    pub mu: Grid,
    pub sigma_t: f64,
    pub candidates: Vec<Grid>,
    pub log_weights: Vec<f64>,
    /// Normalized selection probabilities; empty until weighted.
    pub probs: Vec<f64>,
    /// Set when every weight underflowed and uniform weights were used.
    pub underflow: bool,
}

impl EnsembleState {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Effective sample size `1 / Σp²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.probs.iter().map(|p| p * p).sum::<f64>()
    }
}

/// Draws `M` candidates `mu + sigma_t g_i`; candidate `i` at step `t` uses its own stream.
pub fn propose_candidates(mu: &Grid, sigma_t: f64, m: usize, seed: u64, t: usize) -> Result<EnsembleState> {
    if m == 0 {
        return Err(Error::param("m", "need at least one candidate"));
    }
    if !(sigma_t >= 0.0 && sigma_t.is_finite()) {
        return Err(Error::param("sigma_t", "must be finite and non-negative"));
    }
    let mut candidates = Vec::with_capacity(m);
    let mut log_weights = Vec::with_capacity(m);
    for i in 0..m {
        let mut r = rng::stream(seed, &[tag::PROPOSE, t as u64, i as u64]);
        let g = rng::normals(&mut r, mu.len());
        log_weights.push(if sigma_t > 0.0 { -0.5 * g.iter().map(|v| v * v).sum::<f64>() } else { 0.0 });
        candidates.push(Grid {
            width: mu.width,
            height: mu.height,
            values: mu.values.iter().zip(&g).map(|(m, g)| m + sigma_t * g).collect(),
        });
    }
    Ok(EnsembleState {
        t,
        mu: mu.clone(),
        sigma_t,
        candidates,
        log_weights,
        probs: Vec::new(),
        underflow: false,
    })
}

/// Max-subtracted softmax; returns uniform probabilities and `true` when nothing is finite.
pub fn normalize_log_weights(log_weights: &[f64]) -> (Vec<f64>, bool) {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let uniform = || vec![1.0 / log_weights.len() as f64; log_weights.len()];
    if !max.is_finite() {
        return (uniform(), true);
    }
    let exp: Vec<f64> = log_weights.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return (uniform(), true);
    }
    (exp.into_iter().map(|e| e / total).collect(), false)
}

fn likelihood_variance(c_prev: f64, sigma: f64) -> f64 {
    (c_prev * c_prev * sigma * sigma).max(VARIANCE_FLOOR)
}

/// Adds the log-likelihood of `y_prev` under `N(A x, c_{t-1}² σ_i²)` and normalizes.
pub fn weight_candidates(mut ens: EnsembleState, y_prev: &[f64], mask: &MaskOperator, c_prev: f64, sigma: &[f64]) -> Result<EnsembleState> {
    if y_prev.len() != mask.len() {
        return Err(Error::dims(mask.len(), y_prev.len()));
    }
    if sigma.len() != mask.len() {
        return Err(Error::dims(mask.len(), sigma.len()));
    }
    for (lw, cand) in ens.log_weights.iter_mut().zip(&ens.candidates) {
        cand.check_same(&ens.mu)?;
        let mut ll = 0.0;
        for (j, &cell) in mask.observed.iter().enumerate() {
            let r = y_prev[j] - cand.values[cell];
            ll -= r * r / (2.0 * likelihood_variance(c_prev, sigma[j]));
        }
        *lw += ll;
    }
    let (probs, underflow) = normalize_log_weights(&ens.log_weights);
    ens.probs = probs;
    ens.underflow = underflow;
    Ok(ens)
}

/// Inverse-CDF draw from normalized probabilities.
pub fn multinomial(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Multinomial draw of one candidate index.
pub fn select_candidate(ens: &EnsembleState, seed: u64) -> Result<usize> {
    if ens.probs.len() != ens.len() || ens.is_empty() {
        return Err(Error::param("ensemble", "weights are not normalized"));
    }
    if ens.len() == 1 {
        return Ok(0);
    }
    let mut r = rng::stream(seed, &[tag::SELECT, ens.t as u64]);
    Ok(multinomial(&ens.probs, r.random::<f64>()))
}

/// How a candidate survives each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Every cell picks among the `M` candidate values using its own log-weight.
    #[default]
    PerCell,
    /// One whole candidate grid is drawn from the joint weights.
    Joint,
}

/// Per-cell selection with the same log-weights evaluated coordinate-wise.
///
/// Returns the assembled state, the largest deviation of any per-cell weight
/// sum from one, the number of cells whose weights underflowed, and the most
/// frequently chosen candidate.
pub fn select_per_cell(
    ens: &EnsembleState,
    y_prev: &[f64],
    mask: &MaskOperator,
    c_prev: f64,
    sigma: &[f64],
    proposal_term: bool,
    seed: u64,
) -> Result<(Grid, f64, usize, usize)> {
    let m = ens.len();
    let cells = ens.mu.len();
    let mut r = rng::stream(seed, &[tag::SELECT, ens.t as u64]);
    let mut out = Grid::zeros(ens.mu.width, ens.mu.height);
    let mut observed = vec![usize::MAX; cells];
    for (j, &cell) in mask.observed.iter().enumerate() {
        observed[cell] = j;
    }
    let mut lw = vec![0.0; m];
    let mut counts = vec![0usize; m];
    let mut worst = 0.0f64;
    let mut underflows = 0;
    for cell in 0..cells {
        let j = observed[cell];
        if m == 1 || (ens.sigma_t == 0.0 && j == usize::MAX) {
            out.values[cell] = ens.candidates[0].values[cell];
            continue;
        }
        for (i, cand) in ens.candidates.iter().enumerate() {
            let x = cand.values[cell];
            let mut l = 0.0;
            if proposal_term && ens.sigma_t > 0.0 {
                let g = (x - ens.mu.values[cell]) / ens.sigma_t;
                l -= 0.5 * g * g;
            }
            if j != usize::MAX {
                let res = y_prev[j] - x;
                l -= res * res / (2.0 * likelihood_variance(c_prev, sigma[j]));
            }
            lw[i] = l;
        }
        let (probs, underflow) = normalize_log_weights(&lw);
        if underflow {
            underflows += 1;
        }
        worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
        let pick = multinomial(&probs, r.random::<f64>());
        if j != usize::MAX {
            counts[pick] += 1;
        }
        out.values[cell] = ens.candidates[pick].values[cell];
    }
    let mode = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((out, worst, underflows, mode))
}

fn default_m() -> usize {
    10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Candidates per step.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub record_trace: bool,
    #[serde(default)]
    pub selection: Selection,
    /// Keep the proposal density term in the log-weights.
    #[serde(default = "default_true")]
    pub proposal_term: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            m: default_m(),
            seed: 0,
            record_trace: false,
            selection: Selection::PerCell,
            proposal_term: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::param("m", "need at least one candidate"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub ess: f64,
    pub min_residual: f64,
    pub selected_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    /// Per-step records, newest step first; filled only when tracing is enabled.
    pub steps: Vec<StepTrace>,
    /// Largest `|Σp - 1|` seen in any normalization.
    pub max_weight_sum_error: f64,
    /// Normalizations that fell back to uniform weights.
    pub underflow_count: usize,
    pub min_ess: f64,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,ess,min_residual,selected_index\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.ess, r.min_residual, r.selected_index));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_bytes(path, self.to_csv().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub map: GridMap,
    pub trace: Trace,
}

/// Observations mapped into the prior's model space.
pub fn to_model_space(obs: &ObservationSet, scaling: DataScaling) -> ObservationSet {
    let mut out = obs.clone();
    out.y = obs.y.iter().map(|&v| scaling.to_model(v)).collect();
    out.noise_std = obs.noise_std.iter().map(|&s| s / scaling.scale).collect();
    out.sigma = obs.sigma / scaling.scale;
    out
}

/// Draws one posterior sample of the map given `obs`; the result is clamped to `[0, 1]`.
pub fn reconstruct(obs: &ObservationSet, prior: &PriorHandle, schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<Reconstruction> {
    config.validate()?;
    schedule.require_ddpm("posterior sampling")?;
    prior.check_schedule(schedule)?;
    if let Some(dims) = prior.dims() {
        if dims != obs.dims() {
            return Err(Error::dims(dims.0 * dims.1, obs.mask.cells()));
        }
    }
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let scaling = prior.scaling();
    let model_obs = to_model_space(obs, scaling);
    let seed = config.seed;
    let seq = generate_obs_sequence(&model_obs, schedule, seed)?;
    let sigma = &seq.sigma;
    let mask = &model_obs.mask;
    let mut x = init_terminal_posterior(&seq.y[schedule.n_steps], mask, schedule, sigma, seed)?;
    let mut trace = Trace {
        min_ess: f64::INFINITY,
        ..Trace::default()
    };
    for t in (1..=schedule.n_steps).rev() {
        let step = |e: Error| Error::SamplerStep { step: t, source: Box::new(e) };
        let eps = prior.epsilon(&x, t, schedule).map_err(step)?;
        let mu = prior.reverse_mean(&x, &eps, t, schedule).map_err(step)?;
        if mu.values.iter().any(|v| !v.is_finite()) {
            return Err(step(Error::param("mu", "non-finite denoiser mean")));
        }
        let mut ens = propose_candidates(&mu, schedule.sigma_step[t], config.m, seed, t).map_err(step)?;
        if !config.proposal_term {
            ens.log_weights.iter_mut().for_each(|l| *l = 0.0);
        }
        let y_prev = &seq.y[t - 1];
        let c_prev = schedule.c[t - 1];
        let ens = weight_candidates(ens, y_prev, mask, c_prev, sigma).map_err(step)?;
        trace.max_weight_sum_error = trace.max_weight_sum_error.max((ens.probs.iter().sum::<f64>() - 1.0).abs());
        trace.underflow_count += ens.underflow as usize;
        let ess = ens.ess();
        trace.min_ess = trace.min_ess.min(ess);
        let selected = match config.selection {
            Selection::Joint => {
                let i = select_candidate(&ens, seed).map_err(step)?;
                x = ens.candidates[i].clone();
                i
            }
            Selection::PerCell => {
                let (grid, worst, underflows, mode) =
                    select_per_cell(&ens, y_prev, mask, c_prev, sigma, config.proposal_term, seed).map_err(step)?;
                trace.max_weight_sum_error = trace.max_weight_sum_error.max(worst);
                trace.underflow_count += underflows;
                x = grid;
                mode
            }
        };
        if config.record_trace {
            let min_residual = ens
                .candidates
                .iter()
                .map(|c| {
                    mask.observed
                        .iter()
                        .zip(y_prev)
                        .map(|(&cell, y)| (y - c.values[cell]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            trace.steps.push(StepTrace {
                step: t,
                ess,
                min_residual,
                selected_index: selected,
            });
        }
    }
    let map = x.map(|z| scaling.to_data(z)).clamp01();
    Ok(Reconstruction { map, trace })
}
