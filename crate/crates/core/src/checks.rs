//! Self-checks of the sampler against the analytic linear-Gaussian oracle.

use std::time::Instant;

use crate::error::Result;
use crate::grid::Grid;
use crate::observation::{build_mask, observe, MaskOperator, MaskStrategy, ObservationSet};
use crate::oracle::{map_tikhonov, posterior_gaussian, sequential_filter_with};
use crate::prior::{GaussianPrior, PriorHandle};
use crate::rng;
use crate::sampler::{generate_obs_sequence, reconstruct, weight_candidates, EnsembleState, SamplerConfig};
use crate::schedule::{forward_sample, make_ddm_schedule, make_ddpm_schedule, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        CheckResult { name, passed, detail }
    }
}

fn rel_l2(a: &Grid, b: &Grid) -> f64 {
    let num: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.values.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// The 16x16, 80 % missing, σ = 0.05, N = 100 setup shared by the posterior checks.
pub struct OracleSetup {
    pub prior: GaussianPrior,
    pub schedule: NoiseSchedule,
    pub truth: Grid,
    pub obs: ObservationSet,
}

impl OracleSetup {
    pub fn new(seed: u64) -> Result<Self> {
        let side = 16;
        let prior = GaussianPrior::homogeneous(side, side, 0.5, 0.04)?;
        let schedule = make_ddpm_schedule(100, 1e-4, 0.2)?;
        let mut r = rng::stream(seed, &[0xC0DE]);
        let truth = Grid::from_vec(side, side, (0..side * side).map(|_| 0.5 + 0.2 * rng::normal(&mut r)).collect())?;
        let mask = build_mask(MaskStrategy::RandomPixel, 0.8, (side, side), seed)?;
        let obs = observe(&truth, &mask, 0.05, seed)?;
        Ok(OracleSetup {
            prior,
            schedule,
            truth,
            obs,
        })
    }

    fn run(&self, m: usize, seed: u64) -> Result<crate::sampler::Reconstruction> {
        let cfg = SamplerConfig {
            m,
            seed,
            ..SamplerConfig::default()
        };
        reconstruct(&self.obs, &PriorHandle::Gaussian(self.prior.clone()), &self.schedule, &cfg)
    }
}

/// Mean of 200 reconstructions vs the exact posterior mean, plus the weight-sum bound over those runs.
pub fn check_posterior_mean(setup: &OracleSetup) -> Result<Vec<CheckResult>> {
    let t0 = Instant::now();
    let post = posterior_gaussian(&setup.prior, &setup.obs)?;
    let mut mean = Grid::zeros(16, 16);
    let mut worst = 0.0f64;
    let runs = 200;
    for seed in 0..runs {
        let rec = setup.run(10, seed)?;
        worst = worst.max(rec.trace.max_weight_sum_error);
        for (a, b) in mean.values.iter_mut().zip(&rec.map.values) {
            *a += b / runs as f64;
        }
    }
    let err = rel_l2(&mean, &post.mean);
    let secs = t0.elapsed().as_secs_f64();
    Ok(vec![
        CheckResult::new(
            "posterior mean of 200 samples",
            err <= 0.05 && secs < 120.0,
            format!("relative L2 {err:.4} (limit 0.05) in {secs:.1} s"),
        ),
        CheckResult::new("weight normalization", worst <= 1e-12, format!("max |sum p - 1| = {worst:.2e} (limit 1e-12)")),
    ])
}

/// Average single-run error at M = 100 must not exceed the error at M = 1.
pub fn check_candidate_count(setup: &OracleSetup) -> Result<CheckResult> {
    let post = posterior_gaussian(&setup.prior, &setup.obs)?;
    let trials = 50;
    let mut errs = [0.0; 2];
    for (k, m) in [1usize, 100].iter().enumerate() {
        for seed in 0..trials {
            errs[k] += rel_l2(&setup.run(*m, 1000 + seed)?.map, &post.mean) / trials as f64;
        }
    }
    Ok(CheckResult::new(
        "more candidates do not hurt",
        errs[1] <= errs[0],
        format!("mean relative L2 M=1 {:.4}, M=100 {:.4}", errs[0], errs[1]),
    ))
}

/// MAP estimate equals the posterior mean for zero-mean priors.
pub fn check_map_equals_mean(seed: u64) -> Result<CheckResult> {
    let mut r = rng::stream(seed, &[0x3A9]);
    let mut worst = 0.0f64;
    for i in 0..100u64 {
        let (w, h) = (3 + (i % 5) as usize, 2 + (i % 4) as usize);
        let var = Grid::from_vec(w, h, (0..w * h).map(|_| 0.01 + rng::normal(&mut r).abs()).collect())?;
        let prior = GaussianPrior::new(Grid::zeros(w, h), var)?;
        let mask = build_mask(MaskStrategy::RandomPixel, 0.5, (w, h), seed + i)?;
        let y: Vec<f64> = (0..mask.len()).map(|_| rng::normal(&mut r)).collect();
        let sigma = 0.01 + 0.5 * rng::normal(&mut r).abs();
        let obs = ObservationSet::new(mask, y, sigma)?;
        let a = map_tikhonov(&prior, &obs)?;
        let b = posterior_gaussian(&prior, &obs)?.mean;
        for (u, v) in a.values.iter().zip(&b.values) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(CheckResult::new("MAP equals posterior mean", worst <= 1e-10, format!("max abs difference {worst:.2e} (limit 1e-10)")))
}

/// Empirical forward marginals within three standard errors.
pub fn check_forward_marginals(seed: u64) -> Result<CheckResult> {
    let n = 10_000;
    let ddpm = make_ddpm_schedule(100, 1e-4, 0.2)?;
    let ddm = make_ddm_schedule(100)?;
    let mut r = rng::stream(seed, &[0xF0]);
    let mut worst = 0.0f64;
    for (k, sched) in [&ddpm, &ddm].iter().enumerate() {
        for j in 0..5u64 {
            let x0 = 2.0 * rng::normal(&mut r);
            let t = 1 + (rng::normal(&mut r).abs() * 40.0) as usize % 99;
            let xt = forward_sample(sched, &Grid::filled(100, 100, x0), t, seed + 10 * k as u64 + j)?;
            let mean = xt.values.iter().sum::<f64>() / n as f64;
            let var = xt.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (c, d) = (sched.c[t], sched.d[t]);
            let se_mean = d / (n as f64).sqrt();
            let se_std = d / (2.0 * (n as f64 - 1.0)).sqrt();
            worst = worst.max((mean - c * x0).abs() / se_mean).max((var.sqrt() - d).abs() / se_std);
        }
    }
    Ok(CheckResult::new("forward marginals", worst <= 3.0, format!("worst deviation {worst:.2} standard errors (limit 3)")))
}

/// Empirical means of the generated observation sequence equal `c_t y_0`.
pub fn check_sequence_marginals(seed: u64) -> Result<CheckResult> {
    let sched = make_ddpm_schedule(100, 1e-4, 0.2)?;
    let mask = MaskOperator::new(4, 1, vec![0, 1, 2, 3])?;
    let y0 = vec![0.9, -0.4, 0.1, 1.5];
    let obs = ObservationSet::new(mask, y0.clone(), 0.05)?;
    let n = 10_000;
    let ts = [25, 50, 75];
    let mut sums = vec![[0.0f64; 4]; 3];
    let mut sq = vec![[0.0f64; 4]; 3];
    for s in 0..n {
        let seq = generate_obs_sequence(&obs, &sched, rng::derive(seed, &[s]))?;
        for (k, &t) in ts.iter().enumerate() {
            for i in 0..4 {
                sums[k][i] += seq.y[t][i];
                sq[k][i] += seq.y[t][i].powi(2);
            }
        }
    }
    let mut worst = 0.0f64;
    for (k, &t) in ts.iter().enumerate() {
        for i in 0..4 {
            let mean = sums[k][i] / n as f64;
            let var = (sq[k][i] / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            worst = worst.max((mean - sched.c[t] * y0[i]).abs() / se);
        }
    }
    Ok(CheckResult::new(
        "observation-sequence marginals",
        worst <= 3.0,
        format!("worst deviation {worst:.2} standard errors at t in {{25, 50, 75}} (limit 3)"),
    ))
}

/// Residuals {0, 1, 2} with unit variance give probabilities ∝ {1, e^-1/2, e^-2}.
pub fn check_hand_weights() -> Result<CheckResult> {
    let ens = EnsembleState {
        t: 1,
        mu: Grid::zeros(1, 1),
        sigma_t: 1.0,
        candidates: [0.0, 1.0, 2.0].iter().map(|&v| Grid::filled(1, 1, v)).collect(),
        log_weights: vec![0.0; 3],
        probs: Vec::new(),
        underflow: false,
    };
    let ens = weight_candidates(ens, &[0.0], &MaskOperator::full(1, 1), 1.0, &[1.0])?;
    let raw = [1.0, (-0.5f64).exp(), (-2.0f64).exp()];
    let z: f64 = raw.iter().sum();
    let worst = ens.probs.iter().zip(raw).map(|(p, w)| (p - w / z).abs()).fold(0.0, f64::max);
    Ok(CheckResult::new("M=3 hand weights", worst <= 1e-10, format!("max abs error {worst:.2e} (limit 1e-10)")))
}

/// The Kalman filter updated only at t = 0 recovers the exact posterior.
pub fn check_filter_equivalence(setup: &OracleSetup) -> Result<CheckResult> {
    let seq = generate_obs_sequence(&setup.obs, &setup.schedule, 3)?;
    let filt = sequential_filter_with(&seq, &setup.obs.mask, &setup.prior, &setup.schedule, |t| t == 0)?;
    let post = posterior_gaussian(&setup.prior, &setup.obs)?;
    let at0 = &filt[0];
    let worst = at0
        .mean
        .values
        .iter()
        .zip(&post.mean.values)
        .chain(at0.var.values.iter().zip(&post.var.values))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(CheckResult::new(
        "filter over the collapsed sequence",
        worst <= 1e-12,
        format!("max abs difference {worst:.2e} (limit 1e-12)"),
    ))
}

/// Runs the whole suite.
pub fn oracle_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let setup = OracleSetup::new(seed)?;
    let mut out = check_posterior_mean(&setup)?;
    out.push(check_candidate_count(&setup)?);
    out.push(check_map_equals_mean(seed)?);
    out.push(check_forward_marginals(seed)?);
    out.push(check_sequence_marginals(seed)?);
    out.push(check_hand_weights()?);
    out.push(check_filter_equivalence(&setup)?);
    Ok(out)
}
