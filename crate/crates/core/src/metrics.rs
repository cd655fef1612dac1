//! Reconstruction quality metrics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap};
use crate::scene_sim::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub max_value: f64,
    pub ssim_window: usize,
    pub ssim_std: f64,
    pub srq_radius: usize,
    pub bia_radius: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            max_value: 1.0,
            ssim_window: 7,
            ssim_std: 1.5,
            srq_radius: 8,
            bia_radius: 3,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_value > 0.0 && self.max_value.is_finite()) {
            return Err(Error::param("max_value", "must be positive"));
        }
        if self.ssim_window == 0 {
            return Err(Error::param("ssim_window", "must be positive"));
        }
        if !(self.ssim_std > 0.0) {
            return Err(Error::param("ssim_std", "must be positive"));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (0.01 * self.max_value).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.max_value).powi(2)
    }

    /// Normalized separable Gaussian weights.
    pub fn window_weights(&self) -> Vec<f64> {
        let k = self.ssim_window;
        let mid = (k as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..k)
            .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * self.ssim_std * self.ssim_std)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

fn mse_over(a: &[f64], b: &[f64], cells: impl Iterator<Item = usize>) -> (f64, usize) {
    let (mut sum, mut n) = (0.0, 0);
    for i in cells {
        sum += (a[i] - b[i]).powi(2);
        n += 1;
    }
    (sum / n as f64, n)
}

fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_value * max_value / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(a: &Grid, b: &Grid, cfg: &MetricsConfig) -> Result<f64> {
    a.check_same(b)?;
    let (mse, _) = mse_over(&a.values, &b.values, 0..a.len());
    Ok(psnr_from_mse(mse, cfg.max_value))
}

pub fn rmse(truth: &Grid, pred: &Grid) -> Result<f64> {
    truth.check_same(pred)?;
    Ok(mse_over(&truth.values, &pred.values, 0..truth.len()).0.sqrt())
}

/// `Σ(x - x̂)² / Σx²`.
pub fn nmse(truth: &Grid, pred: &Grid) -> Result<f64> {
    truth.check_same(pred)?;
    nmse_over(&truth.values, &pred.values, 0..truth.len())
}

fn nmse_over(truth: &[f64], pred: &[f64], cells: impl Iterator<Item = usize>) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in cells {
        num += (truth[i] - pred[i]).powi(2);
        den += truth[i] * truth[i];
    }
    if den == 0.0 {
        return Err(Error::ZeroTruth);
    }
    Ok(num / den)
}

/// SSIM of one window given weighted moments.
pub fn ssim_formula(mu_x: f64, mu_y: f64, var_x: f64, var_y: f64, cov: f64, cfg: &MetricsConfig) -> f64 {
    let (c1, c2) = (cfg.c1(), cfg.c2());
    ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
}

/// Mean SSIM over sliding Gaussian windows lying inside rows `r0..r1`, cols `c0..c1`.
fn ssim_box(a: &Grid, b: &Grid, (r0, r1, c0, c1): (usize, usize, usize, usize), cfg: &MetricsConfig) -> Result<f64> {
    let k = cfg.ssim_window;
    let (bw, bh) = (c1 - c0, r1 - r0);
    if bw < k || bh < k {
        return Err(Error::GridTooSmall {
            width: bw,
            height: bh,
            window: k,
        });
    }
    let g = cfg.window_weights();
    let mut total = 0.0;
    let mut count = 0usize;
    for top in r0..=r1 - k {
        for left in c0..=c1 - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, gi) in g.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let w = gi * gj;
                    let idx = (top + i) * a.width + left + j;
                    let (x, y) = (a.values[idx], b.values[idx]);
                    mx += w * x;
                    my += w * y;
                    xx += w * x * x;
                    yy += w * y * y;
                    xy += w * x * y;
                }
            }
            let vx = (xx - mx * mx).max(0.0);
            let vy = (yy - my * my).max(0.0);
            total += ssim_formula(mx, my, vx, vy, xy - mx * my, cfg);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn ssim(a: &Grid, b: &Grid, cfg: &MetricsConfig) -> Result<f64> {
    a.check_same(b)?;
    ssim_box(a, b, (0, a.height, 0, a.width), cfg)
}

fn non_building_argmax(recon: &GridMap, scene: &Scene) -> usize {
    let mut best = None;
    for (i, &v) in recon.values.iter().enumerate() {
        if scene.buildings[i] == 1 {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(scene.tx_index(), |b| b.0)
}

/// Source position error in cells: distance from the reconstruction's open-air argmax to the transmitter.
pub fn spe(recon: &GridMap, scene: &Scene) -> Result<f64> {
    if recon.dims() != (scene.width, scene.height) {
        return Err(Error::dims(format!("{}x{}", scene.width, scene.height), format!("{}x{}", recon.width, recon.height)));
    }
    let i = non_building_argmax(recon, scene);
    let (r, c) = ((i / recon.width) as f64, (i % recon.width) as f64);
    Ok(((r - scene.tx.0 as f64).powi(2) + (c - scene.tx.1 as f64).powi(2)).sqrt())
}

/// A set of row-major cell indices on a `width x height` grid, sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<usize>,
}

impl Region {
    pub fn full(width: usize, height: usize) -> Self {
        Region {
            width,
            height,
            cells: (0..width * height).collect(),
        }
    }

    /// The `(2r+1)²` square around `center`, clipped at the borders.
    pub fn square(width: usize, height: usize, center: (usize, usize), radius: usize) -> Self {
        let (r0, r1) = (center.0.saturating_sub(radius), (center.0 + radius + 1).min(height));
        let (c0, c1) = (center.1.saturating_sub(radius), (center.1 + radius + 1).min(width));
        let cells = (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * width + c)).collect();
        Region { width, height, cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Half-open bounding box `(r0, r1, c0, c1)`.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let first = self.cells.first()?;
        let last = self.cells.last()?;
        let (c0, c1) = self.cells.iter().fold((usize::MAX, 0), |(lo, hi), &i| {
            let c = i % self.width;
            (lo.min(c), hi.max(c + 1))
        });
        Some((first / self.width, last / self.width + 1, c0, c1))
    }
}

/// Open-air cells within Chebyshev distance `radius` of a building cell.
pub fn building_region(scene: &Scene, radius: usize) -> Region {
    let (w, h) = (scene.width, scene.height);
    let mut near = vec![false; w * h];
    if radius > 0 {
        for r in 0..h {
            for c in 0..w {
                if !scene.is_building(r, c) {
                    continue;
                }
                for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
                    for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
                        near[rr * w + cc] = true;
                    }
                }
            }
        }
    }
    let cells = (0..w * h).filter(|&i| near[i] && scene.buildings[i] == 0).collect();
    Region {
        width: w,
        height: h,
        cells,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub rmse: f64,
}

/// Metrics restricted to `region`; SSIM slides over windows inside its bounding box.
///
/// When the bounding box is smaller than the window, SSIM falls back to a single
/// uniformly weighted window over the region cells.
pub fn region_metrics(recon: &Grid, truth: &Grid, region: &Region, cfg: &MetricsConfig) -> Result<RegionMetrics> {
    recon.check_same(truth)?;
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if (region.width, region.height) != truth.dims() {
        return Err(Error::dims(truth.len(), region.width * region.height));
    }
    let cells = || region.cells.iter().copied();
    let (mse, _) = mse_over(&recon.values, &truth.values, cells());
    let nmse = nmse_over(&truth.values, &recon.values, cells())?;
    let bbox = region.bounding_box().ok_or(Error::EmptyRegion)?;
    let ssim = if bbox.1 - bbox.0 >= cfg.ssim_window && bbox.3 - bbox.2 >= cfg.ssim_window {
        ssim_box(recon, truth, bbox, cfg)?
    } else {
        let n = region.len() as f64;
        let mean = |v: &[f64]| cells().map(|i| v[i]).sum::<f64>() / n;
        let (mx, my) = (mean(&recon.values), mean(&truth.values));
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in cells() {
            let (dx, dy) = (recon.values[i] - mx, truth.values[i] - my);
            vx += dx * dx / n;
            vy += dy * dy / n;
            cxy += dx * dy / n;
        }
        ssim_formula(mx, my, vx, vy, cxy, cfg)
    };
    Ok(RegionMetrics {
        psnr: psnr_from_mse(mse, cfg.max_value),
        ssim,
        nmse,
        rmse: mse.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub method: String,
    pub map: usize,
    pub mask_rate: f64,
    pub sigma: f64,
    pub aware: bool,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// One CSV row. BIA fields are NaN when the scene has no buildings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub map: usize,
    pub mask_rate: f64,
    pub sigma: f64,
    pub aware: bool,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub rmse: f64,
    pub spe: f64,
    pub srq_psnr: f64,
    pub srq_ssim: f64,
    pub bia_psnr: f64,
    pub bia_ssim: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: [&str; 16] = [
    "method",
    "map",
    "mask_rate",
    "sigma",
    "aware",
    "seed",
    "psnr",
    "ssim",
    "nmse",
    "rmse",
    "spe",
    "srq_psnr",
    "srq_ssim",
    "bia_psnr",
    "bia_ssim",
    "wall_time_s",
];

impl MetricsReport {
    /// Identifies the run for resumable sweeps.
    pub fn key(&self) -> RunKey {
        RunKey::new(&self.method, self.map, self.mask_rate, self.sigma, self.aware, self.seed)
    }

    /// Equality ignoring wall time.
    pub fn same_result(&self, other: &MetricsReport) -> bool {
        let strip = |r: &MetricsReport| MetricsReport {
            wall_time_s: 0.0,
            ..r.clone()
        };
        let (a, b) = (strip(self), strip(other));
        format!("{a:?}") == format!("{b:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub method: String,
    pub map: usize,
    pub mask_rate_bits: u64,
    pub sigma_bits: u64,
    pub aware: bool,
    pub seed: u64,
}

impl RunKey {
    pub fn new(method: &str, map: usize, mask_rate: f64, sigma: f64, aware: bool, seed: u64) -> Self {
        RunKey {
            method: method.to_string(),
            map,
            mask_rate_bits: mask_rate.to_bits(),
            sigma_bits: sigma.to_bits(),
            aware,
            seed,
        }
    }
}

pub fn evaluate_run(recon: &GridMap, truth: &GridMap, scene: &Scene, cfg: &MetricsConfig, meta: &RunMetadata) -> Result<MetricsReport> {
    cfg.validate()?;
    recon.check_same(truth)?;
    let (w, h) = truth.dims();
    let srq = region_metrics(recon, truth, &Region::square(w, h, scene.tx, cfg.srq_radius), cfg)?;
    let bia_region = building_region(scene, cfg.bia_radius);
    let (bia_psnr, bia_ssim) = if bia_region.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let m = region_metrics(recon, truth, &bia_region, cfg)?;
        (m.psnr, m.ssim)
    };
    Ok(MetricsReport {
        method: meta.method.clone(),
        map: meta.map,
        mask_rate: meta.mask_rate,
        sigma: meta.sigma,
        aware: meta.aware,
        seed: meta.seed,
        psnr: psnr(recon, truth, cfg)?,
        ssim: ssim(recon, truth, cfg)?,
        nmse: nmse(truth, recon)?,
        rmse: rmse(truth, recon)?,
        spe: spe(recon, scene)?,
        srq_psnr: srq.psnr,
        srq_ssim: srq.ssim,
        bia_psnr,
        bia_ssim,
        wall_time_s: meta.wall_time_s,
    })
}

pub fn write_reports<W: Write>(out: W, rows: &[MetricsReport], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    if rows.is_empty() && header {
        w.write_record(CSV_HEADER).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

pub fn read_reports<R: Read>(input: R) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::Serde(e.to_string()))?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Serde(format!("unexpected CSV header: {}", headers.iter().collect::<Vec<_>>().join(","))));
    }
    r.deserialize().map(|row| row.map_err(|e| Error::Serde(e.to_string()))).collect()
}

/// Mean and sample standard deviation of the run metrics for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub method: String,
    pub mask_rate: f64,
    pub sigma: f64,
    pub aware: bool,
    pub runs: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub nmse_mean: f64,
    pub rmse_mean: f64,
    pub spe_mean: f64,
    pub srq_psnr_mean: f64,
    pub bia_psnr_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 || !mean.is_finite() {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (method, mask rate, sigma, awareness), in order of first appearance.
///
/// NaN entries (scenes without buildings) are left out of the BIA mean.
pub fn summarize(rows: &[MetricsReport]) -> Vec<ConditionSummary> {
    let mut order: Vec<(String, u64, u64, bool)> = Vec::new();
    let mut groups: std::collections::HashMap<(String, u64, u64, bool), Vec<&MetricsReport>> = Default::default();
    for r in rows {
        let k = (r.method.clone(), r.mask_rate.to_bits(), r.sigma.to_bits(), r.aware);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(r);
    }
    order
        .into_iter()
        .map(|k| {
            let g = &groups[&k];
            let col = |f: fn(&MetricsReport) -> f64| g.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (psnr_mean, psnr_std) = mean_std(&col(|r| r.psnr));
            let (ssim_mean, ssim_std) = mean_std(&col(|r| r.ssim));
            let bia: Vec<f64> = col(|r| r.bia_psnr).into_iter().filter(|v| !v.is_nan()).collect();
            ConditionSummary {
                method: k.0.clone(),
                mask_rate: f64::from_bits(k.1),
                sigma: f64::from_bits(k.2),
                aware: k.3,
                runs: g.len(),
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
                nmse_mean: mean_std(&col(|r| r.nmse)).0,
                rmse_mean: mean_std(&col(|r| r.rmse)).0,
                spe_mean: mean_std(&col(|r| r.spe)).0,
                srq_psnr_mean: mean_std(&col(|r| r.srq_psnr)).0,
                bia_psnr_mean: if bia.is_empty() { f64::NAN } else { mean_std(&bia).0 },
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(out: W, rows: &[ConditionSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Serde(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::{generate_scene, simulate_pathloss, SimParams};
    use approx::assert_abs_diff_eq;

    fn ramp(w: usize, h: usize) -> Grid {
        Grid::from_vec(w, h, (0..w * h).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let cfg = MetricsConfig::default();
        let a = ramp(8, 8);
        assert_eq!(psnr(&a, &a, &cfg).unwrap(), f64::INFINITY);
        let z = Grid::zeros(4, 4);
        let b = Grid::filled(4, 4, 0.1);
        assert_abs_diff_eq!(psnr(&z, &b, &cfg).unwrap(), 20.0, epsilon = 1e-12);
        let c = a.map(|v| v * 0.9);
        assert_eq!(psnr(&a, &c, &cfg).unwrap(), psnr(&c, &a, &cfg).unwrap());
        assert!(psnr(&a, &z, &cfg).is_err());
    }

    #[test]
    fn rmse_and_nmse_examples() {
        let cfg = MetricsConfig::default();
        let t = ramp(8, 8).map(|v| v + 0.05);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&t, &t.map(|v| v + 0.1)).unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&t, &Grid::zeros(8, 8)).unwrap(), 1.0);
        assert_abs_diff_eq!(nmse(&t, &t.map(|v| 2.0 * v)).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(nmse(&Grid::zeros(8, 8), &t), Err(Error::ZeroTruth)));
        let p = t.map(|v| v * 0.8 + 0.02);
        let r = rmse(&t, &p).unwrap();
        assert_abs_diff_eq!(psnr(&t, &p, &cfg).unwrap(), 20.0 * (1.0 / r).log10(), epsilon = 1e-10);
        assert_eq!(rmse(&t, &p).unwrap(), rmse(&p, &t).unwrap());
        assert_ne!(nmse(&t, &p).unwrap(), nmse(&p, &t).unwrap());
    }

    #[test]
    fn ssim_examples() {
        let cfg = MetricsConfig::default();
        let a = ramp(12, 10);
        assert_abs_diff_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0, epsilon = 1e-12);
        let k = Grid::filled(9, 9, 0.4);
        assert_abs_diff_eq!(ssim(&k, &k, &cfg).unwrap(), 1.0, epsilon = 1e-12);
        assert!(matches!(ssim(&Grid::zeros(6, 9), &Grid::zeros(6, 9), &cfg), Err(Error::GridTooSmall { .. })));

        // constant offset on a constant map: single-window closed form
        let b = k.map(|v| v + 0.1);
        let (mx, my, c1) = (0.4, 0.5, 1e-4);
        let want = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
        assert_abs_diff_eq!(ssim(&k, &b, &cfg).unwrap(), want, epsilon = 1e-12);

        // offset on a textured map: average of per-window luminance terms
        let t = ramp(9, 8);
        let o = t.map(|v| v + 0.1);
        let g = cfg.window_weights();
        let mut acc = 0.0;
        for top in 0..2 {
            for left in 0..3 {
                let mut mu = 0.0;
                for i in 0..7 {
                    for j in 0..7 {
                        mu += g[i] * g[j] * t.values[(top + i) * 9 + left + j];
                    }
                }
                acc += (2.0 * mu * (mu + 0.1) + c1) / (mu * mu + (mu + 0.1).powi(2) + c1);
            }
        }
        assert_abs_diff_eq!(ssim(&t, &o, &cfg).unwrap(), acc / 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ssim(&t, &o, &cfg).unwrap(), ssim(&o, &t, &cfg).unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn ssim_in_range() {
        let cfg = MetricsConfig::default();
        let a = ramp(10, 10);
        let b = a.map(|v| 1.0 - v);
        let s = ssim(&a, &b, &cfg).unwrap();
        assert!((-1.0..=1.0).contains(&s) && s < 0.0);
    }

    fn open_scene(w: usize, h: usize, tx: (usize, usize)) -> Scene {
        Scene::empty(w, h, tx, SimParams::default())
    }

    #[test]
    fn spe_examples() {
        let scene = generate_scene(32, 32, 4, 3).unwrap();
        let truth = simulate_pathloss(&scene).unwrap();
        assert_eq!(spe(&truth, &scene).unwrap(), 0.0);
        let s = open_scene(16, 16, (5, 6));
        let mut g = Grid::filled(16, 16, 0.2);
        g.set(5, 9, 0.9);
        assert_eq!(spe(&g, &s).unwrap(), 3.0);
        let mut g = Grid::filled(16, 16, 0.2);
        g.set(8, 10, 0.9);
        assert_eq!(spe(&g, &s).unwrap(), 5.0);

        // ties go to the smallest index; building cells are ignored
        let mut s = open_scene(8, 8, (0, 0));
        s.add_building(0, 0, 1, 2);
        s.tx = (4, 4);
        let mut g = Grid::filled(8, 8, 0.1);
        g.set(0, 0, 1.0);
        g.set(2, 3, 0.7);
        g.set(1, 1, 0.7);
        assert_abs_diff_eq!(spe(&g, &s).unwrap(), 18f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn building_region_examples() {
        let s = open_scene(8, 8, (0, 0));
        assert!(building_region(&s, 3).is_empty());
        let mut s = open_scene(8, 8, (0, 0));
        s.add_building(3, 4, 1, 1);
        let reg = building_region(&s, 1);
        let want: Vec<usize> = [(2, 3), (2, 4), (2, 5), (3, 3), (3, 5), (4, 3), (4, 4), (4, 5)]
            .iter()
            .map(|&(r, c)| r * 8 + c)
            .collect();
        assert_eq!(reg.cells, want);
        assert!(building_region(&s, 0).is_empty());
    }

    #[test]
    fn region_square_counts() {
        for &(w, h, center, radius) in &[(20, 20, (10, 10), 8), (20, 15, (2, 18), 8), (5, 5, (0, 0), 1), (9, 9, (4, 4), 0)] {
            let reg = Region::square(w, h, center, radius);
            let mut n = 0;
            for r in 0..h {
                for c in 0..w {
                    if (r as i64 - center.0 as i64).abs() <= radius as i64 && (c as i64 - center.1 as i64).abs() <= radius as i64 {
                        n += 1;
                    }
                }
            }
            assert_eq!(reg.len(), n);
        }
    }

    #[test]
    fn region_metrics_full_and_partial() {
        let cfg = MetricsConfig::default();
        let t = ramp(12, 12).map(|v| v + 0.01);
        let p = t.map(|v| (v * 0.97 + 0.01).min(1.0));
        let full = region_metrics(&p, &t, &Region::full(12, 12), &cfg).unwrap();
        assert_abs_diff_eq!(full.psnr, psnr(&p, &t, &cfg).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(full.nmse, nmse(&t, &p).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(full.rmse, rmse(&t, &p).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(full.ssim, ssim(&p, &t, &cfg).unwrap(), epsilon = 1e-12);

        let reg = Region::square(12, 12, (3, 3), 2);
        let mut garbage = t.clone();
        for i in 0..garbage.len() {
            if !reg.cells.contains(&i) {
                garbage.values[i] = 0.9;
            }
        }
        let m = region_metrics(&garbage, &t, &reg, &cfg).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert_abs_diff_eq!(m.ssim, 1.0, epsilon = 1e-12);
        let empty = Region {
            width: 12,
            height: 12,
            cells: vec![],
        };
        assert!(matches!(region_metrics(&p, &t, &empty, &cfg), Err(Error::EmptyRegion)));
    }

    #[test]
    fn evaluate_and_roundtrip() {
        let cfg = MetricsConfig::default();
        let scene = generate_scene(32, 32, 5, 11).unwrap();
        let truth = simulate_pathloss(&scene).unwrap();
        let meta = RunMetadata {
            method: "idw".into(),
            map: 4,
            mask_rate: 0.8,
            sigma: 0.05,
            aware: true,
            seed: 7,
            wall_time_s: 0.125,
        };
        let r = evaluate_run(&truth, &truth, &scene, &cfg, &meta).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert_abs_diff_eq!(r.ssim, 1.0, epsilon = 1e-12);
        assert_eq!((r.nmse, r.rmse, r.spe), (0.0, 0.0, 0.0));
        assert_eq!((r.method.as_str(), r.map, r.mask_rate, r.sigma, r.aware, r.seed, r.wall_time_s), ("idw", 4, 0.8, 0.05, true, 7, 0.125));

        let noisy = truth.map(|v| (v * 0.93 + 0.011).min(1.0));
        let r2 = evaluate_run(&noisy, &truth, &scene, &cfg, &meta).unwrap();
        let open = Scene::empty(32, 32, scene.tx, scene.params);
        let r3 = evaluate_run(&noisy, &truth, &open, &cfg, &meta).unwrap();
        assert!(r3.bia_psnr.is_nan());

        let rows = vec![r.clone(), r2.clone(), r3.clone()];
        let mut buf = Vec::new();
        write_reports(&mut buf, &rows, true).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&CSV_HEADER.join(",")));
        assert!(text.lines().nth(1).unwrap().contains(",inf,"));
        let back = read_reports(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&rows) {
            assert!(a.same_result(b));
            assert_eq!(a.wall_time_s, b.wall_time_s);
        }
        assert_eq!(back[1], r2);
    }

    #[test]
    fn summary_matches_hand_aggregation() {
        let row = |method: &str, aware: bool, psnr: f64, bia: f64| MetricsReport {
            method: method.into(),
            map: 0,
            mask_rate: 0.8,
            sigma: 0.05,
            aware,
            seed: 0,
            psnr,
            ssim: 0.5,
            nmse: 0.1,
            rmse: 0.2,
            spe: 1.0,
            srq_psnr: psnr,
            srq_ssim: 0.4,
            bia_psnr: bia,
            bia_ssim: 0.3,
            wall_time_s: 0.0,
        };
        let rows = vec![row("a", true, 20.0, 10.0), row("b", true, 5.0, 1.0), row("a", true, 24.0, f64::NAN), row("a", false, 30.0, 2.0)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].method.as_str(), s[0].aware, s[0].runs), ("a", true, 2));
        assert_eq!(s[0].psnr_mean, 22.0);
        assert_abs_diff_eq!(s[0].psnr_std, 8f64.sqrt(), epsilon = 1e-12);
        assert_eq!(s[0].bia_psnr_mean, 10.0);
        assert_eq!((s[1].method.as_str(), s[1].psnr_mean, s[1].psnr_std), ("b", 5.0, 0.0));
        assert_eq!((s[2].aware, s[2].psnr_mean), (false, 30.0));
        let mut buf = Vec::new();
        write_summary(&mut buf, &s).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }
}
