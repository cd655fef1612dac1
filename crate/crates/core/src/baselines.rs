//! Classical interpolation baselines: inverse-distance weighting and ordinary kriging.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap};
use crate::observation::ObservationSet;

/// Observation positions as `(row, col)` plus values.
fn points(obs: &ObservationSet) -> Vec<(f64, f64, f64)> {
    obs.points().map(|(r, c, y)| (r as f64, c as f64, y)).collect()
}

fn check_dims(obs: &ObservationSet, dims: (usize, usize)) -> Result<()> {
    if obs.dims() != dims {
        return Err(Error::dims(dims.0 * dims.1, obs.mask.cells()));
    }
    Ok(())
}

fn idw_at(pts: &[(f64, f64, f64)], r: f64, c: f64, power: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(pr, pc, y) in pts {
        let d2 = (pr - r).powi(2) + (pc - c).powi(2);
        if d2 == 0.0 {
            return y;
        }
        let w = d2.powf(-0.5 * power);
        num += w * y;
        den += w;
    }
    num / den
}

/// Inverse-distance interpolation over all observations; observed cells keep their value.
pub fn idw_interpolate(obs: &ObservationSet, dims: (usize, usize), power: f64) -> Result<GridMap> {
    check_dims(obs, dims)?;
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::param("power", "must be positive"));
    }
    let pts = points(obs);
    let (w, h) = dims;
    let mut out = Grid::zeros(w, h);
    for row in 0..h {
        for col in 0..w {
            out.set(row, col, idw_at(&pts, row as f64, col as f64, power));
        }
    }
    for (r, c, y) in obs.points() {
        out.set(r, c, y);
    }
    Ok(out.clamp01())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariogramKind {
    #[default]
    Exponential,
}

/// `γ(h) = nugget + (sill - nugget)(1 - exp(-h / range))` for `h > 0`, `γ(0) = 0`.
///
/// Distances are in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariogramModel {
    pub kind: VariogramKind,
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl VariogramModel {
    pub fn exponential(nugget: f64, sill: f64, range: f64) -> Result<Self> {
        let m = VariogramModel {
            kind: VariogramKind::Exponential,
            nugget,
            sill,
            range,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0 && self.sill >= self.nugget && self.sill.is_finite()) {
            return Err(Error::param("variogram", "need sill >= nugget >= 0"));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::param("range", "must be positive"));
        }
        Ok(())
    }

    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            self.nugget + (self.sill - self.nugget) * (1.0 - (-h / self.range).exp())
        }
    }
}

/// Ordinary-kriging weights for `target` from `pts`; `None` when the system is singular.
pub fn ordinary_kriging_weights(pts: &[(f64, f64)], target: (f64, f64), model: &VariogramModel) -> Option<Vec<f64>> {
    let k = pts.len();
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let mut a = DMatrix::<f64>::zeros(k + 1, k + 1);
    let mut rhs = DVector::<f64>::zeros(k + 1);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = model.gamma(dist(pts[i], pts[j]));
        }
        a[(i, k)] = 1.0;
        a[(k, i)] = 1.0;
        rhs[i] = model.gamma(dist(pts[i], target));
    }
    rhs[k] = 1.0;
    let sol = a.lu().solve(&rhs)?;
    let weights: Vec<f64> = sol.iter().take(k).copied().collect();
    if weights.iter().any(|w| !w.is_finite()) {
        return None;
    }
    Some(weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrigingOutput {
    pub map: GridMap,
    /// Cells that fell back to inverse-distance weighting.
    pub fallbacks: usize,
    /// Largest `|Σλ - 1|` over solved cells.
    pub max_weight_sum_error: f64,
}

/// The `k` nearest observations to `(r, c)`, ties broken by observation order.
fn nearest(pts: &[(f64, f64, f64)], r: f64, c: f64, k: usize, scratch: &mut Vec<(f64, usize)>) -> Vec<usize> {
    scratch.clear();
    scratch.extend(pts.iter().enumerate().map(|(i, p)| ((p.0 - r).powi(2) + (p.1 - c).powi(2), i)));
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if scratch.len() > k {
        scratch.select_nth_unstable_by(k - 1, cmp);
        scratch.truncate(k);
    }
    scratch.sort_unstable_by(cmp);
    scratch.iter().map(|&(_, i)| i).collect()
}

/// Local ordinary kriging over the `max_neighbors` nearest observations.
pub fn kriging_interpolate(obs: &ObservationSet, dims: (usize, usize), model: &VariogramModel, max_neighbors: usize) -> Result<KrigingOutput> {
    check_dims(obs, dims)?;
    model.validate()?;
    if obs.len() < 2 {
        return Err(Error::param("observations", "kriging needs at least two"));
    }
    if max_neighbors < 2 {
        return Err(Error::param("max_neighbors", "must be at least 2"));
    }
    let pts = points(obs);
    let (w, h) = dims;
    let mut out = Grid::zeros(w, h);
    let observed = obs.mask.indicator();
    let mut scratch = Vec::with_capacity(pts.len());
    let mut fallbacks = 0;
    let mut worst = 0.0f64;
    for row in 0..h {
        for col in 0..w {
            let cell = row * w + col;
            if observed[cell] {
                continue;
            }
            let (r, c) = (row as f64, col as f64);
            let idx = nearest(&pts, r, c, max_neighbors, &mut scratch);
            let local: Vec<(f64, f64)> = idx.iter().map(|&i| (pts[i].0, pts[i].1)).collect();
            let value = match ordinary_kriging_weights(&local, (r, c), model) {
                Some(lambda) => {
                    worst = worst.max((lambda.iter().sum::<f64>() - 1.0).abs());
                    lambda.iter().zip(&idx).map(|(l, &i)| l * pts[i].2).sum()
                }
                None => {
                    fallbacks += 1;
                    let sub: Vec<(f64, f64, f64)> = idx.iter().map(|&i| pts[i]).collect();
                    idw_at(&sub, r, c, 2.0)
                }
            };
            out.values[cell] = value;
        }
    }
    for (r, c, y) in obs.points() {
        out.set(r, c, y);
    }
    Ok(KrigingOutput {
        map: out.clamp01(),
        fallbacks,
        max_weight_sum_error: worst,
    })
}

fn default_model(values: &[f64], width: usize) -> VariogramModel {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    VariogramModel {
        kind: VariogramKind::Exponential,
        nugget: 0.0,
        sill: var,
        range: (width as f64 / 4.0).max(1.0),
    }
}

/// Least squares for `(nugget, partial sill) >= 0` given a fixed range; returns `(nugget, psill, sse)`.
fn nnls_fit(lags: &[f64], gammas: &[f64], weights: &[f64], range: f64) -> (f64, f64, f64) {
    let basis: Vec<f64> = lags.iter().map(|h| 1.0 - (-h / range).exp()).collect();
    let sse = |n: f64, p: f64| {
        lags.iter()
            .enumerate()
            .map(|(i, _)| weights[i] * (gammas[i] - n - p * basis[i]).powi(2))
            .sum::<f64>()
    };
    let (mut s1, mut sb, mut sbb, mut sy, mut sby) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..lags.len() {
        let w = weights[i];
        s1 += w;
        sb += w * basis[i];
        sbb += w * basis[i] * basis[i];
        sy += w * gammas[i];
        sby += w * basis[i] * gammas[i];
    }
    let mut best = (0.0, 0.0, sse(0.0, 0.0));
    let det = s1 * sbb - sb * sb;
    if det.abs() > 1e-12 * s1 * sbb.max(1e-300) {
        let n = (sbb * sy - sb * sby) / det;
        let p = (s1 * sby - sb * sy) / det;
        if n >= 0.0 && p >= 0.0 {
            let e = sse(n, p);
            return (n, p, e);
        }
    }
    let n_only = (sy / s1).max(0.0);
    let e = sse(n_only, 0.0);
    if e < best.2 {
        best = (n_only, 0.0, e);
    }
    if sbb > 0.0 {
        let p_only = (sby / sbb).max(0.0);
        let e = sse(0.0, p_only);
        if e < best.2 {
            best = (0.0, p_only, e);
        }
    }
    best
}

/// Fits an exponential model to the binned empirical semivariogram.
pub fn fit_variogram(obs: &ObservationSet, n_bins: usize) -> Result<VariogramModel> {
    if obs.len() < 20 {
        return Err(Error::param("observations", "variogram fitting needs at least 20"));
    }
    if n_bins < 2 {
        return Err(Error::param("n_bins", "must be at least 2"));
    }
    let pts = points(obs);
    let (w, h) = obs.dims();
    let max_lag = 0.5 * ((w * w + h * h) as f64).sqrt();
    let bin_width = max_lag / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut lag_sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let d = ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
            let b = (d / bin_width) as usize;
            if b >= n_bins {
                continue;
            }
            sums[b] += 0.5 * (pts[i].2 - pts[j].2).powi(2);
            lag_sums[b] += d;
            counts[b] += 1;
        }
    }
    let (mut lags, mut gammas, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..n_bins {
        if counts[b] > 0 {
            lags.push(lag_sums[b] / counts[b] as f64);
            gammas.push(sums[b] / counts[b] as f64);
            weights.push(counts[b] as f64);
        }
    }
    let values: Vec<f64> = pts.iter().map(|p| p.2).collect();
    if lags.len() < 2 {
        return Ok(default_model(&values, w));
    }
    let n_ranges = 60;
    let (lo, hi) = (0.1f64, 2.0 * max_lag);
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for k in 0..n_ranges {
        let range = lo * (hi / lo).powf(k as f64 / (n_ranges - 1) as f64);
        let (n, p, e) = nnls_fit(&lags, &gammas, &weights, range);
        if best.is_none_or(|b| e < b.3) {
            best = Some((range, n, p, e));
        }
    }
    match best {
        Some((range, n, p, e)) if e.is_finite() && n.is_finite() && p.is_finite() => Ok(VariogramModel {
            kind: VariogramKind::Exponential,
            nugget: n,
            sill: n + p,
            range,
        }),
        _ => Ok(default_model(&values, w)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{build_mask, observe, MaskOperator, MaskStrategy};
    use crate::rng;
    use approx::assert_abs_diff_eq;

    fn obs_at(w: usize, h: usize, cells: &[(usize, usize, f64)]) -> ObservationSet {
        let mut v: Vec<(usize, f64)> = cells.iter().map(|&(r, c, y)| (r * w + c, y)).collect();
        v.sort_by_key(|e| e.0);
        let mask = MaskOperator::new(w, h, v.iter().map(|e| e.0).collect()).unwrap();
        ObservationSet::new(mask, v.iter().map(|e| e.1).collect(), 0.0).unwrap()
    }

    #[test]
    fn idw_examples() {
        let one = obs_at(5, 4, &[(1, 2, 0.37)]);
        let map = idw_interpolate(&one, (5, 4), 2.0).unwrap();
        assert!(map.values.iter().all(|&v| (v - 0.37).abs() < 1e-15));

        let two = obs_at(5, 1, &[(0, 0, 0.2), (0, 4, 0.6)]);
        for p in [1.0, 2.0, 3.5] {
            let map = idw_interpolate(&two, (5, 1), p).unwrap();
            assert_abs_diff_eq!(map.get(0, 2), 0.4, epsilon = 1e-15);
            assert_eq!(map.get(0, 0), 0.2);
            assert_eq!(map.get(0, 4), 0.6);
        }
        let empty = ObservationSet::new(
            MaskOperator {
                width: 2,
                height: 2,
                observed: vec![],
            },
            vec![],
            0.1,
        )
        .unwrap();
        assert!(idw_interpolate(&empty, (2, 2), 2.0).is_err());
        assert!(idw_interpolate(&two, (5, 1), 0.0).is_err());
    }

    #[test]
    fn hand_solved_kriging_system() {
        // three points on a line at 0, 1, 3; target at 2; linear-in-distance surrogate via the
        // exponential model with nugget 0, sill 1, range 2
        let model = VariogramModel::exponential(0.0, 1.0, 2.0).unwrap();
        let g = |h: f64| if h == 0.0 { 0.0 } else { 1.0 - (-h / 2.0_f64).exp() };
        // independent Gaussian elimination of the 4x4 system
        let mut a = [
            [g(0.0), g(1.0), g(3.0), 1.0, g(2.0)],
            [g(1.0), g(0.0), g(2.0), 1.0, g(1.0)],
            [g(3.0), g(2.0), g(0.0), 1.0, g(1.0)],
            [1.0, 1.0, 1.0, 0.0, 1.0],
        ];
        for col in 0..4 {
            let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            for row in 0..4 {
                if row != col {
                    let f = a[row][col] / a[col][col];
                    for k in col..5 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let want: Vec<f64> = (0..3).map(|i| a[i][4] / a[i][i]).collect();
        let got = ordinary_kriging_weights(&[(0.0, 0.0), (0.0, 1.0), (0.0, 3.0)], (0.0, 2.0), &model).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-8);
        }
        assert_abs_diff_eq!(got.iter().sum::<f64>(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn kriging_exact_and_constant() {
        let obs = obs_at(6, 6, &[(0, 0, 0.3), (5, 5, 0.3), (2, 4, 0.3), (4, 1, 0.3)]);
        let model = VariogramModel::exponential(0.0, 0.05, 3.0).unwrap();
        let out = kriging_interpolate(&obs, (6, 6), &model, 16).unwrap();
        assert!(out.map.values.iter().all(|&v| (v - 0.3).abs() < 1e-9));
        assert!(out.max_weight_sum_error < 1e-8);

        let obs = obs_at(6, 6, &[(0, 0, 0.1), (5, 5, 0.9), (2, 4, 0.5), (4, 1, 0.2)]);
        let out = kriging_interpolate(&obs, (6, 6), &model, 3).unwrap();
        for (r, c, y) in obs.points() {
            assert_eq!(out.map.get(r, c), y);
        }
        assert!(out.map.is_normalized());
    }

    #[test]
    fn singular_system_falls_back() {
        // zero sill makes every off-diagonal entry zero and the system singular
        let obs = obs_at(4, 4, &[(0, 0, 0.4), (3, 3, 0.4)]);
        let model = VariogramModel::exponential(0.0, 0.0, 1.0).unwrap();
        let out = kriging_interpolate(&obs, (4, 4), &model, 4).unwrap();
        assert_eq!(out.fallbacks, 14);
        assert!(out.map.values.iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn variogram_on_white_noise() {
        let (w, h) = (40, 40);
        let mut r = rng::stream(8, &[0]);
        let field = Grid::from_vec(w, h, (0..w * h).map(|_| 0.5 + 0.1 * rng::normal(&mut r)).collect()).unwrap();
        let mask = build_mask(MaskStrategy::RandomPixel, 0.7, (w, h), 3).unwrap();
        let obs = observe(&field, &mask, 0.0, 1).unwrap();
        let m = fit_variogram(&obs, 15).unwrap();
        let mean = obs.y.iter().sum::<f64>() / obs.len() as f64;
        let var = obs.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / obs.len() as f64;
        assert!((m.sill - var).abs() <= 0.2 * var, "sill {} var {var}", m.sill);
        assert!(m.gamma(1.0) >= 0.8 * m.sill, "{m:?}");
        assert_eq!(fit_variogram(&obs, 15).unwrap(), m);
    }

    #[test]
    fn variogram_constant_and_small() {
        let mask = build_mask(MaskStrategy::RandomPixel, 0.5, (10, 10), 1).unwrap();
        let obs = observe(&Grid::filled(10, 10, 0.6), &mask, 0.0, 1).unwrap();
        let m = fit_variogram(&obs, 10).unwrap();
        assert!(m.sill.abs() < 1e-12);
        m.validate().unwrap();
        let few = obs_at(5, 5, &[(0, 0, 0.1), (1, 1, 0.2)]);
        assert!(fit_variogram(&few, 10).is_err());
    }

    #[test]
    fn kriging_beats_mean_on_smooth_field() {
        let (w, h) = (32, 32);
        let mut field = Grid::zeros(w, h);
        for r in 0..h {
            for c in 0..w {
                field.set(r, c, 0.5 + 0.3 * ((r as f64) / 6.0).sin() * ((c as f64) / 7.0).cos());
            }
        }
        let mask = build_mask(MaskStrategy::RandomPixel, 0.8, (w, h), 2).unwrap();
        let obs = observe(&field, &mask, 0.0, 2).unwrap();
        let model = fit_variogram(&obs, 12).unwrap();
        let out = kriging_interpolate(&obs, (w, h), &model, 16).unwrap();
        let idw = idw_interpolate(&obs, (w, h), 2.0).unwrap();
        let mse = |g: &Grid| g.values.iter().zip(&field.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (w * h) as f64;
        assert!(mse(&out.map) < 1e-3, "{}", mse(&out.map));
        assert!(mse(&out.map) < mse(&idw));
        assert!(out.max_weight_sum_error < 1e-8);
    }
}
