//! Selection mask `A`, noisy sparse observations `y = A x + n`, and the
//! building-aware augmentation.
//!
//! `A` is a 0/1 diagonal selection, stored as a sorted list of row-major
//! cell indices. `A x` is a gather and `Aᵀ v` a scatter.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap};
use crate::io;
use crate::rng::{self, tag};
use crate::scene_sim::Scene;

/// Noise std of the zero-valued pseudo-observations added inside buildings.
pub const AWARE_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RandomPixel,
    Structured,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskStrategy::RandomPixel => "random_pixel",
            MaskStrategy::Structured => "structured",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskOperator {
    pub width: usize,
    pub height: usize,
    /// Sorted, unique row-major indices of the observed cells.
    pub observed: Vec<usize>,
}

impl MaskOperator {
    pub fn new(width: usize, height: usize, mut observed: Vec<usize>) -> Result<Self> {
        observed.sort_unstable();
        observed.dedup();
        if observed.last().is_some_and(|&i| i >= width * height) {
            return Err(Error::param("observed", "index out of range"));
        }
        Ok(MaskOperator {
            width,
            height,
            observed,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        MaskOperator {
            width,
            height,
            observed: (0..width * height).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Per-cell flag, true where observed.
    pub fn indicator(&self) -> Vec<bool> {
        let mut flags = vec![false; self.cells()];
        for &i in &self.observed {
            flags[i] = true;
        }
        flags
    }
}

pub fn build_mask(
    strategy: MaskStrategy,
    mask_rate: f64,
    dims: (usize, usize),
    seed: u64,
) -> Result<MaskOperator> {
    if !(0.0..1.0).contains(&mask_rate) {
        return Err(Error::param("mask_rate", "must lie in [0, 1)"));
    }
    let (width, height) = dims;
    let n = width * height;
    let keep = 1.0 - mask_rate;
    let observed = match strategy {
        MaskStrategy::RandomPixel => {
            let k = (keep * n as f64).floor() as usize;
            if k == 0 {
                return Err(Error::EmptyMask);
            }
            let mut rng = rng::stream(seed, &[tag::MASK]);
            let mut idx = index::sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        MaskStrategy::Structured => {
            let stride = structured_stride(keep, width, height);
            let mut idx = Vec::new();
            for r in (0..height).step_by(stride) {
                for c in (0..width).step_by(stride) {
                    idx.push(r * width + c);
                }
            }
            idx
        }
    };
    if observed.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(MaskOperator {
        width,
        height,
        observed,
    })
}

/// Lattice stride whose kept fraction is closest to `keep`; ties go to the smaller stride.
fn structured_stride(keep: f64, width: usize, height: usize) -> usize {
    let n = (width * height) as f64;
    let mut best = (1usize, f64::INFINITY);
    for s in 1..=width.max(height) {
        let kept = (height.div_ceil(s) * width.div_ceil(s)) as f64 / n;
        let gap = (kept - keep).abs();
        if gap < best.1 - 1e-15 {
            best = (s, gap);
        }
    }
    best.0
}

pub fn apply_mask(mask: &MaskOperator, x: &Grid) -> Result<Vec<f64>> {
    if x.dims() != (mask.width, mask.height) {
        return Err(Error::dims(
            format!("{}x{}", mask.width, mask.height),
            format!("{}x{}", x.width, x.height),
        ));
    }
    Ok(mask.observed.iter().map(|&i| x.values[i]).collect())
}

pub fn adjoint_embed(mask: &MaskOperator, v: &[f64]) -> Result<Grid> {
    if v.len() != mask.len() {
        return Err(Error::dims(mask.len(), v.len()));
    }
    let mut g = Grid::zeros(mask.width, mask.height);
    for (&i, &val) in mask.observed.iter().zip(v) {
        g.values[i] = val;
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub mask: MaskOperator,
    pub y: Vec<f64>,
    /// Nominal measurement noise std.
    pub sigma: f64,
    /// Per-entry noise std, aligned with `y`.
    pub noise_std: Vec<f64>,
    pub strategy: MaskStrategy,
    pub mask_rate: f64,
    pub aware: bool,
}

impl ObservationSet {
    /// Homogeneous-noise observation set.
    pub fn new(mask: MaskOperator, y: Vec<f64>, sigma: f64) -> Result<Self> {
        if y.len() != mask.len() {
            return Err(Error::dims(mask.len(), y.len()));
        }
        if !(sigma >= 0.0) {
            return Err(Error::param("sigma", "must be >= 0"));
        }
        let mask_rate = 1.0 - mask.len() as f64 / mask.cells() as f64;
        Ok(ObservationSet {
            noise_std: vec![sigma; y.len()],
            mask,
            y,
            sigma,
            strategy: MaskStrategy::RandomPixel,
            mask_rate,
            aware: false,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.mask.width, self.mask.height)
    }

    /// (row, col, value) of every observation.
    pub fn points(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.mask.width;
        self.mask
            .observed
            .iter()
            .zip(&self.y)
            .map(move |(&i, &v)| (i / w, i % w, v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ObservationFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ObservationFile = io::read_json(path)?;
        file.try_into().map_err(|e: Error| Error::Format {
            path: path.into(),
            reason: e.to_string(),
        })
    }
}

pub fn observe(truth: &GridMap, mask: &MaskOperator, sigma: f64, seed: u64) -> Result<ObservationSet> {
    if !(sigma >= 0.0) {
        return Err(Error::param("sigma", "must be >= 0"));
    }
    let mut y = apply_mask(mask, truth)?;
    if sigma > 0.0 {
        let mut rng = rng::stream(seed, &[tag::NOISE]);
        for v in &mut y {
            *v += sigma * rng::normal(&mut rng);
        }
    }
    ObservationSet::new(mask.clone(), y, sigma)
}

/// Adds every unobserved building cell as a zero-valued observation with std `aware_sigma`.
pub fn augment_aware(obs: &ObservationSet, scene: &Scene, aware_sigma: f64) -> Result<ObservationSet> {
    if obs.dims() != (scene.width, scene.height) {
        return Err(Error::dims(
            format!("{}x{}", obs.mask.width, obs.mask.height),
            format!("{}x{}", scene.width, scene.height),
        ));
    }
    let observed = obs.mask.indicator();
    let mut entries: Vec<(usize, f64, f64)> = obs
        .mask
        .observed
        .iter()
        .zip(obs.y.iter().zip(&obs.noise_std))
        .map(|(&i, (&y, &s))| (i, y, s))
        .collect();
    entries.extend(
        (0..scene.buildings.len())
            .filter(|&i| scene.buildings[i] == 1 && !observed[i])
            .map(|i| (i, 0.0, aware_sigma)),
    );
    entries.sort_unstable_by_key(|e| e.0);

    let mut out = obs.clone();
    out.mask.observed = entries.iter().map(|e| e.0).collect();
    out.y = entries.iter().map(|e| e.1).collect();
    out.noise_std = entries.iter().map(|e| e.2).collect();
    out.aware = true;
    Ok(out)
}

/// On-disk JSON form of an [`ObservationSet`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationFile {
    pub width: usize,
    pub height: usize,
    pub strategy: MaskStrategy,
    pub mask_rate: f64,
    pub sigma: f64,
    pub aware: bool,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<Vec<f64>>,
}

impl From<&ObservationSet> for ObservationFile {
    fn from(o: &ObservationSet) -> Self {
        let homogeneous = o.noise_std.iter().all(|&s| s == o.sigma);
        ObservationFile {
            width: o.mask.width,
            height: o.mask.height,
            strategy: o.strategy,
            mask_rate: o.mask_rate,
            sigma: o.sigma,
            aware: o.aware,
            indices: o.mask.observed.clone(),
            values: o.y.clone(),
            noise_std: (!homogeneous).then(|| o.noise_std.clone()),
        }
    }
}

impl TryFrom<ObservationFile> for ObservationSet {
    type Error = Error;

    fn try_from(f: ObservationFile) -> Result<Self> {
        if f.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("indices", "must be sorted and unique"));
        }
        let mask = MaskOperator::new(f.width, f.height, f.indices)?;
        let mut obs = ObservationSet::new(mask, f.values, f.sigma)?;
        if let Some(std) = f.noise_std {
            if std.len() != obs.len() {
                return Err(Error::dims(obs.len(), std.len()));
            }
            obs.noise_std = std;
        }
        obs.strategy = f.strategy;
        obs.mask_rate = f.mask_rate;
        obs.aware = f.aware;
        Ok(obs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_sim::SimParams;
    use proptest::prelude::*;

    fn ramp(w: usize, h: usize) -> Grid {
        Grid::from_vec(w, h, (0..w * h).map(|i| i as f64 / (w * h) as f64).collect()).unwrap()
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let m = build_mask(MaskStrategy::RandomPixel, 0.0, (4, 4), 3).unwrap();
        assert_eq!(m.observed, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn random_mask_count() {
        let m = build_mask(MaskStrategy::RandomPixel, 0.75, (64, 64), 9).unwrap();
        assert_eq!(m.len(), 1024);
        assert!(m.observed.windows(2).all(|w| w[0] < w[1]));
        let again = build_mask(MaskStrategy::RandomPixel, 0.75, (64, 64), 9).unwrap();
        assert_eq!(m, again);
        let other = build_mask(MaskStrategy::RandomPixel, 0.75, (64, 64), 10).unwrap();
        assert_ne!(m, other);
    }

    #[test]
    fn structured_stride_two() {
        let m = build_mask(MaskStrategy::Structured, 0.75, (8, 8), 0).unwrap();
        assert_eq!(m.len(), 16);
        assert!(m.observed.iter().all(|&i| (i / 8) % 2 == 0 && (i % 8) % 2 == 0));
    }

    #[test]
    fn mask_rate_bounds() {
        assert!(build_mask(MaskStrategy::RandomPixel, 1.0, (4, 4), 0).is_err());
        assert!(build_mask(MaskStrategy::RandomPixel, -0.1, (4, 4), 0).is_err());
        assert!(matches!(
            build_mask(MaskStrategy::RandomPixel, 0.99, (4, 4), 0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn apply_mask_cases() {
        let x = ramp(4, 4);
        let full = MaskOperator::full(4, 4);
        assert_eq!(apply_mask(&full, &x).unwrap(), x.values);
        assert_eq!(apply_mask(&full, &Grid::zeros(4, 4)).unwrap(), vec![0.0; 16]);
        let one = MaskOperator::new(4, 4, vec![5]).unwrap();
        assert_eq!(apply_mask(&one, &x).unwrap(), vec![x.values[5]]);
        assert!(apply_mask(&one, &Grid::zeros(3, 4)).is_err());
    }

    #[test]
    fn adjoint_cases() {
        let full = MaskOperator::full(3, 2);
        let v: Vec<f64> = (0..6).map(|i| i as f64).collect();
        assert_eq!(adjoint_embed(&full, &v).unwrap().values, v);
        assert_eq!(adjoint_embed(&full, &[0.0; 6]).unwrap(), Grid::zeros(3, 2));
        assert!(adjoint_embed(&full, &[1.0]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn adjoint_roundtrip(seed in any::<u64>(), rate in 0.0f64..0.95) {
            let mask = build_mask(MaskStrategy::RandomPixel, rate, (12, 9), seed).unwrap();
            let mut rng = rng::stream(seed, &[42]);
            let v = rng::normals(&mut rng, mask.len());
            let g = adjoint_embed(&mask, &v).unwrap();
            prop_assert_eq!(apply_mask(&mask, &g).unwrap(), v);
            // A^T A is the projector onto observed cells
            let x = Grid::from_vec(12, 9, rng::normals(&mut rng, 108)).unwrap();
            let proj = adjoint_embed(&mask, &apply_mask(&mask, &x).unwrap()).unwrap();
            let flags = mask.indicator();
            for i in 0..108 {
                prop_assert_eq!(proj.values[i], if flags[i] { x.values[i] } else { 0.0 });
            }
        }
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let x = ramp(8, 8);
        let mask = build_mask(MaskStrategy::RandomPixel, 0.5, (8, 8), 1).unwrap();
        let obs = observe(&x, &mask, 0.0, 5).unwrap();
        assert_eq!(obs.y, apply_mask(&mask, &x).unwrap());
        assert_eq!(observe(&x, &mask, 0.3, 5).unwrap(), observe(&x, &mask, 0.3, 5).unwrap());
    }

    #[test]
    fn observation_noise_std() {
        // one observed cell, 1e5 independent noise seeds
        let x = Grid::filled(4, 4, 0.5);
        let mask = MaskOperator::new(4, 4, vec![6]).unwrap();
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| observe(&x, &mask, 0.05, s).unwrap().y[0] - 0.5)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        // standard error of the sample std for Gaussian data: sigma / sqrt(2(n-1))
        let se = 0.05 / (2.0 * (n - 1) as f64).sqrt();
        assert!((std - 0.05).abs() < 3.0 * se, "std {std}");
    }

    #[test]
    fn aware_without_buildings_only_flags() {
        let x = ramp(16, 16);
        let mask = build_mask(MaskStrategy::RandomPixel, 0.8, (16, 16), 2).unwrap();
        let obs = observe(&x, &mask, 0.01, 2).unwrap();
        let scene = Scene::empty(16, 16, (0, 0), SimParams::default());
        let aug = augment_aware(&obs, &scene, AWARE_SIGMA).unwrap();
        assert!(aug.aware);
        assert_eq!(aug.mask, obs.mask);
        assert_eq!(aug.y, obs.y);
    }

    #[test]
    fn aware_adds_building_cells_once() {
        let x = ramp(16, 16);
        let mut scene = Scene::empty(16, 16, (0, 0), SimParams::default());
        scene.add_building(4, 4, 3, 5);
        let mask = build_mask(MaskStrategy::RandomPixel, 0.7, (16, 16), 4).unwrap();
        let obs = observe(&x, &mask, 0.01, 4).unwrap();
        let aug = augment_aware(&obs, &scene, AWARE_SIGMA).unwrap();

        let flags = mask.indicator();
        let overlap = (0..256).filter(|&i| scene.buildings[i] == 1 && flags[i]).count();
        assert_eq!(aug.len(), obs.len() + 15 - overlap);
        assert!(aug.mask.observed.windows(2).all(|w| w[0] < w[1]));
        // existing observations untouched
        for (k, &i) in obs.mask.observed.iter().enumerate() {
            let j = aug.mask.observed.binary_search(&i).unwrap();
            assert_eq!(aug.y[j], obs.y[k]);
            assert_eq!(aug.noise_std[j], obs.noise_std[k]);
        }
        // new ones are zero with the aware std
        for (j, &i) in aug.mask.observed.iter().enumerate() {
            if !flags[i] {
                assert_eq!(scene.buildings[i], 1);
                assert_eq!(aug.y[j], 0.0);
                assert_eq!(aug.noise_std[j], AWARE_SIGMA);
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let x = ramp(16, 16);
        let mut scene = Scene::empty(16, 16, (0, 0), SimParams::default());
        scene.add_building(1, 1, 2, 2);
        let mask = build_mask(MaskStrategy::RandomPixel, 0.6, (16, 16), 4).unwrap();
        let obs = augment_aware(&observe(&x, &mask, 0.05, 4).unwrap(), &scene, AWARE_SIGMA).unwrap();
        let path = dir.path().join("obs.json");
        obs.save(&path).unwrap();
        assert_eq!(ObservationSet::load(&path).unwrap(), obs);
    }
}
