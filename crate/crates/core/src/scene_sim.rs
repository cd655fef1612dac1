//! Synthetic scenes and their normalized pathloss maps.
//!
//! Ground truth is a log-distance decay from the transmitter minus a fixed
//! attenuation per building-boundary crossing on the straight line between
//! transmitter and cell. Building interiors carry zero pathloss.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridMap};
use crate::io;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    #[serde(default = "default_exponent")]
    pub pathloss_exponent: f64,
    #[serde(default = "default_wall")]
    pub wall_attenuation: f64,
    #[serde(default)]
    pub floor_value: f64,
    /// dB range mapped onto `[0, 1]`; `k = 10 * exponent / dynamic_range_db`.
    #[serde(default = "default_range")]
    pub dynamic_range_db: f64,
}

fn default_exponent() -> f64 {
    2.2
}
fn default_wall() -> f64 {
    0.12
}
fn default_range() -> f64 {
    60.0
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            pathloss_exponent: default_exponent(),
            wall_attenuation: default_wall(),
            floor_value: 0.0,
            dynamic_range_db: default_range(),
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pathloss_exponent > 0.0) {
            return Err(Error::param("pathloss_exponent", "must be > 0"));
        }
        if !(self.wall_attenuation >= 0.0) {
            return Err(Error::param("wall_attenuation", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.floor_value) {
            return Err(Error::param("floor_value", "must lie in [0, 1)"));
        }
        if !(self.dynamic_range_db > 0.0) {
            return Err(Error::param("dynamic_range_db", "must be > 0"));
        }
        Ok(())
    }

    /// Slope of the normalized decay per decade of distance.
    pub fn decay_slope(&self) -> f64 {
        10.0 * self.pathloss_exponent / self.dynamic_range_db
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Row-major, 1 = building interior.
    pub buildings: Vec<u8>,
    /// Transmitter (row, col).
    pub tx: (usize, usize),
    pub params: SimParams,
}

impl Scene {
    pub fn empty(width: usize, height: usize, tx: (usize, usize), params: SimParams) -> Self {
        Scene {
            width,
            height,
            buildings: vec![0; width * height],
            tx,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.buildings.len() != self.width * self.height {
            return Err(Error::dims(self.width * self.height, self.buildings.len()));
        }
        if self.buildings.iter().any(|&b| b > 1) {
            return Err(Error::param("buildings", "flags must be 0 or 1"));
        }
        let (r, c) = self.tx;
        if r >= self.height || c >= self.width {
            return Err(Error::param("tx", format!("({r}, {c}) outside the grid")));
        }
        if self.is_building(r, c) {
            return Err(Error::param("tx", "transmitter sits inside a building"));
        }
        self.params.validate()
    }

    #[inline]
    pub fn is_building(&self, row: usize, col: usize) -> bool {
        self.buildings[row * self.width + col] == 1
    }

    pub fn building_count(&self) -> usize {
        self.buildings.iter().filter(|&&b| b == 1).count()
    }

    pub fn tx_index(&self) -> usize {
        self.tx.0 * self.width + self.tx.1
    }

    /// Fills the rectangle `[r0, r0+h) x [c0, c0+w)` with building cells.
    pub fn add_building(&mut self, r0: usize, c0: usize, h: usize, w: usize) {
        for r in r0..(r0 + h).min(self.height) {
            for c in c0..(c0 + w).min(self.width) {
                self.buildings[r * self.width + c] = 1;
            }
        }
    }
}

const RETRIES_PER_BUILDING: usize = 200;

/// Random axis-aligned rectangular buildings around a random transmitter.
pub fn generate_scene(width: usize, height: usize, n_buildings: usize, seed: u64) -> Result<Scene> {
    if width < 16 || height < 16 {
        return Err(Error::param("width/height", "grid must be at least 16x16"));
    }
    let mut rng = rng::stream(seed, &[tag::SCENE]);
    let tx = (rng.random_range(0..height), rng.random_range(0..width));
    let mut scene = Scene::empty(width, height, tx, SimParams::default());

    let min_side = (width.min(height) / 16).max(2);
    let max_side = (width.min(height) / 5).max(min_side + 1);
    let cap = width * height / 2;
    let mut covered = 0usize;
    let mut placed = 0usize;
    let budget = RETRIES_PER_BUILDING * n_buildings.max(1);
    let mut attempts = 0usize;

    while placed < n_buildings {
        if attempts >= budget {
            return Err(Error::PlacementFailed {
                requested: n_buildings,
                placed,
                attempts,
            });
        }
        attempts += 1;
        let h = rng.random_range(min_side..=max_side);
        let w = rng.random_range(min_side..=max_side);
        let r0 = rng.random_range(0..=height - h);
        let c0 = rng.random_range(0..=width - w);
        if (r0..r0 + h).contains(&tx.0) && (c0..c0 + w).contains(&tx.1) {
            continue;
        }
        let mut added = 0;
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                if !scene.is_building(r, c) {
                    added += 1;
                }
            }
        }
        if added == 0 || covered + added >= cap {
            continue;
        }
        scene.add_building(r0, c0, h, w);
        covered += added;
        placed += 1;
    }
    Ok(scene)
}

/// Number of building-boundary crossings on the discrete line from `from` to `to`.
pub fn wall_crossings(scene: &Scene, from: (usize, usize), to: (usize, usize)) -> usize {
    let (mut r, mut c) = (from.0 as i64, from.1 as i64);
    let (r1, c1) = (to.0 as i64, to.1 as i64);
    let dr = (r1 - r).abs();
    let dc = (c1 - c).abs();
    let sr = if r1 >= r { 1 } else { -1 };
    let sc = if c1 >= c { 1 } else { -1 };
    let mut err = dc - dr;
    let mut prev = scene.is_building(r as usize, c as usize);
    let mut crossings = 0;
    while (r, c) != (r1, c1) {
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c += sc;
        }
        if e2 < dc {
            err += dc;
            r += sr;
        }
        let here = scene.is_building(r as usize, c as usize);
        if here != prev {
            crossings += 1;
        }
        prev = here;
    }
    crossings
}

pub fn simulate_pathloss(scene: &Scene) -> Result<GridMap> {
    scene.validate()?;
    let p = &scene.params;
    let k = p.decay_slope();
    let (tr, tc) = scene.tx;
    let mut map = Grid::zeros(scene.width, scene.height);
    for r in 0..scene.height {
        for c in 0..scene.width {
            if scene.is_building(r, c) {
                continue;
            }
            let dist = ((r as f64 - tr as f64).powi(2) + (c as f64 - tc as f64).powi(2)).sqrt();
            let walls = wall_crossings(scene, (tr, tc), (r, c)) as f64;
            let v = 1.0 - k * (1.0 + dist).log10() - p.wall_attenuation * walls;
            map.set(r, c, v.clamp(p.floor_value, 1.0));
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub min_buildings: usize,
    pub max_buildings: usize,
    pub params: SimParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            width: 64,
            height: 64,
            n_train: 200,
            n_test: 20,
            min_buildings: 4,
            max_buildings: 12,
            params: SimParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => tag::TRAIN_SPLIT,
            Split::Test => tag::TEST_SPLIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: DatasetConfig,
    pub files: Vec<FileEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn map_path(split: Split, index: usize) -> String {
    format!("{}/map_{index:04}.dmi", split.name())
}

pub fn scene_path(split: Split, index: usize) -> String {
    format!("{}/scene_{index:04}.dmi", split.name())
}

/// Scene `index` of `split`; the RNG stream depends only on (seed, split, index).
pub fn dataset_scene(config: &DatasetConfig, seed: u64, split: Split, index: usize) -> Result<Scene> {
    let scene_seed = rng::derive(seed, &[split.tag(), index as u64]);
    let mut count_rng = rng::stream(scene_seed, &[tag::SCENE, 0]);
    let n = count_rng.random_range(config.min_buildings..=config.max_buildings);
    let mut scene = generate_scene(config.width, config.height, n, scene_seed)?;
    scene.params = config.params;
    Ok(scene)
}

pub fn generate_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    config.params.validate()?;
    if config.min_buildings > config.max_buildings {
        return Err(Error::param("min_buildings", "must not exceed max_buildings"));
    }
    let jobs: Vec<(Split, usize)> = (0..config.n_train)
        .map(|i| (Split::Train, i))
        .chain((0..config.n_test).map(|i| (Split::Test, i)))
        .collect();
    let rendered: Vec<(Split, usize, Vec<u8>, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(split, i)| {
            let scene = dataset_scene(config, seed, split, i)?;
            let map = simulate_pathloss(&scene)?;
            Ok((split, i, io::encode_scene(&scene), io::encode_grid(&map)))
        })
        .collect::<Result<_>>()?;

    let mut files = Vec::with_capacity(rendered.len() * 2);
    for (split, i, scene_bytes, map_bytes) in rendered {
        for (rel, bytes) in [(scene_path(split, i), scene_bytes), (map_path(split, i), map_bytes)] {
            io::write_bytes(&out_dir.join(&rel), &bytes)?;
            files.push(FileEntry {
                path: rel,
                sha256: io::sha256_hex(&bytes),
            });
        }
    }
    let manifest = Manifest {
        seed,
        config: config.clone(),
        files,
    };
    io::write_json(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

/// A loaded dataset split.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = io::read_json(&dir.join(MANIFEST_NAME))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.manifest.config.n_train,
            Split::Test => self.manifest.config.n_test,
        }
    }

    pub fn load(&self, split: Split, index: usize) -> Result<(Scene, GridMap)> {
        let params = self.manifest.config.params;
        let scene = io::read_scene(&self.dir.join(scene_path(split, index)), params)?;
        let map = io::read_grid(&self.dir.join(map_path(split, index)))?;
        Ok((scene, map))
    }

    pub fn load_maps(&self, split: Split) -> Result<Vec<GridMap>> {
        (0..self.len(split))
            .map(|i| io::read_grid(&self.dir.join(map_path(split, i))))
            .collect()
    }

    /// Recomputes every checksum listed in the manifest.
    pub fn verify(&self) -> Result<()> {
        for entry in &self.manifest.files {
            let path = self.dir.join(&entry.path);
            let actual = io::file_sha256(&path)?;
            if actual != entry.sha256 {
                return Err(Error::Format {
                    path,
                    reason: "checksum mismatch".into(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_buildings_gives_empty_mask() {
        for seed in [0, 1, 99] {
            let s = generate_scene(64, 64, 0, seed).unwrap();
            assert_eq!(s.building_count(), 0);
        }
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let a = generate_scene(64, 64, 8, 7).unwrap();
        let b = generate_scene(64, 64, 8, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tx_never_inside_building() {
        for seed in 0..100 {
            let s = generate_scene(64, 64, 8, seed).unwrap();
            assert!(!s.is_building(s.tx.0, s.tx.1), "seed {seed}");
            assert!(s.building_count() < 64 * 64 / 2);
            s.validate().unwrap();
        }
    }

    #[test]
    fn impossible_placement_is_reported() {
        // every building is at least 3x3 and coverage is capped at half the grid
        let err = generate_scene(16, 16, 500, 3).unwrap_err();
        assert!(matches!(err, Error::PlacementFailed { .. }));
    }

    #[test]
    fn rejects_tiny_grid() {
        assert!(generate_scene(8, 64, 0, 0).is_err());
    }

    #[test]
    fn empty_scene_rays_are_monotone() {
        let scene = Scene::empty(33, 33, (16, 16), SimParams::default());
        let map = simulate_pathloss(&scene).unwrap();
        let dirs = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
        for (dr, dc) in dirs {
            let mut prev = map.get(16, 16);
            for k in 1..=16i64 {
                let v = map.get((16 + dr * k) as usize, (16 + dc * k) as usize);
                assert!(v <= prev, "ray ({dr},{dc}) step {k}");
                prev = v;
            }
        }
    }

    #[test]
    fn tx_cell_is_the_maximum() {
        let scene = generate_scene(64, 64, 8, 11).unwrap();
        let map = simulate_pathloss(&scene).unwrap();
        let (r, c) = scene.tx;
        assert_eq!(map.get(r, c), 1.0);
        assert_eq!(map.max(), map.get(r, c));
    }

    #[test]
    fn empty_scene_is_reflection_symmetric() {
        let scene = Scene::empty(41, 41, (20, 20), SimParams::default());
        let map = simulate_pathloss(&scene).unwrap();
        for dr in 0..=20usize {
            for dc in 0..=20usize {
                let v = map.get(20 + dr, 20 + dc);
                assert_eq!(v, map.get(20 - dr, 20 + dc));
                assert_eq!(v, map.get(20 + dr, 20 - dc));
                assert_eq!(v, map.get(20 - dr, 20 - dc));
            }
        }
    }

    #[test]
    fn wall_shadow_lowers_value() {
        // tx in the middle, one wall block to the right; compare against the mirror cell on the left
        let mut scene = Scene::empty(32, 32, (16, 16), SimParams::default());
        scene.add_building(14, 20, 5, 2);
        let map = simulate_pathloss(&scene).unwrap();
        let behind = map.get(16, 26);
        let mirror = map.get(16, 6);
        assert!(behind < mirror, "{behind} vs {mirror}");
        assert_eq!(wall_crossings(&scene, (16, 16), (16, 26)), 2);
        assert_eq!(wall_crossings(&scene, (16, 16), (16, 6)), 0);
    }

    #[test]
    fn maps_are_normalized_with_zero_interiors() {
        for seed in 0..10 {
            let scene = generate_scene(64, 64, 10, seed).unwrap();
            let map = simulate_pathloss(&scene).unwrap();
            assert!(map.is_normalized());
            for i in 0..map.len() {
                if scene.buildings[i] == 1 {
                    assert_eq!(map.values[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn dataset_file_counts_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_train: 2,
            n_test: 1,
            ..DatasetConfig::default()
        };
        let manifest = generate_dataset(&cfg, 1, dir.path()).unwrap();
        assert_eq!(manifest.files.len(), 6);
        let maps = manifest.files.iter().filter(|f| f.path.contains("map_")).count();
        assert_eq!(maps, 3);
        assert!(dir.path().join(MANIFEST_NAME).exists());
        let ds = Dataset::open(dir.path()).unwrap();
        ds.verify().unwrap();
        for entry in &manifest.files {
            let bytes = std::fs::read(dir.path().join(&entry.path)).unwrap();
            assert_eq!(io::sha256_hex(&bytes), entry.sha256);
        }
        let (scene, map) = ds.load(Split::Test, 0).unwrap();
        assert_eq!(map, io::decode_grid(Path::new("x"), &io::encode_grid(&simulate_pathloss(&scene).unwrap())).unwrap());
    }

    #[test]
    fn dataset_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_train: 2,
            n_test: 1,
            ..DatasetConfig::default()
        };
        generate_dataset(&cfg, 5, a.path()).unwrap();
        generate_dataset(&cfg, 5, b.path()).unwrap();
        for rel in ["train/map_0001.dmi", "test/scene_0000.dmi", MANIFEST_NAME] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }

    #[test]
    fn train_and_test_scenes_differ() {
        let cfg = DatasetConfig::default();
        let train: Vec<_> = (0..5).map(|i| dataset_scene(&cfg, 1, Split::Train, i).unwrap()).collect();
        for i in 0..5 {
            let t = dataset_scene(&cfg, 1, Split::Test, i).unwrap();
            assert!(train.iter().all(|s| s != &t));
        }
    }
}
