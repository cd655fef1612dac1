//! Resumable evaluation sweep over maps, observation conditions and seeds.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;

use crate::baselines::{fit_variogram, idw_interpolate, kriging_interpolate};
use crate::config::{Method, PriorVariant, RunConfig};
use crate::error::{Error, Result};
use crate::grid::GridMap;
use crate::io;
use crate::metrics::{evaluate_run, read_reports, write_reports, MetricsReport, RunKey, RunMetadata};
use crate::observation::{augment_aware, build_mask, observe, ObservationSet};
use crate::prior::denoiser::DenoiserModel;
use crate::prior::{fit_gaussian_prior, PriorHandle};
use crate::rng::{self, tag};
use crate::sampler::{reconstruct, SamplerConfig};
use crate::scene_sim::{Dataset, Scene, Split};
use crate::schedule::NoiseSchedule;

pub const METRICS_FILE: &str = "metrics.csv";
pub const GRID_DIR: &str = "grids";

/// One (map, condition, seed) combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub map: usize,
    pub mask_rate: f64,
    pub sigma: f64,
    pub aware: bool,
    pub seed: u64,
}

impl SweepCell {
    pub fn key(&self, method: Method) -> RunKey {
        RunKey::new(method.name(), self.map, self.mask_rate, self.sigma, self.aware, self.seed)
    }

    /// Relative path of the reconstruction written for `method`.
    pub fn grid_path(&self, method: Method) -> PathBuf {
        let aware = if self.aware { "aware" } else { "unaware" };
        PathBuf::from(GRID_DIR).join(method.name()).join(format!(
            "map{:04}_r{}_s{}_{aware}_seed{}.dmi",
            self.map, self.mask_rate, self.sigma, self.seed
        ))
    }
}

/// Cells in canonical order: map, mask rate, sigma, awareness, seed.
pub fn sweep_cells(config: &RunConfig, n_maps: usize) -> Vec<SweepCell> {
    let s = &config.sweep;
    let mut cells = Vec::new();
    for map in 0..n_maps {
        for &mask_rate in &s.mask_rates {
            for &sigma in &s.sigmas {
                for &aware in &s.aware {
                    for &seed in &s.seeds {
                        cells.push(SweepCell {
                            map,
                            mask_rate,
                            sigma,
                            aware,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells
}

/// Observations for a cell. Mask and noise draws depend on (map, rate, seed) only, so aware and
/// unaware runs and different noise levels share them.
pub fn cell_observations(config: &RunConfig, base_seed: u64, cell: &SweepCell, scene: &Scene, truth: &GridMap) -> Result<ObservationSet> {
    let s = &config.sweep;
    let draw = rng::derive(base_seed, &[tag::SWEEP, cell.map as u64, cell.seed, cell.mask_rate.to_bits()]);
    let mask = build_mask(s.strategy, cell.mask_rate, truth.dims(), draw)?;
    let mut obs = observe(truth, &mask, cell.sigma, draw)?;
    obs.strategy = s.strategy;
    obs.mask_rate = cell.mask_rate;
    if cell.aware {
        obs = augment_aware(&obs, scene, s.aware_sigma)?;
    }
    Ok(obs)
}

/// Sampler settings for a cell: the configured sampler with a per-cell seed.
pub fn cell_sampler(config: &RunConfig, base_seed: u64, cell: &SweepCell) -> SamplerConfig {
    let seed = rng::derive(
        base_seed,
        &[tag::SWEEP, cell.map as u64, cell.seed, cell.mask_rate.to_bits(), cell.sigma.to_bits(), cell.aware as u64],
    );
    SamplerConfig {
        seed,
        record_trace: false,
        ..config.sampler.clone()
    }
}

/// Loads or fits the configured prior.
pub fn load_prior(config: &RunConfig, dataset: &Dataset) -> Result<PriorHandle> {
    match config.prior.variant {
        PriorVariant::Learned => Ok(PriorHandle::Learned(Box::new(DenoiserModel::load(&config.model_path())?))),
        PriorVariant::Gaussian => {
            let maps = dataset.load_maps(Split::Train)?;
            Ok(PriorHandle::Gaussian(fit_gaussian_prior(&maps, config.prior.var_floor)?))
        }
    }
}

/// Reconstructs a cell with one method.
pub fn run_method(
    config: &RunConfig,
    base_seed: u64,
    method: Method,
    cell: &SweepCell,
    obs: &ObservationSet,
    prior: Option<&PriorHandle>,
    schedule: &NoiseSchedule,
) -> Result<GridMap> {
    let s = &config.sweep;
    let dims = obs.dims();
    match method {
        Method::Diffusion => {
            let prior = prior.ok_or_else(|| Error::param("prior", "diffusion needs a prior"))?;
            Ok(reconstruct(obs, prior, schedule, &cell_sampler(config, base_seed, cell))?.map)
        }
        Method::Idw => idw_interpolate(obs, dims, s.idw_power),
        Method::Kriging => {
            let model = fit_variogram(obs, s.variogram_bins)?;
            Ok(kriging_interpolate(obs, dims, &model, s.kriging_neighbors)?.map)
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepSummary {
    pub cells: usize,
    /// Cells whose rows were all present already.
    pub skipped: usize,
    pub rows_written: usize,
    pub failures: Vec<(String, String)>,
}

fn cell_label(cell: &SweepCell, method: Method) -> String {
    format!(
        "{} map={} mask_rate={} sigma={} aware={} seed={}",
        method.name(),
        cell.map,
        cell.mask_rate,
        cell.sigma,
        cell.aware,
        cell.seed
    )
}

struct Ordered {
    next: usize,
    pending: BTreeMap<usize, Vec<MetricsReport>>,
    writer: File,
    rows: usize,
}

impl Ordered {
    fn push(&mut self, index: usize, rows: Vec<MetricsReport>) -> Result<()> {
        self.pending.insert(index, rows);
        while let Some(rows) = self.pending.remove(&self.next) {
            if !rows.is_empty() {
                write_reports(&mut self.writer, &rows, false)?;
                self.rows += rows.len();
            }
            self.next += 1;
        }
        Ok(())
    }
}

fn existing_keys(path: &Path) -> Result<HashSet<RunKey>> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = read_reports(file).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    Ok(rows.iter().map(MetricsReport::key).collect())
}

/// Runs every missing (cell, method) pair and appends its row to `metrics.csv`.
///
/// Rows are appended in canonical cell order whatever `jobs` is; failures are collected and
/// the sweep continues.
pub fn run_sweep(config: &RunConfig, prior: Option<&PriorHandle>, jobs: usize) -> Result<SweepSummary> {
    config.validate()?;
    let base_seed = config.base_seed()?;
    let dataset = Dataset::open(config.dataset_dir())?;
    let n_maps = config.sweep.maps.unwrap_or(dataset.len(Split::Test)).min(dataset.len(Split::Test));
    let schedule = config.schedule.build()?;
    if config.sweep.methods.contains(&Method::Diffusion) {
        let p = prior.ok_or_else(|| Error::param("prior", "diffusion needs a prior"))?;
        p.check_schedule(&schedule)?;
    }
    let out = config.output_dir();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let csv_path = out.join(METRICS_FILE);
    let done = existing_keys(&csv_path)?;
    let fresh = !csv_path.exists();
    let mut writer = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    if fresh {
        write_reports(&mut writer, &[], true)?;
    }

    let cells = sweep_cells(config, n_maps);
    let todo: Vec<Vec<Method>> = cells
        .iter()
        .map(|c| config.sweep.methods.iter().copied().filter(|m| !done.contains(&c.key(*m))).collect())
        .collect();
    let skipped = todo.iter().filter(|t| t.is_empty()).count();
    let state = Mutex::new(Ordered {
        next: 0,
        pending: BTreeMap::new(),
        writer,
        rows: 0,
    });
    let failures = Mutex::new(Vec::new());
    let fail = |label: String, e: &Error| {
        log::warn!("{label}: {e}");
        failures.lock().unwrap().push((label, e.to_string()));
    };

    let work = |index: usize| -> Result<()> {
        let cell = &cells[index];
        let methods = &todo[index];
        let mut rows = Vec::new();
        if !methods.is_empty() {
            match dataset.load(Split::Test, cell.map) {
                Err(e) => fail(format!("map {}", cell.map), &e),
                Ok((scene, truth)) => match cell_observations(config, base_seed, cell, &scene, &truth) {
                    Err(e) => fail(cell_label(cell, methods[0]), &e),
                    Ok(obs) => {
                        for &method in methods {
                            let t0 = Instant::now();
                            let result = run_method(config, base_seed, method, cell, &obs, prior, &schedule).and_then(|recon| {
                                let wall = if config.sweep.record_wall_time { t0.elapsed().as_secs_f64() } else { 0.0 };
                                if config.sweep.save_grids {
                                    io::write_grid(&out.join(cell.grid_path(method)), &recon)?;
                                }
                                let meta = RunMetadata {
                                    method: method.name().into(),
                                    map: cell.map,
                                    mask_rate: cell.mask_rate,
                                    sigma: cell.sigma,
                                    aware: cell.aware,
                                    seed: cell.seed,
                                    wall_time_s: wall,
                                };
                                evaluate_run(&recon, &truth, &scene, &config.metrics, &meta)
                            });
                            match result {
                                Ok(row) => rows.push(row),
                                Err(e) => fail(cell_label(cell, method), &e),
                            }
                        }
                    }
                },
            }
        }
        state.lock().unwrap().push(index, rows)
    };

    let results: Vec<Result<()>> = if jobs <= 1 {
        (0..cells.len()).map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::param("jobs", e.to_string()))?;
        pool.install(|| (0..cells.len()).into_par_iter().map(work).collect())
    };
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let state = state.into_inner().unwrap();
    Ok(SweepSummary {
        cells: cells.len(),
        skipped,
        rows_written: state.rows,
        failures: failures.into_inner().unwrap(),
    })
}
