//! Python bindings: schedules, scenes, observations, priors, the posterior sampler,
//! the Gaussian oracle, interpolation baselines and metrics.
//!
//! Grids cross the boundary as row-major nested lists (`list[list[float]]`).

use std::path::PathBuf;

use dmi_core::baselines::{fit_variogram, idw_interpolate, kriging_interpolate};
use dmi_core::metrics::{self, MetricsConfig};
use dmi_core::observation::{self as obsmod, MaskStrategy};
use dmi_core::prior::denoiser::DenoiserModel;
use dmi_core::prior::{fit_gaussian_prior, GaussianPrior, PriorHandle};
use dmi_core::sampler::{self, SamplerConfig, Selection};
use dmi_core::scene_sim;
use dmi_core::schedule::{self as sched, NoiseSchedule};
use dmi_core::{oracle, Grid};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: dmi_core::Error) -> PyErr {
    match e {
        dmi_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_grid(rows: Vec<Vec<f64>>) -> PyResult<Grid> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("grid must be a nonempty rectangular list of rows"));
    }
    Grid::from_vec(width, height, rows.into_iter().flatten().collect()).map_err(err)
}

fn from_grid(g: &Grid) -> Vec<Vec<f64>> {
    g.values.chunks(g.width).map(<[f64]>::to_vec).collect()
}

/// Noise schedule with per-step coefficients.
#[pyclass(name = "Schedule", module = "dmipy", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    /// DDPM schedule; `beta_min`/`beta_max` default to the 1000-step linear range rescaled to `n_steps`.
    #[new]
    #[pyo3(signature = (n_steps, beta_min=None, beta_max=None))]
    fn new(n_steps: usize, beta_min: Option<f64>, beta_max: Option<f64>) -> PyResult<Self> {
        let (lo, hi) = sched::default_betas(n_steps.max(1));
        let inner = sched::make_ddpm_schedule(n_steps, beta_min.unwrap_or(lo), beta_max.unwrap_or(hi)).map_err(err)?;
        Ok(PySchedule { inner })
    }

    /// Variance-exploding schedule reaching zero signal at the final step.
    #[staticmethod]
    fn ddm(n_steps: usize) -> PyResult<Self> {
        Ok(PySchedule {
            inner: sched::make_ddm_schedule(n_steps).map_err(err)?,
        })
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps
    }
    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.a.clone()
    }
    #[getter]
    fn b(&self) -> Vec<f64> {
        self.inner.b.clone()
    }
    #[getter]
    fn c(&self) -> Vec<f64> {
        self.inner.c.clone()
    }
    #[getter]
    fn d(&self) -> Vec<f64> {
        self.inner.d.clone()
    }
    #[getter]
    fn sigma_step(&self) -> Vec<f64> {
        self.inner.sigma_step.clone()
    }

    /// Draws `x_t` given `x_0`.
    fn forward_sample(&self, x0: Vec<Vec<f64>>, t: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_grid(&sched::forward_sample(&self.inner, &to_grid(x0)?, t, seed).map_err(err)?))
    }
}

/// Building layout with a transmitter.
#[pyclass(name = "Scene", module = "dmipy", frozen)]
struct PyScene {
    inner: scene_sim::Scene,
}

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn generate(width: usize, height: usize, n_buildings: usize, seed: u64) -> PyResult<Self> {
        Ok(PyScene {
            inner: scene_sim::generate_scene(width, height, n_buildings, seed).map_err(err)?,
        })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }
    #[getter]
    fn tx(&self) -> (usize, usize) {
        self.inner.tx
    }
    /// Row-major 0/1 building mask.
    #[getter]
    fn buildings(&self) -> Vec<Vec<u8>> {
        self.inner.buildings.chunks(self.inner.width).map(<[u8]>::to_vec).collect()
    }

    /// Normalized pathloss map in `[0, 1]`.
    fn pathloss(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_grid(&scene_sim::simulate_pathloss(&self.inner).map_err(err)?))
    }
}

/// Masked noisy measurements of a map.
#[pyclass(name = "Observations", module = "dmipy", frozen)]
struct PyObservations {
    inner: obsmod::ObservationSet,
}

#[pymethods]
impl PyObservations {
    /// Observes `truth` at the cells kept by a random or structured mask.
    #[staticmethod]
    #[pyo3(signature = (truth, mask_rate, sigma, seed, strategy="random_pixel"))]
    fn observe(truth: Vec<Vec<f64>>, mask_rate: f64, sigma: f64, seed: u64, strategy: &str) -> PyResult<Self> {
        let strategy = match strategy {
            "random_pixel" => MaskStrategy::RandomPixel,
            "structured" => MaskStrategy::Structured,
            other => return Err(PyValueError::new_err(format!("unknown mask strategy `{other}`"))),
        };
        let truth = to_grid(truth)?;
        let mask = obsmod::build_mask(strategy, mask_rate, truth.dims(), seed).map_err(err)?;
        let mut inner = obsmod::observe(&truth, &mask, sigma, seed).map_err(err)?;
        inner.strategy = strategy;
        inner.mask_rate = mask_rate;
        Ok(PyObservations { inner })
    }

    /// Observations from explicit row-major cell indices.
    #[staticmethod]
    fn from_indices(width: usize, height: usize, indices: Vec<usize>, values: Vec<f64>, sigma: f64) -> PyResult<Self> {
        let mask = obsmod::MaskOperator::new(width, height, indices).map_err(err)?;
        Ok(PyObservations {
            inner: obsmod::ObservationSet::new(mask, values, sigma).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyObservations {
            inner: obsmod::ObservationSet::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Adds building interiors as zero-valued measurements.
    #[pyo3(signature = (scene, aware_sigma=0.01))]
    fn augment_aware(&self, scene: &PyScene, aware_sigma: f64) -> PyResult<Self> {
        Ok(PyObservations {
            inner: obsmod::augment_aware(&self.inner, &scene.inner, aware_sigma).map_err(err)?,
        })
    }

    #[getter]
    fn indices(&self) -> Vec<usize> {
        self.inner.mask.observed.clone()
    }
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.y.clone()
    }
    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }
    #[getter]
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Analytic Gaussian prior or trained denoiser.
#[pyclass(name = "Prior", module = "dmipy", frozen)]
struct PyPrior {
    inner: PriorHandle,
}

#[pymethods]
impl PyPrior {
    /// Diagonal Gaussian prior with per-cell mean and variance.
    #[staticmethod]
    fn gaussian(mean: Vec<Vec<f64>>, var: Vec<Vec<f64>>) -> PyResult<Self> {
        let g = GaussianPrior::new(to_grid(mean)?, to_grid(var)?).map_err(err)?;
        Ok(PyPrior {
            inner: PriorHandle::Gaussian(g),
        })
    }

    #[staticmethod]
    fn homogeneous(width: usize, height: usize, mean: f64, var: f64) -> PyResult<Self> {
        Ok(PyPrior {
            inner: PriorHandle::Gaussian(GaussianPrior::homogeneous(width, height, mean, var).map_err(err)?),
        })
    }

    /// Per-cell moments of a set of maps.
    #[staticmethod]
    #[pyo3(signature = (maps, var_floor=1e-4))]
    fn fit(maps: Vec<Vec<Vec<f64>>>, var_floor: f64) -> PyResult<Self> {
        let grids = maps.into_iter().map(to_grid).collect::<PyResult<Vec<_>>>()?;
        Ok(PyPrior {
            inner: PriorHandle::Gaussian(fit_gaussian_prior(&grids, var_floor).map_err(err)?),
        })
    }

    /// Loads a trained denoiser written by `dmi train-prior`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPrior {
            inner: PriorHandle::Learned(Box::new(DenoiserModel::load(&path).map_err(err)?)),
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.name()
    }

    /// Unconditional sample from the prior.
    fn sample(&self, schedule: &PySchedule, width: usize, height: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        Ok(from_grid(
            &dmi_core::prior::sample_prior(&self.inner, &schedule.inner, width, height, seed).map_err(err)?,
        ))
    }
}

fn gaussian_of(prior: &PyPrior) -> PyResult<&GaussianPrior> {
    match &prior.inner {
        PriorHandle::Gaussian(g) => Ok(g),
        PriorHandle::Learned(_) => Err(PyValueError::new_err("needs a Gaussian prior")),
    }
}

/// Posterior sample given the observations.
#[pyfunction]
#[pyo3(signature = (obs, prior, schedule, m=10, seed=0, selection="per_cell"))]
fn reconstruct(obs: &PyObservations, prior: &PyPrior, schedule: &PySchedule, m: usize, seed: u64, selection: &str) -> PyResult<Vec<Vec<f64>>> {
    let selection = match selection {
        "per_cell" => Selection::PerCell,
        "joint" => Selection::Joint,
        other => return Err(PyValueError::new_err(format!("unknown selection `{other}`"))),
    };
    let cfg = SamplerConfig {
        m,
        seed,
        selection,
        ..SamplerConfig::default()
    };
    let rec = sampler::reconstruct(&obs.inner, &prior.inner, &schedule.inner, &cfg).map_err(err)?;
    Ok(from_grid(&rec.map))
}

/// Exact posterior mean and variance under a Gaussian prior.
#[pyfunction]
fn posterior_gaussian(prior: &PyPrior, obs: &PyObservations) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let post = oracle::posterior_gaussian(gaussian_of(prior)?, &obs.inner).map_err(err)?;
    Ok((from_grid(&post.mean), from_grid(&post.var)))
}

/// Tikhonov-regularized least squares estimate.
#[pyfunction]
fn map_tikhonov(prior: &PyPrior, obs: &PyObservations) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_grid(&oracle::map_tikhonov(gaussian_of(prior)?, &obs.inner).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (obs, power=2.0))]
fn idw(obs: &PyObservations, power: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_grid(&idw_interpolate(&obs.inner, obs.inner.dims(), power).map_err(err)?))
}

/// Ordinary kriging with a fitted exponential variogram.
#[pyfunction]
#[pyo3(signature = (obs, max_neighbors=16, bins=15))]
fn kriging(obs: &PyObservations, max_neighbors: usize, bins: usize) -> PyResult<Vec<Vec<f64>>> {
    let model = fit_variogram(&obs.inner, bins).map_err(err)?;
    let out = kriging_interpolate(&obs.inner, obs.inner.dims(), &model, max_neighbors).map_err(err)?;
    Ok(from_grid(&out.map))
}

#[pyfunction]
fn psnr(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::psnr(&to_grid(a)?, &to_grid(b)?, &MetricsConfig::default()).map_err(err)
}

#[pyfunction]
fn ssim(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::ssim(&to_grid(a)?, &to_grid(b)?, &MetricsConfig::default()).map_err(err)
}

#[pyfunction]
fn nmse(truth: Vec<Vec<f64>>, pred: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::nmse(&to_grid(truth)?, &to_grid(pred)?).map_err(err)
}

#[pyfunction]
fn rmse(truth: Vec<Vec<f64>>, pred: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::rmse(&to_grid(truth)?, &to_grid(pred)?).map_err(err)
}

/// Distance in cells between the reconstruction's peak and the transmitter.
#[pyfunction]
fn spe(recon: Vec<Vec<f64>>, scene: &PyScene) -> PyResult<f64> {
    metrics::spe(&to_grid(recon)?, &scene.inner).map_err(err)
}

#[pymodule]
fn dmipy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyObservations>()?;
    m.add_class::<PyPrior>()?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(posterior_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(map_tikhonov, m)?)?;
    m.add_function(wrap_pyfunction!(idw, m)?)?;
    m.add_function(wrap_pyfunction!(kriging, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(nmse, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(spe, m)?)?;
    Ok(())
}
