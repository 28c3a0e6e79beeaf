//! Python bindings: run configs, the pipeline commands, the projector and
//! the reconstruction steps on plain lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use deam::config::RunConfig;
use deam::deam::Solver;
use deam::geometry::{SystemMatrix, SystemOperator};
use deam::image::ComponentImage;
use deam::io::TensorFile;
use deam::spectral::CountSinogram;
use deam::{ifbp, objective, phantom, pipeline, spectral, spr, Error};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{} ({})", e, e.kind());
    match e {
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::External(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

type Pair = (Vec<f64>, Vec<f64>);

#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: RunConfig::default() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(&path).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = RunConfig::from_json(text).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    fn objective_hash(&self) -> String {
        self.inner.objective_hash()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        (self.inner.geometry.nx, self.inner.geometry.ny)
    }

    #[getter]
    fn n_iterations(&self) -> usize {
        self.inner.solver.n_iterations
    }

    #[setter]
    fn set_n_iterations(&mut self, n: usize) {
        self.inner.solver.n_iterations = n;
    }

    fn __repr__(&self) -> String {
        let g = &self.inner.geometry;
        format!("Config({}x{} grid, {} views x {} detectors)", g.nx, g.ny, g.n_views, g.n_detectors)
    }
}

/// The fan-beam system operator of a config.
#[pyclass(name = "Projector")]
struct PyProjector {
    inner: SystemMatrix,
}

#[pymethods]
impl PyProjector {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let geom = config.inner.geometry.build().map_err(py_err)?;
        Ok(Self { inner: SystemMatrix::new(geom).map_err(py_err)? })
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.n_views()
    }

    #[getter]
    fn n_detectors(&self) -> usize {
        self.inner.n_detectors()
    }

    #[getter]
    fn n_pixels(&self) -> usize {
        self.inner.n_pixels()
    }

    fn forward_project(&self, img: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward_project(&img).map_err(py_err)
    }

    fn back_project(&self, sino: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.back_project(&sino).map_err(py_err)
    }
}

/// A config with its projector, spectra and basis built once.
#[pyclass(name = "Problem")]
struct PyProblem {
    inner: pipeline::Problem,
}

impl PyProblem {
    fn counts(&self, counts: Pair) -> PyResult<CountSinogram> {
        let g = &self.inner.config.geometry;
        CountSinogram::new(g.n_views, g.n_detectors, [counts.0, counts.1]).map_err(py_err)
    }

    fn image(&self, c: Pair) -> PyResult<ComponentImage> {
        let g = &self.inner.config.geometry;
        ComponentImage::new(g.nx, g.ny, c.0, c.1).map_err(py_err)
    }
}

fn pair(c: ComponentImage) -> Pair {
    let [a, b] = c.c;
    (a, b)
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(Self { inner: pipeline::Problem::new(&config.inner).map_err(py_err)? })
    }

    /// Ground-truth components of the configured phantom.
    fn truth(&self) -> PyResult<Pair> {
        let spec = self.inner.config.phantom_spec().map_err(py_err)?;
        Ok(pair(phantom::rasterize(&spec, &self.inner.materials).map_err(py_err)?.0))
    }

    /// Expected counts of both spectra for components `c`.
    fn forward_counts(&self, c: Pair) -> PyResult<Pair> {
        let c = self.image(c)?;
        let g = spectral::forward_counts(&c, &self.inner.system, &self.inner.spectrum, &self.inner.basis).map_err(py_err)?;
        let [a, b] = g.counts;
        Ok((a, b))
    }

    fn poisson(&self, expected: Pair, seed: u64) -> PyResult<Pair> {
        let g = self.counts(expected)?;
        let [a, b] = spectral::simulate_poisson(&g, seed).map_err(py_err)?.counts;
        Ok((a, b))
    }

    fn ifbp(&self, counts: Pair) -> PyResult<Pair> {
        let d = self.counts(counts)?;
        let p = &self.inner;
        let r = ifbp::ifbp_init(&d, &p.system, &p.spectrum, &p.basis, &p.config.initializer.ifbp).map_err(py_err)?;
        Ok(pair(r.c))
    }

    /// Update directions `ud` at `c`.
    fn update_directions(&self, counts: Pair, c: Pair) -> PyResult<Pair> {
        let (d, c) = (self.counts(counts)?, self.image(c)?);
        let p = &self.inner;
        let [a, b] = deam::deam::update_directions_at(&c, &d, &p.system, &p.spectrum, &p.basis).map_err(py_err)?;
        Ok((a, b))
    }

    fn objective(&self, counts: Pair, c: Pair) -> PyResult<f64> {
        let (d, c) = (self.counts(counts)?, self.image(c)?);
        let p = &self.inner;
        let g = spectral::forward_counts(&c, &p.system, &p.spectrum, &p.basis).map_err(py_err)?;
        objective::objective_total(&d, &g, &c, &p.config.solver_config().penalty).map_err(py_err)
    }

    /// DEAM from `initial`; returns the final components and the objective
    /// trace.
    #[pyo3(signature = (counts, initial, n_iterations=None))]
    fn reconstruct(&self, py: Python<'_>, counts: Pair, initial: Pair, n_iterations: Option<usize>) -> PyResult<(Pair, Vec<f64>)> {
        let (d, c) = (self.counts(counts)?, self.image(initial)?);
        let p = &self.inner;
        let mut cfg = p.config.solver_config();
        if let Some(n) = n_iterations {
            cfg.n_iterations = n;
        }
        let grid = (p.config.geometry.nx, p.config.geometry.ny);
        let state = py
            .detach(|| Solver::new(&p.system, &d, &p.spectrum, &p.basis, cfg, grid)?.run(c))
            .map_err(py_err)?;
        let totals = state.trace.iter().map(|r| r.total).collect();
        Ok((pair(state.current), totals))
    }

    fn spr_map(&self, c: Pair) -> PyResult<Vec<f64>> {
        spr::spr_map(&self.image(c)?, &self.inner.config.spr).map_err(py_err)
    }
}

macro_rules! command {
    ($name:ident, $f:path) => {
        #[pyfunction]
        fn $name(py: Python<'_>, config: &PyConfig, out: PathBuf) -> PyResult<()> {
            let cfg = config.inner.clone();
            py.detach(move || $f(&cfg, &out)).map_err(py_err)
        }
    };
}

command!(simulate, pipeline::cmd_simulate);
command!(init, pipeline::cmd_init);
command!(recon, pipeline::cmd_recon);
command!(metrics, pipeline::cmd_metrics);
command!(run, pipeline::run_all);

/// `(shape, values)` of a tensor file.
#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let t = TensorFile::read(&path).map_err(py_err)?;
    Ok((t.shape, t.data))
}

#[pyfunction]
#[pyo3(signature = (path, shape, data, axes, spacing_mm=None))]
fn write_tensor(path: PathBuf, shape: Vec<usize>, data: Vec<f32>, axes: Vec<String>, spacing_mm: Option<Vec<f64>>) -> PyResult<()> {
    let spacing = spacing_mm.unwrap_or_else(|| vec![0.0; shape.len()]);
    let axes: Vec<&str> = axes.iter().map(String::as_str).collect();
    TensorFile::new(shape, &axes, spacing, data).and_then(|t| t.write(&path)).map_err(py_err)
}

#[pyfunction]
fn idivergence(d: Vec<f64>, g: Vec<f64>) -> PyResult<f64> {
    objective::idivergence_slice(&d, &g).map_err(py_err)
}

/// `(bias_pct, std_pct)` of `est` over the pixel indices `roi`.
#[pyfunction]
fn roi_stats(est: Vec<f64>, truth: f64, roi: Vec<usize>) -> PyResult<(f64, f64)> {
    let s = spr::roi_stats(&est, truth, &roi).map_err(py_err)?;
    Ok((s.bias_pct, s.std_pct))
}

#[pymodule]
fn pydeam(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyProjector>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(init, m)?)?;
    m.add_function(wrap_pyfunction!(recon, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(idivergence, m)?)?;
    m.add_function(wrap_pyfunction!(roi_stats, m)?)?;
    Ok(())
}
