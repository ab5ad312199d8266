//! Python bindings: the autodiff tape, the MLP, the finite-difference
//! solver, dataset I/O, training and Péclet analysis.
//!
//! Arrays cross the boundary as flat lists of floats plus an explicit shape,
//! so the module has no dependency on numpy.

use std::path::PathBuf;

use ecs_pinn::autodiff::{NodeId, Tape, Tensor};
use ecs_pinn::data::{self, SyntheticSpec, VoxelSeries};
use ecs_pinn::fdsolver::{self, Boundary, Grid};
use ecs_pinn::network::MlpParams;
use ecs_pinn::physics::{self, PecletReport};
use ecs_pinn::trainer::{self, PinnModel, TrainRecord, TrainingConfig};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(values: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<Tensor> {
    let shape = shape.unwrap_or_else(|| vec![values.len()]);
    Tensor::new(shape, values).map_err(value_err)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged point list"));
    }
    Tensor::new(vec![n, cols], rows.concat()).map_err(value_err)
}

/// Reverse-mode tape. Nodes are referred to by integer ids.
#[pyclass(name = "Tape")]
struct PyTape {
    inner: Tape,
}

impl PyTape {
    fn id(&self, index: usize) -> PyResult<NodeId> {
        self.inner.node(index).map_err(value_err)
    }
}

#[pymethods]
impl PyTape {
    #[new]
    fn new() -> Self {
        Self { inner: Tape::new() }
    }

    #[pyo3(signature = (values, shape=None))]
    fn constant(&mut self, values: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<usize> {
        Ok(self.inner.constant(tensor(values, shape)?).map_err(value_err)?.index())
    }

    #[pyo3(signature = (values, shape=None))]
    fn param(&mut self, values: Vec<f64>, shape: Option<Vec<usize>>) -> PyResult<usize> {
        Ok(self.inner.param(tensor(values, shape)?).map_err(value_err)?.index())
    }

    fn matmul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        Ok(self.inner.matmul(self.id(a)?, self.id(b)?).map_err(value_err)?.index())
    }

    fn add(&mut self, a: usize, b: usize) -> PyResult<usize> {
        Ok(self.inner.add(self.id(a)?, self.id(b)?).map_err(value_err)?.index())
    }

    fn sub(&mut self, a: usize, b: usize) -> PyResult<usize> {
        Ok(self.inner.sub(self.id(a)?, self.id(b)?).map_err(value_err)?.index())
    }

    fn mul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        Ok(self.inner.mul(self.id(a)?, self.id(b)?).map_err(value_err)?.index())
    }

    fn tanh(&mut self, a: usize) -> PyResult<usize> {
        Ok(self.inner.tanh(self.id(a)?).map_err(value_err)?.index())
    }

    fn square(&mut self, a: usize) -> PyResult<usize> {
        Ok(self.inner.square(self.id(a)?).map_err(value_err)?.index())
    }

    fn scale(&mut self, a: usize, s: f64) -> PyResult<usize> {
        Ok(self.inner.scale(self.id(a)?, s).map_err(value_err)?.index())
    }

    fn sum(&mut self, a: usize) -> PyResult<usize> {
        Ok(self.inner.sum(self.id(a)?).map_err(value_err)?.index())
    }

    fn mean(&mut self, a: usize) -> PyResult<usize> {
        Ok(self.inner.mean(self.id(a)?).map_err(value_err)?.index())
    }

    /// `(values, shape)` of a node.
    fn value(&self, node: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let t = self.inner.try_value(self.id(node)?).map_err(value_err)?;
        Ok((t.values().to_vec(), t.shape().to_vec()))
    }

    /// Gradients of a scalar node, keyed by parameter node id.
    fn backward(&self, root: usize) -> PyResult<Vec<(usize, Vec<f64>)>> {
        let grads = self.inner.backward(self.id(root)?).map_err(value_err)?;
        Ok(grads.iter().map(|(id, g)| (id.index(), g.values().to_vec())).collect())
    }
}

/// Fully connected tanh network with a linear output.
#[pyclass(name = "Mlp")]
struct PyMlp {
    inner: MlpParams,
}

#[pymethods]
impl PyMlp {
    #[new]
    #[pyo3(signature = (layer_dims, seed=0))]
    fn new(layer_dims: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: MlpParams::init_glorot(&layer_dims, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = MlpParams::load(&path).map_err(|e| PyOSError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| PyOSError::new_err(e.to_string()))
    }

    #[getter]
    fn layer_dims(&self) -> Vec<usize> {
        self.inner.layer_dims().to_vec()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Network output for each `(x.., t)` row.
    fn forward(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.forward(&matrix(points)?).map_err(value_err)
    }

    /// `{"value", "dt", "grad", "lap"}` per point; `grad` holds one list per
    /// spatial axis.
    fn forward_with_derivs<'py>(
        &self,
        py: Python<'py>,
        points: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let pts = matrix(points)?;
        let mut tape = Tape::new();
        let nodes = self.inner.register(&mut tape, false).map_err(value_err)?;
        let b = nodes.forward_with_derivs(&mut tape, &pts).map_err(value_err)?;
        let vals = |id: NodeId| tape.value(id).values().to_vec();
        let out = pyo3::types::PyDict::new(py);
        out.set_item("value", vals(b.value))?;
        out.set_item("dt", vals(b.dt))?;
        out.set_item("grad", b.grad.iter().map(|&g| vals(g)).collect::<Vec<_>>())?;
        out.set_item("lap", vals(b.lap))?;
        Ok(out)
    }
}

/// Voxel intensities over time with a region-of-interest mask.
#[pyclass(name = "VoxelSeries")]
struct PyVoxelSeries {
    inner: VoxelSeries,
}

#[pymethods]
impl PyVoxelSeries {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = data::load_voxel_series(&path).map_err(|e| PyOSError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        data::save_voxel_series(&self.inner, &dir).map_err(|e| PyOSError::new_err(e.to_string()))
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn spacing_mm(&self) -> [f64; 3] {
        self.inner.spacing_mm
    }

    #[getter]
    fn timestamps_s(&self) -> Vec<f64> {
        self.inner.timestamps_s.clone()
    }

    #[getter]
    fn spatial_dim(&self) -> usize {
        self.inner.spatial_dim()
    }

    #[getter]
    fn roi(&self) -> Vec<bool> {
        self.inner.roi.clone()
    }

    /// Flat voxel values of one frame, x fastest.
    fn frame(&self, index: usize) -> PyResult<Vec<f64>> {
        self.inner
            .frames
            .get(index)
            .cloned()
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.num_frames()
    }
}

/// Builds a synthetic series from a JSON recipe; returns the series and the
/// ground truth as a JSON string.
#[pyfunction]
fn generate_synthetic(spec_json: &str) -> PyResult<(PyVoxelSeries, String)> {
    let spec: SyntheticSpec = serde_json::from_str(spec_json).map_err(value_err)?;
    let (series, truth) = data::generate_synthetic(&spec).map_err(value_err)?;
    let truth = serde_json::to_string(&truth).map_err(value_err)?;
    Ok((PyVoxelSeries { inner: series }, truth))
}

/// Outcome of a training run.
#[pyclass(name = "TrainResult")]
struct PyTrainResult {
    record: TrainRecord,
}

#[pymethods]
impl PyTrainResult {
    /// mm²/s
    #[getter]
    fn diffusion(&self) -> f64 {
        self.record.model.diffusion_physical()
    }

    /// mm/s
    #[getter]
    fn velocity(&self) -> Vec<f64> {
        self.record.model.velocity_physical()
    }

    #[getter]
    fn losses(&self) -> Vec<f64> {
        self.record.rows.iter().map(|r| r.loss).collect()
    }

    fn to_csv(&self) -> String {
        self.record.to_csv()
    }

    fn save_model(&self, dir: PathBuf) -> PyResult<()> {
        self.record
            .model
            .save(&dir)
            .map(|_| ())
            .map_err(|e| PyOSError::new_err(e.to_string()))
    }

    /// Normalised predictions at every voxel for each time in seconds.
    fn predict(&self, series: &PyVoxelSeries, times_s: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        trainer::predict(&self.record.model, &series.inner, &times_s).map_err(value_err)
    }
}

/// Trains on `series` with a JSON config (missing keys take defaults).
#[pyfunction]
#[pyo3(signature = (series, config_json="{}"))]
fn train(py: Python<'_>, series: &PyVoxelSeries, config_json: &str) -> PyResult<PyTrainResult> {
    let config: TrainingConfig = serde_json::from_str(config_json).map_err(value_err)?;
    let inner = series.inner.clone();
    let result = py.detach(move || trainer::train_series(&config, &inner, |_| {}));
    let (record, _) = result.map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(PyTrainResult { record })
}

/// Loads a model directory and returns `(D, v)` in physical units.
#[pyfunction]
fn load_model(dir: PathBuf) -> PyResult<(f64, Vec<f64>)> {
    let model = PinnModel::load(&dir).map_err(|e| PyOSError::new_err(e.to_string()))?;
    Ok((model.diffusion_physical(), model.velocity_physical()))
}

/// Explicit upwind/central solve on a regular grid; returns the field after
/// every step.
#[pyfunction]
#[pyo3(signature = (dims, spacing, c0, diffusion, velocity, dt, steps, periodic=true))]
#[allow(clippy::too_many_arguments)]
fn solve_ade_fd(
    dims: Vec<usize>,
    spacing: Vec<f64>,
    c0: Vec<f64>,
    diffusion: f64,
    velocity: Vec<f64>,
    dt: f64,
    steps: usize,
    periodic: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let origin = vec![0.0; dims.len()];
    let boundary = if periodic { Boundary::Periodic } else { Boundary::ZeroFlux };
    let grid = Grid::new(dims, spacing, origin, boundary).map_err(value_err)?;
    fdsolver::solve_ade_fd(&grid, &c0, diffusion, &velocity, dt, steps).map_err(value_err)
}

/// Advected free-space Gaussian at point `x`, time `t`.
#[pyfunction]
#[pyo3(signature = (x, t, diffusion, velocity, x0, t_offset=0.0))]
fn analytic_gaussian(
    x: Vec<f64>,
    t: f64,
    diffusion: f64,
    velocity: Vec<f64>,
    x0: Vec<f64>,
    t_offset: f64,
) -> PyResult<f64> {
    fdsolver::analytic_gaussian(&x, t, diffusion, &velocity, &x0, t_offset).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (diffusion, speed, length=physics::DEFAULT_CHARACTERISTIC_LENGTH_MM))]
fn peclet(diffusion: f64, speed: f64, length: f64) -> PyResult<f64> {
    physics::peclet(diffusion, speed, length).map_err(value_err)
}

/// Péclet report as `key=value` text.
#[pyfunction]
#[pyo3(signature = (diffusion, speed, length=physics::DEFAULT_CHARACTERISTIC_LENGTH_MM))]
fn analyze(diffusion: f64, speed: f64, length: f64) -> PyResult<String> {
    Ok(PecletReport::new(diffusion, speed, length).map_err(value_err)?.to_text())
}

#[pyfunction]
fn classify_regime(pe: f64) -> PyResult<String> {
    Ok(physics::classify_regime(pe).map_err(value_err)?.to_string())
}

#[pymodule]
#[pyo3(name = "ecs_pinn")]
fn ecs_pinn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTape>()?;
    m.add_class::<PyMlp>()?;
    m.add_class::<PyVoxelSeries>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(load_model, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ade_fd, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(peclet, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(classify_regime, m)?)?;
    Ok(())
}
