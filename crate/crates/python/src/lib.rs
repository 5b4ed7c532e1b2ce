//! Python bindings: synthetic pairs, images, flows, models and metrics.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rtn_core::checkpoint::Checkpoint;
use rtn_core::config::RunConfig;
use rtn_core::data::{self, Keypoint, KeypointSet, Mask, SynthConfig};
use rtn_core::eval::{self, EvalConfig};
use rtn_core::geometry;
use rtn_core::matching::RecurrenceConfig;
use rtn_core::train::{self, TrainConfig};
use std::path::PathBuf;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// RGB image with values in [0, 1], stored row-major as (y, x, channel).
#[pyclass(name = "Image", module = "rtn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyImage(data::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        data::Image::new(height, width, data).map(Self).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::load_image(&path).map(Self).map_err(io_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_image(&self.0, &path).map_err(io_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn pixel(&self, x: usize, y: usize) -> PyResult<[f64; 3]> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(value_err(format!("pixel ({x}, {y}) out of bounds")));
        }
        Ok(self.0.pixel(x, y))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.height(), self.0.width())
    }
}

/// Per-pixel displacement (u, v).
#[pyclass(name = "FlowField", module = "rtn", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFlow(geometry::FlowField);

#[pymethods]
impl PyFlow {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        geometry::FlowField::new(height, width, data).map(Self).map_err(value_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn at(&self, x: usize, y: usize) -> PyResult<[f64; 2]> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(value_err(format!("pixel ({x}, {y}) out of bounds")));
        }
        Ok(self.0.at(x, y))
    }

    fn __repr__(&self) -> String {
        format!("FlowField({}x{})", self.0.height(), self.0.width())
    }
}

/// Synthetic pair; `gt_flow` lives on the target grid and maps into the source.
#[pyclass(name = "Pair", module = "rtn", frozen, get_all)]
struct PyPair {
    source: PyImage,
    target: PyImage,
    gt_flow: PyFlow,
    mask: Vec<bool>,
    seed: u64,
}

#[pyfunction]
#[pyo3(signature = (seed, size=64))]
fn gen_pair(seed: u64, size: usize) -> PyResult<PyPair> {
    let p = data::gen_pair(seed, &SynthConfig { size, ..SynthConfig::default() }).map_err(value_err)?;
    Ok(PyPair {
        source: PyImage(p.source),
        target: PyImage(p.target),
        gt_flow: PyFlow(p.gt_flow),
        mask: p.fg_mask.data().to_vec(),
        seed: p.seed,
    })
}

#[pyfunction]
fn warp_image(image: &PyImage, flow: &PyFlow) -> PyResult<PyImage> {
    geometry::warp_image(&image.0, &flow.0).map(PyImage).map_err(value_err)
}

fn mask_for(flow: &geometry::FlowField, mask: Option<Vec<bool>>) -> PyResult<Mask> {
    match mask {
        Some(m) => Mask::new(flow.height(), flow.width(), m).map_err(value_err),
        None => Ok(Mask::full(flow.height(), flow.width())),
    }
}

#[pyfunction]
#[pyo3(signature = (flow, gt_flow, mask=None, threshold=5.0, norm_dim=100.0))]
fn endpoint_accuracy(
    flow: &PyFlow,
    gt_flow: &PyFlow,
    mask: Option<Vec<bool>>,
    threshold: f64,
    norm_dim: f64,
) -> PyResult<f64> {
    let cfg = EvalConfig { threshold, norm_dim, ..EvalConfig::default() };
    let mask = mask_for(&flow.0, mask)?;
    eval::endpoint_accuracy(&flow.0, &gt_flow.0, &mask, &cfg).map_err(value_err)
}

fn keypoints(points: Vec<(u64, f64, f64)>) -> PyResult<KeypointSet> {
    KeypointSet::new(points.into_iter().map(|(id, x, y)| Keypoint { id, x, y }).collect()).map_err(value_err)
}

/// Points are `(id, x, y)` tuples.
#[pyfunction]
fn pck(pred: Vec<(u64, f64, f64)>, gt: Vec<(u64, f64, f64)>, ref_dim: f64, alpha: f64) -> PyResult<f64> {
    eval::pck(&keypoints(pred)?, &keypoints(gt)?, ref_dim, alpha).map_err(value_err)
}

/// Moves each `(id, x, y)` by the bilinearly interpolated flow.
#[pyfunction]
fn transport_keypoints(points: Vec<(u64, f64, f64)>, flow: &PyFlow) -> PyResult<Vec<(u64, f64, f64)>> {
    let moved = eval::transport_keypoints(&keypoints(points)?, &flow.0);
    Ok(moved.points().iter().map(|k| (k.id, k.x, k.y)).collect())
}

/// Feature and matching networks.
#[pyclass(name = "Model", module = "rtn", frozen)]
struct PyModel {
    model: train::Model,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Random backbone and a zero-initialised matcher head.
    #[new]
    #[pyo3(signature = (seed=0, radius=2, iterations=4))]
    fn new(seed: u64, radius: usize, iterations: usize) -> PyResult<Self> {
        let recurrence = RecurrenceConfig::with_iterations(radius, iterations);
        recurrence.validate().map_err(value_err)?;
        let mut config = RunConfig::default();
        config.train.recurrence = recurrence.clone();
        config.train.loss.radius = radius;
        Ok(Self { model: train::Model::new(recurrence, seed), config })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(io_err)?;
        let model = ck.to_model().map_err(value_err)?;
        Ok(Self { model, config: ck.config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.model, &self.config, 0).save(&path).map_err(io_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.model.recurrence.k_max()
    }

    /// Flow on the target grid such that `warp_image(source, flow)` ~ target.
    fn estimate_flow(&self, py: Python<'_>, source: &PyImage, target: &PyImage) -> PyResult<PyFlow> {
        let (s, t) = (source.0.clone(), target.0.clone());
        py.detach(|| self.model.estimate_flow(&s, &t)).map(PyFlow).map_err(value_err)
    }

    /// One flow per recurrent iteration.
    fn estimate_flows(&self, py: Python<'_>, source: &PyImage, target: &PyImage) -> PyResult<Vec<PyFlow>> {
        let (s, t) = (source.0.clone(), target.0.clone());
        let flows = py.detach(|| self.model.estimate_flows(&s, &t)).map_err(value_err)?;
        Ok(flows.into_iter().map(PyFlow).collect())
    }
}

/// Trains from scratch on synthetic pairs; returns the model and loss curve.
#[pyfunction]
#[pyo3(signature = (steps, seed=0, batch=4, lr=1e-2, size=64))]
fn train_model(
    py: Python<'_>,
    steps: usize,
    seed: u64,
    batch: usize,
    lr: f64,
    size: usize,
) -> PyResult<(PyModel, Vec<f64>)> {
    let config = RunConfig {
        train: TrainConfig {
            steps,
            seed,
            batch,
            lr,
            data: SynthConfig { size, ..SynthConfig::default() },
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let cfg = config.train.clone();
    let out = py.detach(|| train::train(&cfg, None, |_, _| Ok(()))).map_err(value_err)?;
    Ok((PyModel { model: out.model, config }, out.losses))
}

/// Largest relative error of the full-loss finite-difference check.
#[pyfunction]
#[pyo3(signature = (seed=7, probes=2))]
fn grad_check(py: Python<'_>, seed: u64, probes: usize) -> PyResult<f64> {
    py.detach(|| rtn_core::selfcheck::full_loss_check(seed, probes))
        .map(|r| r.max_rel_error)
        .map_err(value_err)
}

#[pymodule]
fn rtn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyFlow>()?;
    m.add_class::<PyPair>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_pair, m)?)?;
    m.add_function(wrap_pyfunction!(warp_image, m)?)?;
    m.add_function(wrap_pyfunction!(endpoint_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(pck, m)?)?;
    m.add_function(wrap_pyfunction!(transport_keypoints, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
