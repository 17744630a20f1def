//! Python bindings. Images cross the boundary as flat float sequences in
//! row-major order (a NumPy array works); results come back as lists and dicts.

use std::path::PathBuf;

use capsnet_core::capsule::route_values;
use capsnet_core::data::{load_mnist as load_idx_split, multimnist_count as count_formula, Split};
use capsnet_core::eval::{perturb_dimensions, segment as segment_image};
use capsnet_core::model::{Decode, LossBreakdown, TrainSample};
use capsnet_core::train::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer as CoreTrainer};
use capsnet_core::{CapsError, CapsNetConfig, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: impl Into<CapsError>) -> PyErr {
    let e = e.into();
    match e {
        CapsError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let w = *t.shape().last().unwrap_or(&1);
    t.data().chunks(w.max(1)).map(<[f32]>::to_vec).collect()
}

fn loss_dict<'py>(py: Python<'py>, l: &LossBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("margin", l.margin)?;
    d.set_item("reconstruction", l.reconstruction)?;
    d.set_item("total", l.total)?;
    Ok(d)
}

/// Capsule network with dynamic routing.
#[pyclass(name = "CapsNet", module = "capsnet", skip_from_py_object)]
#[derive(Clone)]
struct PyCapsNet {
    inner: capsnet_core::CapsNet<f32>,
}

impl PyCapsNet {
    fn image(&self, pixels: Vec<f32>) -> PyResult<Tensor<f32>> {
        let s = self.inner.config().input_size;
        if pixels.len() != s * s {
            return Err(PyValueError::new_err(format!("expected {} pixels ({s}x{s}), got {}", s * s, pixels.len())));
        }
        Tensor::new(vec![s, s], pixels).map_err(err)
    }
}

#[pymethods]
impl PyCapsNet {
    #[new]
    #[pyo3(signature = (input_size=28, routing_iterations=3, orphan=false, learnable_priors=false, recon_scale=0.0005, seed=0))]
    fn new(
        input_size: usize,
        routing_iterations: usize,
        orphan: bool,
        learnable_priors: bool,
        recon_scale: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let config = CapsNetConfig {
            routing_iterations,
            orphan,
            learnable_priors,
            recon_scale,
            ..CapsNetConfig::for_input(input_size)
        };
        Ok(Self { inner: capsnet_core::CapsNet::new(config, seed).map_err(err)? })
    }

    /// Loads the model from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(&path).map_err(err)?.model })
    }

    /// Writes an evaluation-only checkpoint (no optimizer state).
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint { model: self.inner.clone(), optimizer: None, step: 0, rng_key: [0; 32] };
        save_checkpoint(&path, &ck).map_err(err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn routing_iterations(&self) -> usize {
        self.inner.config().routing_iterations
    }

    #[setter]
    fn set_routing_iterations(&mut self, r: usize) -> PyResult<()> {
        self.inner.set_routing_iterations(r).map_err(err)
    }

    fn parameter_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.parameter_count();
        let d = PyDict::new(py);
        for (k, v) in [
            ("conv1", c.conv1),
            ("primary", c.primary),
            ("digit", c.digit),
            ("priors", c.priors),
            ("decoder", c.decoder),
            ("without_decoder", c.without_decoder),
            ("with_decoder", c.with_decoder),
        ] {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    /// Runs the network. `decode` is `None`, `"predicted"` or a class index.
    #[pyo3(signature = (image, decode=None))]
    fn forward<'py>(
        &self,
        py: Python<'py>,
        image: Vec<f32>,
        decode: Option<Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mode = match decode {
            None => Decode::None,
            Some(d) if d.extract::<String>().is_ok_and(|s| s == "predicted") => Decode::Predicted,
            Some(d) => Decode::Class(d.extract::<usize>()?),
        };
        let out = self.inner.forward(&self.image(image)?, mode).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("lengths", out.lengths.data().to_vec())?;
        d.set_item("predicted", out.predicted_class())?;
        d.set_item("v", rows(&out.v))?;
        d.set_item("routing_deltas", out.trace.mean_abs_delta.clone())?;
        d.set_item("reconstruction", out.reconstruction.map(|r| r.data().to_vec()))?;
        Ok(d)
    }

    /// Margin, reconstruction and total loss for one labelled image.
    fn loss<'py>(&self, py: Python<'py>, image: Vec<f32>, label: usize) -> PyResult<Bound<'py, PyDict>> {
        let sample = TrainSample::single(self.image(image)?, label);
        loss_dict(py, &self.inner.total_loss(&sample).map_err(err)?)
    }

    /// Decodes capsule outputs `[classes][dim]` with every row but `class` masked.
    fn decode(&self, v: Vec<Vec<f32>>, class: usize) -> PyResult<Vec<f32>> {
        let shape = vec![v.len(), v.first().map_or(0, Vec::len)];
        let t = Tensor::new(shape, v.into_iter().flatten().collect()).map_err(err)?;
        Ok(self.inner.mask_and_decode(&t, class).map_err(err)?.data().to_vec())
    }

    /// Reconstructions with each dimension of capsule `class` nudged:
    /// `[dims][steps][pixels]` plus the offsets used.
    fn perturb(&self, image: Vec<f32>, class: usize) -> PyResult<(Vec<Vec<Vec<f32>>>, Vec<f32>)> {
        let grid = perturb_dimensions(&self.inner, &self.image(image)?, class).map_err(err)?;
        let tiles = grid.tiles.iter().map(|row| row.iter().map(|t| t.data().to_vec()).collect()).collect();
        Ok((tiles, grid.offsets.to_vec()))
    }

    /// Splits a composite into its two most active digits.
    fn segment<'py>(&self, py: Python<'py>, image: Vec<f32>) -> PyResult<Bound<'py, PyDict>> {
        let seg = segment_image(&self.inner, &self.image(image)?).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("classes", seg.classes)?;
        d.set_item("reconstructions", seg.reconstructions.iter().map(|r| r.data().to_vec()).collect::<Vec<_>>())?;
        d.set_item("first", seg.assignment.iter().map(|a| a.first).collect::<Vec<_>>())?;
        d.set_item("second", seg.assignment.iter().map(|a| a.second).collect::<Vec<_>>())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "CapsNet(input_size={}, routing_iterations={}, recon_scale={})",
            c.input_size, c.routing_iterations, c.recon_scale
        )
    }
}

/// Adam training loop over caller-supplied mini-batches.
#[pyclass(module = "capsnet")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (model, learning_rate=0.001, decay_steps=2000.0, seed=0))]
    fn new(model: &PyCapsNet, learning_rate: f64, decay_steps: f64, seed: u64) -> PyResult<Self> {
        let config = TrainConfig { learning_rate, decay_steps, seed, ..TrainConfig::default() };
        Ok(Self { inner: CoreTrainer::new(model.inner.clone(), config).map_err(err)? })
    }

    /// One optimizer step on the mean loss of the batch.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        images: Vec<Vec<f32>>,
        labels: Vec<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(PyValueError::new_err("need one label per image and at least one image"));
        }
        let s = self.inner.model.config().input_size;
        let samples = images
            .into_iter()
            .zip(labels)
            .map(|(px, y)| Ok(TrainSample::single(Tensor::new(vec![s, s], px).map_err(err)?, y)))
            .collect::<PyResult<Vec<_>>>()?;
        let loss = self.inner.train_step(&samples).map_err(err)?;
        loss_dict(py, &loss)
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.step()
    }

    /// Snapshot of the current weights.
    fn model(&self) -> PyCapsNet {
        PyCapsNet { inner: self.inner.model.clone() }
    }

    #[pyo3(signature = (path, with_optimizer=true))]
    fn save(&self, path: PathBuf, with_optimizer: bool) -> PyResult<()> {
        save_checkpoint(&path, &self.inner.checkpoint(with_optimizer)).map_err(err)
    }
}

/// Squash nonlinearity applied to one vector.
#[pyfunction]
fn squash(s: Vec<f32>) -> PyResult<Vec<f32>> {
    let t = Tensor::new(vec![s.len()], s).map_err(err)?;
    Ok(capsnet_core::capsule::squash(&t).data().to_vec())
}

/// Routing-by-agreement on predictions `[lower][upper][dim]`.
#[pyfunction]
#[pyo3(signature = (predictions, iterations=3, orphan=false))]
fn route<'py>(
    py: Python<'py>,
    predictions: Vec<Vec<Vec<f32>>>,
    iterations: usize,
    orphan: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let n = predictions.len();
    let j = predictions.first().map_or(0, Vec::len);
    let d = predictions.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if predictions.iter().any(|r| r.len() != j || r.iter().any(|v| v.len() != d)) {
        return Err(PyValueError::new_err("predictions must be a rectangular [lower][upper][dim] array"));
    }
    let t = Tensor::new(vec![n, j, d], predictions.into_iter().flatten().flatten().collect()).map_err(err)?;
    let (v, state, trace) = route_values(&t, iterations, None, orphan).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("v", rows(&v))?;
    out.set_item("couplings", rows(&state.couplings))?;
    out.set_item("logits", rows(&state.logits))?;
    out.set_item("mean_abs_delta", trace.mean_abs_delta)?;
    Ok(out)
}

/// Reads one MNIST split: `(pixels, labels)` with pixels as `n*784` bytes.
#[pyfunction]
fn load_mnist<'py>(py: Python<'py>, data_dir: PathBuf, split: &str) -> PyResult<(Bound<'py, PyBytes>, Vec<u8>)> {
    let split = match split {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(PyValueError::new_err(format!("split must be 'train' or 'test', not {other:?}"))),
    };
    let images = load_idx_split(&data_dir, split).map_err(err)?;
    let pixels: Vec<u8> = images.iter().flat_map(|im| im.pixels.iter().copied()).collect();
    Ok((PyBytes::new(py, &pixels), images.iter().map(|im| im.label).collect()))
}

/// Number of composites generated from `base` digits at `per_digit` each.
#[pyfunction]
fn multimnist_count(base: u64, per_digit: u64) -> u64 {
    count_formula(base, per_digit)
}

#[pymodule]
fn capsnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCapsNet>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(multimnist_count, m)?)?;
    Ok(())
}
