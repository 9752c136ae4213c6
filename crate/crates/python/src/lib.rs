//! Python bindings: `import asucnn`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use asu_cnn::activations::{self, ActivationKind};
use asu_cnn::artifacts::{self, Checkpoint};
use asu_cnn::data::{self, Split};
use asu_cnn::gradcheck::{check_model, Fault};
use asu_cnn::layers::{self, ConvSpec};
use asu_cnn::model::{self, Architecture, ModelParams, PARAM_NAMES};
use asu_cnn::optim::LrSchedule;
use asu_cnn::train::{self, TrainConfig};
use asu_cnn::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Usage(_) | Error::UnknownLayer { .. } | Error::Shape(_) | Error::Size(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyIOError::new_err(e.to_string()),
    }
}

fn parse_kind(name: &str) -> PyResult<ActivationKind> {
    name.parse().map_err(to_py)
}

fn image_tensor(arch: &Architecture, pixels: Vec<f32>) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(&arch.input_dims(), pixels).map_err(to_py)
}

#[pyfunction]
fn asu(z: f64) -> f64 {
    activations::asu(z)
}

#[pyfunction]
fn asu_prime(z: f64) -> f64 {
    activations::asu_prime(z)
}

#[pyfunction]
fn asu_second(z: f64) -> f64 {
    activations::asu_second(z)
}

/// Evaluate a named activation (`asu`, `gcu` or `relu`) and its derivative.
#[pyfunction]
fn activation(name: &str, z: f64) -> PyResult<(f64, f64)> {
    let kind = parse_kind(name)?;
    Ok((kind.eval(z), kind.derivative(z)))
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> Vec<f64> {
    activations::softmax_stable(&logits)
}

/// Returns `(loss, grad)` for one example.
#[pyfunction]
fn sparse_cce(logits: Vec<f64>, label: usize) -> PyResult<(f64, Vec<f64>)> {
    train::sparse_cce_with_softmax(&logits, label).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (epoch, lr0 = 1e-3, decay = 0.1))]
fn lr_at_epoch(epoch: usize, lr0: f64, decay: f64) -> PyResult<f64> {
    Ok(LrSchedule::new(lr0, decay)
        .map_err(to_py)?
        .lr_at_epoch(epoch))
}

/// Output `(h, w, n_f)` of a convolution over an `n × n × c_in` input.
#[pyfunction]
#[pyo3(signature = (n, f, n_f, p = 0, s = 1, c_in = 1))]
fn conv_output_shape(
    n: usize,
    f: usize,
    n_f: usize,
    p: usize,
    s: usize,
    c_in: usize,
) -> PyResult<(usize, usize, usize)> {
    let spec = ConvSpec {
        n,
        f,
        p,
        s,
        n_f,
        c_in,
    };
    layers::conv_output_shape(&spec).map_err(to_py)
}

#[pyclass(name = "GradReport", frozen)]
struct PyGradReport {
    #[pyo3(get)]
    passed: bool,
    #[pyo3(get)]
    max_rel: f64,
    #[pyo3(get)]
    failing_layer: Option<String>,
    text: String,
}

#[pymethods]
impl PyGradReport {
    fn __str__(&self) -> String {
        self.text.clone()
    }
}

/// Finite-difference check of the reduced network.
#[pyfunction]
#[pyo3(signature = (seeds = vec![1, 2, 3], activation = "asu", fault = None))]
fn gradcheck(
    py: Python<'_>,
    seeds: Vec<u64>,
    activation: &str,
    fault: Option<&str>,
) -> PyResult<PyGradReport> {
    let arch = Architecture::tiny(parse_kind(activation)?);
    let fault: Option<Fault> = fault.map(str::parse).transpose().map_err(to_py)?;
    let report = py
        .detach(|| check_model(&arch, &seeds, fault))
        .map_err(to_py)?;
    Ok(PyGradReport {
        passed: report.pass(),
        max_rel: report.max_rel(),
        failing_layer: report.failing_layer().map(str::to_string),
        text: report.to_string(),
    })
}

/// A CIFAR-10 network with `f32` parameters.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed = 0, activation = "asu", hidden = 64))]
    fn new(seed: u64, activation: &str, hidden: usize) -> PyResult<Self> {
        let arch = Architecture {
            hidden,
            activation: parse_kind(activation)?,
            ..Architecture::default()
        };
        let params = model::build_model(arch, seed).map_err(to_py)?;
        Ok(PyModel { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel {
            params: ckpt.into_model().map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.params, None)
            .save(&path)
            .map_err(to_py)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    #[getter]
    fn activation(&self) -> &'static str {
        self.params.arch.activation.name()
    }

    #[getter]
    fn param_names(&self) -> Vec<&'static str> {
        PARAM_NAMES.to_vec()
    }

    /// Shapes from the input through every stage to the logits.
    fn shape_cascade(&self) -> PyResult<Vec<Vec<usize>>> {
        let mut out = vec![self.params.arch.input_dims().to_vec()];
        out.extend(self.params.arch.stage_shapes().map_err(to_py)?.cascade());
        Ok(out)
    }

    /// Logits for one channel-last image given as a flat list.
    fn forward(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let image = image_tensor(&self.params.arch, pixels)?;
        let out = model::forward_full(&self.params, &image).map_err(to_py)?;
        Ok(out.logits.into_data())
    }

    fn predict(&self, pixels: Vec<f32>) -> PyResult<usize> {
        let image = image_tensor(&self.params.arch, pixels)?;
        let out = model::forward_full(&self.params, &image).map_err(to_py)?;
        Ok(out.logits.argmax())
    }

    /// Post-activation output of a named layer as `(dims, flat values)`.
    fn layer_output(&self, pixels: Vec<f32>, layer: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let image = image_tensor(&self.params.arch, pixels)?;
        let out = model::forward_full(&self.params, &image).map_err(to_py)?;
        let t = out
            .activation(layer)
            .ok_or_else(|| PyValueError::new_err(format!("no layer named {layer}")))?;
        Ok((t.dims().to_vec(), t.data().to_vec()))
    }

    /// Write feature-map mosaics and return the file paths.
    #[pyo3(signature = (pixels, out_dir, layers = "all"))]
    fn export_feature_maps(
        &self,
        pixels: Vec<f32>,
        out_dir: PathBuf,
        layers: &str,
    ) -> PyResult<Vec<PathBuf>> {
        let image = image_tensor(&self.params.arch, pixels)?;
        let written = artifacts::export_feature_maps(&self.params, &image, layers, &out_dir)
            .map_err(to_py)?;
        Ok(written.into_iter().map(|(p, _)| p).collect())
    }

    /// `(loss, accuracy)` on the CIFAR-10 test split under `data_dir`.
    #[pyo3(signature = (data_dir, subset = None, seed = 0))]
    fn evaluate(
        &self,
        py: Python<'_>,
        data_dir: PathBuf,
        subset: Option<usize>,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let params = &self.params;
        py.detach(|| {
            let test = data::load_split(&data_dir, Split::Test, subset, seed)?;
            train::evaluate(params, &test)
        })
        .map_err(to_py)
    }
}

/// Train on CIFAR-10 under `data_dir`. Returns the model and one
/// `(epoch, lr, train_loss, train_acc, val_loss, val_acc)` tuple per epoch.
#[pyfunction]
#[pyo3(signature = (data_dir, epochs = 20, batch_size = 64, seed = 0, activation = "asu", subset = None))]
#[allow(clippy::type_complexity)]
fn fit(
    py: Python<'_>,
    data_dir: PathBuf,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    activation: &str,
    subset: Option<usize>,
) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64, f64, f64)>)> {
    let config = TrainConfig {
        epochs,
        batch_size,
        seed,
        activation: parse_kind(activation)?,
        data_root: Some(data_dir),
        train_subset: subset,
        test_subset: subset,
        ..TrainConfig::default()
    };
    let outcome = py.detach(|| train::fit(&config, |_| {})).map_err(to_py)?;
    let rows = outcome
        .metrics
        .iter()
        .map(|m| {
            (
                m.epoch,
                m.lr,
                m.train_loss,
                m.train_acc,
                m.val_loss,
                m.val_acc,
            )
        })
        .collect();
    Ok((
        PyModel {
            params: outcome.params,
        },
        rows,
    ))
}

#[pymodule]
fn asucnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(asu, m)?)?;
    m.add_function(wrap_pyfunction!(asu_prime, m)?)?;
    m.add_function(wrap_pyfunction!(asu_second, m)?)?;
    m.add_function(wrap_pyfunction!(activation, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_cce, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_epoch, m)?)?;
    m.add_function(wrap_pyfunction!(conv_output_shape, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGradReport>()?;
    m.add("CLASS_NAMES", data::CLASS_NAMES.to_vec())?;
    m.add(
        "FAULTS",
        Fault::ALL.iter().map(|f| f.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
