//! Python bindings. Tensors cross the boundary as flat float lists in
//! channel-major order plus a `(c, h, w)` shape; reports come back as
//! plain dicts.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use freqhe_core::analyzer::{self, PbsModel};
use freqhe_core::dct::{self, DctConfig, RgbImage};
use freqhe_core::io;
use freqhe_core::network::{self, Architecture, BuildOptions, NetworkGraph, WeightSet};
use freqhe_core::noise::NoiseChannel;
use freqhe_core::quant::{self, CryptoParams, QuantizedModel};
use freqhe_core::sim;
use freqhe_core::stats::{self, CorrectnessVector};
use freqhe_core::tensor::{FloatTensor, Shape};
use freqhe_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_format() {
        PyIOError::new_err(e.to_string())
    } else if e.is_invariant() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

type Dims = (usize, usize, usize);

fn shape(d: Dims) -> Shape {
    Shape::new(d.0, d.1, d.2)
}

fn tensor(data: Vec<f64>, dims: Dims) -> PyResult<FloatTensor> {
    FloatTensor::from_vec(shape(dims), data).map_err(py_err)
}

/// Serializable value to a Python object through `json.loads`.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

#[pyclass(name = "Graph", module = "freqhe")]
struct PyGraph {
    inner: NetworkGraph,
}

#[pymethods]
impl PyGraph {
    /// Built-in architecture (`resnet18-rgb`, `resnet18-dct`, `resnet20-rgb`,
    /// `resnet20-dct`) for the given input dimensions.
    #[staticmethod]
    #[pyo3(signature = (arch, dims, classes=None, head_relu=None))]
    fn build(arch: &str, dims: Dims, classes: Option<usize>, head_relu: Option<bool>) -> PyResult<Self> {
        let arch: Architecture = arch.parse().map_err(py_err)?;
        let opts = BuildOptions {
            num_classes: classes,
            head_relu,
            ..BuildOptions::default()
        };
        Ok(Self {
            inner: network::build_network(arch, shape(dims), &opts).map_err(py_err)?,
        })
    }

    /// Conv, ReLU, global pooling and a linear classifier.
    #[staticmethod]
    fn toy(dims: Dims, hidden: usize, classes: usize) -> Self {
        Self {
            inner: network::toy_cnn(shape(dims), hidden, classes),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_graph(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_graph(path, &self.inner).map_err(py_err)
    }

    fn input_dims(&self) -> PyResult<Dims> {
        let s = self.inner.input_dims().map_err(py_err)?;
        Ok((s.c, s.h, s.w))
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Static operation counts as a dict.
    #[pyo3(signature = (count_maxpool=false))]
    fn analyze<'py>(&self, py: Python<'py>, count_maxpool: bool) -> PyResult<Bound<'py, PyAny>> {
        let pbs = PbsModel {
            count_maxpool_comparisons: count_maxpool,
            ..PbsModel::default()
        };
        let dims = self.inner.input_dims().map_err(py_err)?;
        to_py(py, &analyzer::count_ops(&self.inner, dims, &pbs).map_err(py_err)?)
    }

    fn forward(&self, weights: &PyWeights, data: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = tensor(data, self.input_dims()?)?;
        network::forward_float(&self.inner, &weights.inner, &x).map_err(py_err)
    }
}

#[pyclass(name = "Weights", module = "freqhe")]
struct PyWeights {
    inner: WeightSet,
}

#[pymethods]
impl PyWeights {
    #[staticmethod]
    fn random(graph: &PyGraph, seed: u64) -> Self {
        Self {
            inner: network::init_weights(&graph.inner, seed),
        }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_weights(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_weights(path, &self.inner).map_err(py_err)
    }
}

#[pyclass(name = "Model", module = "freqhe")]
struct PyModel {
    inner: QuantizedModel,
}

#[pymethods]
impl PyModel {
    /// Calibrates on `calibration` (a list of flat input tensors) and
    /// quantizes to `bits`-bit weights and activations.
    #[staticmethod]
    #[pyo3(signature = (graph, weights, calibration, bits=4, rounding=6, p_err=0.01))]
    fn quantize(
        graph: &PyGraph,
        weights: &PyWeights,
        calibration: Vec<Vec<f64>>,
        bits: u32,
        rounding: u32,
        p_err: f64,
    ) -> PyResult<Self> {
        let dims = graph.input_dims()?;
        let batch = calibration
            .into_iter()
            .map(|d| tensor(d, dims))
            .collect::<PyResult<Vec<_>>>()?;
        let cal = quant::calibrate(&graph.inner, &weights.inner, &batch).map_err(py_err)?;
        let crypto = CryptoParams::new(rounding, p_err).map_err(py_err)?;
        let m = quant::quantize_model(&graph.inner, &weights.inner, &cal, bits, &crypto, &PbsModel::default())
            .map_err(py_err)?;
        Ok(Self { inner: m })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_model(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_model(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits
    }

    #[getter]
    fn circuit_bitwidth(&self) -> u32 {
        self.inner.crypto.circuit_bitwidth
    }

    #[getter]
    fn p_err(&self) -> f64 {
        self.inner.crypto.p_err
    }

    #[setter]
    fn set_p_err(&mut self, p: f64) -> PyResult<()> {
        let mut c = self.inner.crypto.clone();
        c.p_err = p;
        c.validate().map_err(py_err)?;
        self.inner.crypto = c;
        Ok(())
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Noise-free integer run: `(logits, trace)`.
    fn run_exact<'py>(&self, py: Python<'py>, data: Vec<f64>) -> PyResult<(Vec<f64>, Bound<'py, PyAny>)> {
        let x = tensor(data, self.dims()?)?;
        let (l, t) = py.detach(|| sim::run_exact(&self.inner, &x)).map_err(py_err)?;
        Ok((l, to_py(py, &t)?))
    }

    /// Integer run with bootstrap noise drawn from `seed`.
    fn run_noisy<'py>(&self, py: Python<'py>, data: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, Bound<'py, PyAny>)> {
        let x = tensor(data, self.dims()?)?;
        let (l, t) = py.detach(|| sim::run_noisy(&self.inner, &x, seed)).map_err(py_err)?;
        Ok((l, to_py(py, &t)?))
    }

    /// Labels for a batch; image `i` uses a seed derived from `seed` and `i`.
    /// `seed=None` runs without noise.
    #[pyo3(signature = (batch, seed=None))]
    fn predict(&self, py: Python<'_>, batch: Vec<Vec<f64>>, seed: Option<u64>) -> PyResult<Vec<usize>> {
        let dims = self.dims()?;
        let xs = batch.into_iter().map(|d| tensor(d, dims)).collect::<PyResult<Vec<_>>>()?;
        py.detach(|| {
            xs.iter()
                .enumerate()
                .map(|(i, x)| {
                    let l = match seed {
                        Some(s) => sim::run_noisy(&self.inner, x, NoiseChannel::image_seed(s, i as u64))?.0,
                        None => sim::run_exact(&self.inner, x)?.0,
                    };
                    Ok(sim::argmax(&l))
                })
                .collect::<freqhe_core::Result<Vec<_>>>()
        })
        .map_err(py_err)
    }
}

impl PyModel {
    fn dims(&self) -> PyResult<Dims> {
        let s = self.inner.graph.input_dims().map_err(py_err)?;
        Ok((s.c, s.h, s.w))
    }
}

/// Block-DCT frequency tensor of an RGB image given as `height*width*3`
/// bytes. Returns `(data, (c, h, w))`.
#[pyfunction]
#[pyo3(signature = (pixels, width, height, filter_size=8, channels=64))]
fn preprocess(pixels: Vec<u8>, width: usize, height: usize, filter_size: usize, channels: usize) -> PyResult<(Vec<f64>, Dims)> {
    let img = RgbImage::new(width, height, pixels).map_err(py_err)?;
    let cfg = DctConfig::new(filter_size, channels).map_err(py_err)?;
    let f = dct::preprocess(&img, &cfg).map_err(py_err)?;
    let s = f.shape();
    Ok((f.data.data, (s.c, s.h, s.w)))
}

/// Orthonormal N x N DCT-II matrix, row-major.
#[pyfunction]
fn dct_matrix(n: usize) -> Vec<f64> {
    dct::dct_matrix(n)
}

/// Per-subset accuracies and the percentile interval of their mean, in
/// percent.
#[pyfunction]
#[pyo3(signature = (correct, subsets=20, subset_size=200, resamples=10_000, level=0.95, seed=0))]
fn bootstrap<'py>(
    py: Python<'py>,
    correct: Vec<bool>,
    subsets: usize,
    subset_size: usize,
    resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let v = CorrectnessVector::new(correct).map_err(py_err)?;
    let s = stats::subset_accuracies(&v, subsets, subset_size, seed).map_err(py_err)?;
    let r = py
        .detach(|| stats::bootstrap_ci(&s.accuracies, resamples, level, seed))
        .map_err(py_err)?;
    let d = to_py(py, &r)?;
    d.cast::<PyDict>()?.set_item("disjoint", s.disjoint)?;
    Ok(d)
}

/// Latency rescaled to another thread count, rounded for display.
#[pyfunction]
#[pyo3(signature = (seconds, threads, target=96))]
fn normalize_latency(seconds: f64, threads: u32, target: u32) -> PyResult<u64> {
    Ok(analyzer::display_seconds(
        analyzer::normalize_latency(seconds, threads, target).map_err(py_err)?,
    ))
}

#[pymodule]
fn freqhe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyWeights>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(dct_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_latency, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
