//! Python bindings: datasets, networks, training, attacks and ARA.
//!
//! Images cross the boundary as flat lists of floats plus a shape; reports
//! come back as plain dicts.

use advex::attack::{attack_many, AttackConfig, Goal};
use advex::data::annotation::{load_annotation_images, read_annotation_log};
use advex::data::{gen_blobs, gen_digits, merge_annotations, DatasetBundle};
use advex::error::Error;
use advex::metrics::{ara, build_curve, CurveOptions};
use advex::nn::{hhrelu_scalar, load_checkpoint, save_checkpoint, Preset};
use advex::tensor::Tensor;
use advex::train::{evaluate, TrainConfig};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::NonFinite(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_dict<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(py_err)
}

/// A train/test pair of labelled images.
#[pyclass(module = "advex_py", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: DatasetBundle,
}

#[pymethods]
impl Dataset {
    /// Gaussian blobs in the unit square.
    #[staticmethod]
    #[pyo3(signature = (classes=3, per_class=300, test_per_class=100, spread=0.1, seed=0))]
    fn blobs(classes: usize, per_class: usize, test_per_class: usize, spread: f64, seed: u64) -> PyResult<Self> {
        let tr = gen_blobs(classes, per_class, spread, seed).map_err(py_err)?;
        let te = gen_blobs(classes, test_per_class, spread, seed.wrapping_add(1)).map_err(py_err)?;
        Ok(Self::split(tr, te))
    }

    /// 8×8 digit glyphs.
    #[staticmethod]
    #[pyo3(signature = (per_class=50, test_per_class=20, noise=0.05, seed=0))]
    fn digits(per_class: usize, test_per_class: usize, noise: f64, seed: u64) -> PyResult<Self> {
        let tr = gen_digits(per_class, noise, seed).map_err(py_err)?;
        let te = gen_digits(test_per_class, noise, seed.wrapping_add(1)).map_err(py_err)?;
        Ok(Self::split(tr, te))
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: DatasetBundle::load(dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.train.num_classes
    }

    #[getter]
    fn image_shape(&self) -> Vec<usize> {
        self.inner.train.image_shape.clone()
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.inner.test.len()
    }

    /// `(flat pixels, shape, labels)` of one split.
    #[pyo3(signature = (split="test"))]
    fn arrays(&self, split: &str) -> PyResult<(Vec<f64>, Vec<usize>, Vec<usize>)> {
        let ds = match split {
            "train" => &self.inner.train,
            "test" => &self.inner.test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let x = ds.images().map_err(py_err)?;
        Ok((x.data().to_vec(), x.shape().to_vec(), ds.labels()))
    }

    /// Append the unchanged records of an annotation log to the train
    /// split; image paths resolve against `root`.
    fn merge_annotations(&self, log: &str, root: &str) -> PyResult<Self> {
        let records = read_annotation_log(log).map_err(py_err)?;
        let pairs = load_annotation_images(&records, root).map_err(py_err)?;
        let mut out = self.clone();
        out.inner.train = merge_annotations(&self.inner.train, &pairs).map_err(py_err)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, classes={}, shape={:?}, train={}, test={})",
            self.inner.train.name,
            self.inner.train.num_classes,
            self.inner.train.image_shape,
            self.inner.train.len(),
            self.inner.test.len()
        )
    }
}

impl Dataset {
    fn split(mut tr: advex::data::Dataset, mut te: advex::data::Dataset) -> Self {
        for (ds, split) in [(&mut tr, "train"), (&mut te, "test")] {
            for e in &mut ds.examples {
                e.id = format!("{split}:{}", e.id);
            }
        }
        Self {
            inner: DatasetBundle::new(tr, te),
        }
    }
}

/// A feed-forward classifier.
#[pyclass(module = "advex_py", skip_from_py_object)]
#[derive(Clone)]
struct Network {
    inner: advex::nn::Network,
}

#[pymethods]
impl Network {
    /// Fresh network from a preset: "mlp-2d", "cnn-tiny" or "linear".
    #[new]
    #[pyo3(signature = (preset, input_shape, num_classes, seed=0))]
    fn new(preset: &str, input_shape: Vec<usize>, num_classes: usize, seed: u64) -> PyResult<Self> {
        let preset: Preset = preset.parse().map_err(py_err)?;
        let inner = advex::nn::Network::from_preset(preset, &input_shape, num_classes, Default::default(), seed)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, dir).map_err(py_err)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape.clone()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Softmax rows for a batch of shape `[B, ...input_shape]`.
    fn probabilities(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.probabilities(&tensor(data, shape)?).map_err(py_err)
    }

    fn predict(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<usize>> {
        self.inner.predict(&tensor(data, shape)?).map_err(py_err)
    }

    /// Accuracy and input-gradient statistics on the test split.
    #[pyo3(signature = (dataset, limit=None))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, limit: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let r = evaluate(&self.inner, &dataset.inner.test, limit).map_err(py_err)?;
        to_dict(py, &r)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(preset={:?}, input_shape={:?}, classes={}, params={})",
            self.inner.preset.name(),
            self.inner.input_shape,
            self.inner.num_classes,
            self.inner.param_count()
        )
    }
}

/// Train on the train split. `config` is a dict of training options;
/// missing keys take their defaults. Returns `(network, epoch_reports)`.
#[pyfunction]
#[pyo3(signature = (dataset, config=None, seed=0))]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config: Option<&Bound<'py, PyAny>>,
    seed: u64,
) -> PyResult<(Network, Bound<'py, PyAny>)> {
    let mut cfg: TrainConfig = match config {
        Some(c) => from_dict(c)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    let data = dataset.inner.train.clone();
    let out = py
        .detach(move || advex::train::train(&cfg, &data, None))
        .map_err(py_err)?;
    Ok((Network { inner: out.network }, to_dict(py, &out.report.epochs)?))
}

/// Attack a batch of images with true labels `labels`. `goal` is one of
/// "adv", "btr", "high-confidence", "explain-plus", "explain-minus".
#[pyfunction]
#[pyo3(signature = (net, data, shape, labels, goal="adv", margin=0.5, rho=0.0, target_class=None, steps=450))]
#[allow(clippy::too_many_arguments)]
fn attack<'py>(
    py: Python<'py>,
    net: &Network,
    data: Vec<f64>,
    shape: Vec<usize>,
    labels: Vec<usize>,
    goal: &str,
    margin: f64,
    rho: f64,
    target_class: Option<usize>,
    steps: usize,
) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let goal: Goal = goal.parse().map_err(py_err)?;
    let cfg = AttackConfig {
        goal,
        margin,
        rho,
        target_class,
        steps,
        ..AttackConfig::default()
    };
    let x = tensor(data, shape)?;
    let n = net.inner.clone();
    let outs = py
        .detach(move || attack_many(&n, &x, &labels, &cfg, 32))
        .map_err(py_err)?;
    outs.iter()
        .map(|o| {
            let d = PyDict::new(py);
            d.set_item("success", o.success)?;
            d.set_item("rmse", o.rmse)?;
            d.set_item("steps_to_first_success", o.steps_to_first_success)?;
            d.set_item("prediction", o.final_prediction.clone())?;
            d.set_item("delta", o.delta_best.as_ref().map(|t| t.data().to_vec()))?;
            Ok(d.into_any())
        })
        .collect()
}

/// Accuracy-robustness area of `net` on the test split.
#[pyfunction]
#[pyo3(signature = (net, dataset, quota=200, cap=0.2, goal="adv", seed=0))]
fn ara_curve<'py>(
    py: Python<'py>,
    net: &Network,
    dataset: &Dataset,
    quota: usize,
    cap: f64,
    goal: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = CurveOptions {
        goal: goal.parse().map_err(py_err)?,
        quota,
        cap,
        seed,
        ..CurveOptions::default()
    };
    let test = &dataset.inner.test;
    let images = test.images().map_err(py_err)?;
    let labels = test.labels();
    let n = net.inner.clone();
    let curve = py
        .detach(move || build_curve(&n, &images, &labels, &opts, &AttackConfig::default()))
        .map_err(py_err)?;
    to_dict(py, &curve)
}

/// Area for given per-example radii, cap and naive accuracy.
#[pyfunction]
#[pyo3(name = "ara", signature = (radii, cap=0.2, naive=0.0))]
fn ara_from_radii(radii: Vec<f64>, cap: f64, naive: f64) -> f64 {
    ara(&radii, cap, naive)
}

#[pyfunction]
#[pyo3(signature = (x, d=1.0))]
fn hhrelu(x: f64, d: f64) -> f64 {
    hhrelu_scalar(x, d)
}

#[pymodule]
fn advex_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(ara_curve, m)?)?;
    m.add_function(wrap_pyfunction!(ara_from_radii, m)?)?;
    m.add_function(wrap_pyfunction!(hhrelu, m)?)?;
    Ok(())
}
