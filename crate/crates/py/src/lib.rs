//! Python bindings. Structured results cross the boundary as JSON and are
//! decoded with the stdlib `json` module, so Python sees plain dicts/lists.

use std::path::PathBuf;

use ctdiag_core::diagnosis::{self, AggregationRule, Label, ThresholdPolicy};
use ctdiag_core::ingest;
use ctdiag_core::metrics;
use ctdiag_core::pipeline::score_volumes;
use ctdiag_core::trainer::{self, TrainConfig};
use ctdiag_core::weights_io::{self, NamedTensor, TensorRef};
use ctdiag_core::xception::{build_modified_xception, count_params, freeze_base, HeadSpec, ModelGraph};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

/// `(name, shape, flat_values)`.
type RawTensor = (String, Vec<usize>, Vec<f32>);

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl ToString) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_rule(rule: &str) -> PyResult<AggregationRule> {
    rule.parse().map_err(PyValueError::new_err)
}

fn parse_label(label: &str) -> PyResult<Label> {
    match label.to_ascii_uppercase().replace('-', "_").as_str() {
        "COVID" => Ok(Label::Covid),
        "NON_COVID" | "NONCOVID" => Ok(Label::NonCovid),
        other => Err(PyValueError::new_err(format!("unknown label `{other}`"))),
    }
}

/// The 224×224 classifier: frozen Xception base plus the dense head.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelGraph,
}

#[pymethods]
impl PyModel {
    /// Unweighted model; call `init_random` or `load` before inference.
    #[new]
    fn new() -> Self {
        PyModel {
            inner: freeze_base(build_modified_xception(HeadSpec::default())),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let entries = weights_io::load_ntc(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        let model = weights_io::bind_weights(build_modified_xception(HeadSpec::default()), &entries).map_err(value_err)?;
        Ok(PyModel {
            inner: freeze_base(model),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        weights_io::save_model(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn init_random(&mut self, seed: u64) {
        self.inner.init_random(seed);
    }

    /// Sets every base BN's moving statistics from up to `max_slices`
    /// slices of a labeled dataset directory.
    #[pyo3(signature = (data, max_slices = 16))]
    fn calibrate(&mut self, data: PathBuf, max_slices: usize) -> PyResult<()> {
        let manifest = ingest::scan_dataset(&data).map_err(value_err)?;
        let probe = ingest::probe_batch(&manifest.volumes, max_slices, self.inner.input_side()).map_err(value_err)?;
        self.inner.calibrate_base_bn(&probe).map_err(runtime_err)
    }

    fn summary(&self, py: Python<'_>) -> PyResult<PyObject> {
        let counts = count_params(&self.inner);
        let side = self.inner.input_side();
        let value = serde_json::json!({
            "total_params": counts.total,
            "trainable_params": counts.trainable,
            "base_params": self.inner.base_param_count(),
            "conv_layer_count": self.inner.conv_layer_count(),
            "base_output_shape": self.inner.base_output_shape(),
            "input_shape": [side, side, 3],
            "weights_loaded": self.inner.weights_loaded(),
        });
        to_py(py, &value)
    }

    fn name_manifest(&self) -> String {
        weights_io::name_manifest(&self.inner)
    }

    /// Per-volume diagnoses for a directory of volumes (labeled layout or
    /// one subdirectory per volume).
    #[pyo3(signature = (input, threshold = 0.5, rule = "majority", batch = 128))]
    fn predict(&self, py: Python<'_>, input: PathBuf, threshold: f32, rule: &str, batch: usize) -> PyResult<PyObject> {
        let policy = ThresholdPolicy::new(threshold).map_err(value_err)?;
        let rule = parse_rule(rule)?;
        let manifest = ingest::scan_for_prediction(&input).map_err(value_err)?;
        let scored = py
            .allow_threads(|| score_volumes(&self.inner, &manifest.volumes, batch))
            .map_err(runtime_err)?;
        let preds = scored
            .iter()
            .map(|v| diagnosis::diagnose_volume(&v.volume_id, &v.probabilities, &policy, rule))
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_err)?;
        to_py(py, &preds)
    }

    /// Threshold sweep over a labeled dataset; one report per threshold in
    /// the given order, each with volume- and slice-level metrics.
    #[pyo3(signature = (data, thresholds = vec![0.15, 0.5, 0.9], rule = "majority", z = 1.96, batch = 128))]
    fn evaluate(
        &self,
        py: Python<'_>,
        data: PathBuf,
        thresholds: Vec<f32>,
        rule: &str,
        z: f64,
        batch: usize,
    ) -> PyResult<PyObject> {
        let rule = parse_rule(rule)?;
        let manifest = ingest::scan_dataset(&data).map_err(value_err)?;
        let scored = py
            .allow_threads(|| score_volumes(&self.inner, &manifest.volumes, batch))
            .map_err(runtime_err)?;
        let reports = diagnosis::sweep_thresholds(&scored, &thresholds, rule, z).map_err(value_err)?;
        to_py(py, &reports)
    }

    /// Trains the head in place on a frozen base; returns the per-epoch
    /// history.
    #[pyo3(signature = (train, val, epochs = 13, batch = 128, lr = 0.001, patience = 2, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train_head(
        &mut self,
        py: Python<'_>,
        train: PathBuf,
        val: PathBuf,
        epochs: usize,
        batch: usize,
        lr: f64,
        patience: usize,
        seed: u64,
    ) -> PyResult<PyObject> {
        let config = TrainConfig {
            learning_rate: lr,
            batch_size: batch,
            epochs,
            plateau_patience: patience,
            seed,
            ..TrainConfig::default()
        };
        config.validate().map_err(value_err)?;
        let train = ingest::scan_dataset(&train).map_err(value_err)?;
        let val = ingest::scan_dataset(&val).map_err(value_err)?;
        let model = self.inner.clone();
        let (model, history) = py
            .allow_threads(|| trainer::train_head(model, &train, &val, &config))
            .map_err(runtime_err)?;
        self.inner = model;
        to_py(py, &history.epochs)
    }
}

/// Slice label for a Non-COVID probability: COVID iff `p <= threshold`.
#[pyfunction]
fn classify_slice(p: f32, threshold: f32) -> PyResult<&'static str> {
    let policy = ThresholdPolicy::new(threshold).map_err(value_err)?;
    Ok(diagnosis::classify_slice(p, &policy).map_err(value_err)?.as_str())
}

#[pyfunction]
#[pyo3(signature = (labels, rule = "majority"))]
fn aggregate(labels: Vec<String>, rule: &str) -> PyResult<&'static str> {
    let labels = labels.iter().map(|l| parse_label(l)).collect::<PyResult<Vec<_>>>()?;
    Ok(diagnosis::aggregate(&labels, parse_rule(rule)?).map_err(value_err)?.as_str())
}

#[pyfunction]
#[pyo3(signature = (volume_id, probabilities, threshold = 0.5, rule = "majority"))]
fn diagnose_volume(
    py: Python<'_>,
    volume_id: &str,
    probabilities: Vec<f32>,
    threshold: f32,
    rule: &str,
) -> PyResult<PyObject> {
    let policy = ThresholdPolicy::new(threshold).map_err(value_err)?;
    let v = diagnosis::diagnose_volume(volume_id, &probabilities, &policy, parse_rule(rule)?).map_err(value_err)?;
    to_py(py, &v)
}

#[pyfunction]
fn macro_f1_avgpr(avg_precision: f64, avg_recall: f64) -> f64 {
    metrics::macro_f1_avgpr(avg_precision, avg_recall)
}

#[pyfunction]
fn macro_f1_mean(f1_covid: f64, f1_noncovid: f64) -> f64 {
    metrics::macro_f1_mean(f1_covid, f1_noncovid)
}

#[pyfunction]
#[pyo3(signature = (score, n, z = 1.96))]
fn ci_radius(score: f64, n: u64, z: f64) -> PyResult<f64> {
    metrics::binomial_ci_radius(score, n, z).map_err(value_err)
}

/// `[(name, shape, flat_values)]` in file order.
#[pyfunction]
fn load_ntc(path: PathBuf) -> PyResult<Vec<RawTensor>> {
    let entries = weights_io::load_ntc(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(entries.into_iter().map(|e| (e.name, e.shape, e.data)).collect())
}

#[pyfunction]
fn save_ntc(path: PathBuf, entries: Vec<RawTensor>) -> PyResult<()> {
    let owned: Vec<NamedTensor> = entries
        .into_iter()
        .map(|(name, shape, data)| NamedTensor { name, shape, data })
        .collect();
    let refs: Vec<TensorRef> = owned.iter().map(TensorRef::from).collect();
    weights_io::save_ntc(&path, &refs).map_err(value_err)
}

#[pymodule]
fn ctdiag(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(classify_slice, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose_volume, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1_avgpr, m)?)?;
    m.add_function(wrap_pyfunction!(macro_f1_mean, m)?)?;
    m.add_function(wrap_pyfunction!(ci_radius, m)?)?;
    m.add_function(wrap_pyfunction!(load_ntc, m)?)?;
    m.add_function(wrap_pyfunction!(save_ntc, m)?)?;
    Ok(())
}
