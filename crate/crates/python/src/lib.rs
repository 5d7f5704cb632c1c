//! Python bindings: phantom volumes, partition distances, the region-gated
//! consistency loss, metrics, analysis helpers and a thin trainer handle.
//! Structured arguments (specs, configs) travel as JSON strings so the Python
//! side never has to mirror every Rust field.

use std::path::PathBuf;

use msseg::backbone::{NetworkConfig, NetworkParams, ProbabilityField};
use msseg::metrics::{confusion, Scores};
use msseg::partition::Histogram;
use msseg::tensor::Tensor;
use msseg::trainer::{self, PredictMode, TrainConfig, TrainerState};
use msseg::volume::{self, PhantomSpec};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: msseg::Error) -> PyErr {
    match e {
        msseg::Error::Io { .. } | msseg::Error::Missing(_) => PyIOError::new_err(e.to_string()),
        msseg::Error::NonFinite { .. } | msseg::Error::Checkpoint(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(s: Option<&str>) -> PyResult<T> {
    match s {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn mode(name: &str) -> PyResult<PredictMode> {
    match name {
        "main" => Ok(PredictMode::Main),
        "ensemble" => Ok(PredictMode::Ensemble),
        _ => Err(PyValueError::new_err(format!("unknown mode `{name}`"))),
    }
}

#[pyclass(name = "Volume", module = "msseg_py", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u16>> {
        self.inner.labels.clone()
    }

    #[getter]
    fn source_id(&self) -> &str {
        &self.inner.source_id
    }

    #[getter]
    fn sample_id(&self) -> &str {
        &self.inner.sample_id
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count
    }

    fn mean_intensity(&self) -> f64 {
        self.inner.mean_intensity()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        volume::save_volume(&self.inner, &path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVolume {
            inner: volume::load_volume(&path).map_err(to_py)?,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Volume({}, dims={:?}, labeled={})", self.inner.sample_id, self.inner.dims, self.inner.is_labeled())
    }
}

/// One phantom sample; `spec_json` holds any subset of the spec fields.
#[pyfunction]
#[pyo3(signature = (spec_json=None, index=0, labeled=true))]
fn generate_sample(spec_json: Option<&str>, index: usize, labeled: bool) -> PyResult<PyVolume> {
    let spec: PhantomSpec = from_json(spec_json)?;
    spec.validate().map_err(to_py)?;
    Ok(PyVolume {
        inner: volume::generate_sample(&spec, index, labeled).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (volume, bins=256, range=(-1000.0, 3000.0)))]
fn intensity_histogram(volume: &PyVolume, bins: usize, range: (f64, f64)) -> PyResult<Vec<f64>> {
    Ok(msseg::partition::intensity_histogram(&volume.inner, bins, range)
        .map_err(to_py)?
        .masses)
}

#[pyfunction]
fn wasserstein_1d(p: Vec<f64>, q: Vec<f64>, range: (f64, f64)) -> PyResult<f64> {
    let h = |masses| Histogram { range, masses };
    msseg::partition::wasserstein_1d(&h(p), &h(q)).map_err(to_py)
}

fn field(data: Vec<f64>, classes: usize, dims: [usize; 3]) -> PyResult<ProbabilityField> {
    if data.len() != classes * dims.iter().product::<usize>() {
        return Err(PyValueError::new_err(format!(
            "{} values do not fill {classes} x {dims:?}",
            data.len()
        )));
    }
    Ok(ProbabilityField(Tensor::from_vec(classes, dims, data)))
}

/// Region-gated consistency loss on flat class-major probability fields.
/// Returns `(loss, grad_wrt_student_probs, retained_fraction)`.
#[pyfunction]
#[pyo3(signature = (student, teacher, classes, dims, side=4, tau=0.9))]
fn swc_loss(
    student: Vec<f64>,
    teacher: Vec<f64>,
    classes: usize,
    dims: [usize; 3],
    side: usize,
    tau: f64,
) -> PyResult<(f64, Vec<f64>, f64)> {
    let ps = field(student, classes, dims)?;
    let pt = field(teacher, classes, dims)?;
    let out = msseg::swc::swc_loss(&ps, &pt, side, tau).map_err(to_py)?;
    Ok((out.loss, out.grad.data, out.grid.retained_fraction()))
}

/// `{"mIoU", "Dice", "Recall", "Acc"}` in percent, foreground-averaged.
#[pyfunction]
fn scores(py: Python<'_>, pred: Vec<u16>, gt: Vec<u16>, classes: usize) -> PyResult<Py<PyAny>> {
    let c = confusion(&pred, &gt, classes).map_err(to_py)?;
    let s = Scores::from_counts(&c, false);
    let d = pyo3::types::PyDict::new(py);
    d.set_item("mIoU", s.miou)?;
    d.set_item("Dice", s.dice)?;
    d.set_item("Recall", s.recall)?;
    d.set_item("Acc", s.accuracy)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn kde_curve(samples: Vec<f64>, bandwidth: f64, points: Vec<f64>) -> PyResult<Vec<f64>> {
    msseg::analysis::kde_curve(&samples, bandwidth, &points).map_err(to_py)
}

#[pyfunction]
fn source_separability(features: Vec<Vec<f64>>, sources: Vec<String>) -> PyResult<f64> {
    msseg::analysis::source_separability(&features, &sources).map_err(to_py)
}

#[pyfunction]
fn ema_update(teacher: Vec<f64>, student: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    if teacher.len() != student.len() {
        return Err(PyValueError::new_err("teacher and student lengths differ"));
    }
    let cfg = NetworkConfig::default();
    let wrap = |values| NetworkParams { config: cfg.clone(), values };
    Ok(trainer::ema_update(&wrap(teacher), &wrap(student), gamma)
        .map_err(to_py)?
        .values)
}

/// Student/teacher networks plus optimiser state.
#[pyclass(name = "Trainer", module = "msseg_py", unsendable)]
struct PyTrainer {
    inner: TrainerState,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (model_json=None, train_json=None, ablation="exp5"))]
    fn new(model_json: Option<&str>, train_json: Option<&str>, ablation: &str) -> PyResult<Self> {
        let net: NetworkConfig = from_json(model_json)?;
        let mut cfg: TrainConfig = from_json(train_json)?;
        cfg.ablation = trainer::AblationConfig::from_name(ablation).map_err(to_py)?;
        Ok(PyTrainer {
            inner: TrainerState::new(net, cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: trainer::load_checkpoint(&checkpoint).map_err(to_py)?,
        })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.students[0].len()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    /// One step; returns the logged losses as a JSON string.
    fn train_step(&mut self, main: Vec<PyVolume>, mixed: Vec<PyVolume>, other: Vec<PyVolume>) -> PyResult<String> {
        fn refs(v: &[PyVolume]) -> Vec<&volume::Volume> {
            v.iter().map(|p| &p.inner).collect()
        }
        let log = trainer::train_step(&mut self.inner, &refs(&main), &refs(&mixed), &refs(&other)).map_err(to_py)?;
        serde_json::to_string(&log).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[pyo3(signature = (volume, mode="main"))]
    fn predict(&self, volume: &PyVolume, mode: &str) -> PyResult<Vec<u16>> {
        trainer::predict(&self.inner, &volume.inner, self::mode(mode)?).map_err(to_py)
    }

    /// Class-major probability field of the chosen predictor.
    #[pyo3(signature = (volume, mode="main"))]
    fn probabilities(&self, volume: &PyVolume, mode: &str) -> PyResult<Vec<f64>> {
        Ok(trainer::predict_probs(&self.inner, &volume.inner, self::mode(mode)?)
            .map_err(to_py)?
            .0
            .data)
    }

    fn features(&self, volume: &PyVolume) -> PyResult<Vec<f64>> {
        trainer::main_student_features(&self.inner, &volume.inner).map_err(to_py)
    }

    fn save(&self, run_dir: PathBuf) -> PyResult<PathBuf> {
        trainer::save_checkpoint(&self.inner, &trainer::RunDir::new(run_dir)).map_err(to_py)
    }
}

/// Number of network parameters for a model config.
#[pyfunction]
#[pyo3(signature = (model_json=None))]
fn parameter_count(model_json: Option<&str>) -> PyResult<usize> {
    let cfg: NetworkConfig = from_json(model_json)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg.layout().len)
}

#[pymodule]
fn msseg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(intensity_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein_1d, m)?)?;
    m.add_function(wrap_pyfunction!(swc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(kde_curve, m)?)?;
    m.add_function(wrap_pyfunction!(source_separability, m)?)?;
    m.add_function(wrap_pyfunction!(ema_update, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_count, m)?)?;
    Ok(())
}
