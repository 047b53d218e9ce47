//! Python bindings for trajid-core.
//!
//! Sequences cross the boundary as lists of floats; structured results
//! (configs, model files, fit summaries) as TOML or JSON text.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use trajid_core::config::ExperimentConfig;
use trajid_core::dynamics::{self, JointState, PlantParams, StepConfig};
use trajid_core::evaluation::{self, EvalResult, ModelFamily};
use trajid_core::identification::{make_segments, Objective, Parameterization, Segment};
use trajid_core::{ActuatorModel, Error, ModelFile};

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for trajid_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Experiment configuration. `Config()` is the default; `Config.from_toml`
/// parses a file's text with unknown keys rejected.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        PyConfig { inner: ExperimentConfig::default() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::from_toml(text).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: ExperimentConfig::load(&path).py()? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().py()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={})", self.inner.seed)
    }
}

/// A logged run: time base, commands and measured states.
#[pyclass(name = "Trajectory")]
#[derive(Clone)]
struct PyTrajectory {
    inner: trajid_core::Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrajectory { inner: trajid_core::Trajectory::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn t(&self) -> Vec<f64> {
        (0..self.inner.len()).map(|i| self.inner.time(i)).collect()
    }

    #[getter]
    fn q_des(&self) -> Vec<f64> {
        self.inner.q_des.clone()
    }

    #[getter]
    fn q(&self) -> Vec<f64> {
        self.inner.q.clone()
    }

    #[getter]
    fn qdot(&self) -> Vec<f64> {
        self.inner.qdot.clone()
    }

    /// Noiseless angle, when the log was synthesized.
    #[getter]
    fn q_true(&self) -> Option<Vec<f64>> {
        self.inner.truth.as_ref().map(|t| t.iter().map(|s| s.q).collect())
    }
}

/// Training log, held-out log and optional stand sweep.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: evaluation::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn generate(config: &PyConfig) -> PyResult<Self> {
        Ok(PyDataset { inner: evaluation::Dataset::generate(&config.inner).py()? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: evaluation::Dataset::load(&dir).py()? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(|e| py_err(e.into()))?;
        self.inner.save(&dir).py()
    }

    #[getter]
    fn train(&self) -> PyTrajectory {
        PyTrajectory { inner: self.inner.train.clone() }
    }

    #[getter]
    fn test(&self) -> PyTrajectory {
        PyTrajectory { inner: self.inner.test.clone() }
    }

    #[getter]
    fn has_stand(&self) -> bool {
        self.inner.stand.is_some()
    }
}

/// An actuator model together with any fitted joint terms.
#[pyclass(name = "Model")]
#[derive(Clone)]
struct PyModel {
    inner: ModelFile,
}

#[pymethods]
impl PyModel {
    /// Position PD with reflected armature.
    #[staticmethod]
    fn pd(kp: f64, kv: f64, armature: f64) -> Self {
        PyModel { inner: ModelFile::new(ActuatorModel::pd(kp, kv, armature), Default::default(), None) }
    }

    /// Freshly initialized 3-32-32-1 network with identity input scaling.
    #[staticmethod]
    fn mlp(seed: u64) -> Self {
        PyModel { inner: ModelFile::new(ActuatorModel::mlp(seed), Default::default(), None) }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel { inner: ModelFile::from_json(text).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: ModelFile::load(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.model.kind()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.model.params()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.model.param_names()
    }

    #[pyo3(signature = (q_des, q, qdot, step=0))]
    fn torque(&self, q_des: f64, q: f64, qdot: f64, step: usize) -> PyResult<f64> {
        self.inner.model.torque(step, q_des, q, qdot).py()
    }

    /// Open-loop rollout from `(q0, qdot0)`; returns the angle and velocity
    /// after each command.
    #[pyo3(signature = (q0, qdot0, commands, config=None))]
    fn rollout(&self, q0: f64, qdot0: f64, commands: Vec<f64>, config: Option<&PyConfig>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let plant = self.inner.plant.apply(&cfg.plant);
        let states = dynamics::rollout(JointState::new(q0, qdot0), &commands, &self.inner.model, &plant, &cfg.simulation).py()?;
        Ok(states.iter().map(|s| (s.q, s.qdot)).unzip())
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={:?}, params={})", self.inner.model.kind(), self.inner.model.param_count())
    }
}

/// A fitted model with its training summary.
#[pyclass(name = "Fit")]
struct PyFit {
    #[pyo3(get)]
    family: String,
    #[pyo3(get)]
    model: PyModel,
    #[pyo3(get)]
    best_loss: f64,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    epochs_run: usize,
    #[pyo3(get)]
    termination: String,
    #[pyo3(get)]
    fit_seconds: f64,
    /// Full-set loss per epoch where it was evaluated (NaN elsewhere).
    #[pyo3(get)]
    loss_trace: Vec<f64>,
}

/// Fits one model family: `trajid-param`, `trajid-nn`, `torque-oracle`,
/// `bench-sup`, `param-es`, `nn-es` or `residual`.
#[pyfunction]
#[pyo3(signature = (family, config, dataset, workers=1))]
fn fit(family: &str, config: &PyConfig, dataset: &PyDataset, workers: usize) -> PyResult<PyFit> {
    let family: ModelFamily = family.parse().py()?;
    let mut req = evaluation::FitRequest::new(&config.inner);
    req.workers = workers.max(1);
    let f = evaluation::fit_family(family, &req, &dataset.inner).py()?;
    Ok(PyFit {
        family: family.name().into(),
        model: PyModel { inner: f.file },
        best_loss: f.report.best_loss,
        best_epoch: f.report.best_epoch,
        epochs_run: f.report.epochs.len(),
        termination: format!("{:?}", f.report.termination),
        fit_seconds: f.fit_seconds,
        loss_trace: f.report.epochs.iter().map(|e| e.full_loss.unwrap_or(f64::NAN)).collect(),
    })
}

/// Held-out rollout score.
#[pyclass(name = "Evaluation")]
struct PyEvaluation {
    #[pyo3(get)]
    mae: f64,
    #[pyo3(get)]
    window_mae: Vec<f64>,
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    divergence_step: Option<usize>,
}

impl From<EvalResult> for PyEvaluation {
    fn from(r: EvalResult) -> Self {
        PyEvaluation { mae: r.mae, window_mae: r.window_mae, steps: r.steps, divergence_step: r.divergence_step }
    }
}

#[pymethods]
impl PyEvaluation {
    fn __repr__(&self) -> String {
        format!("Evaluation(mae={:.6e}, steps={})", self.mae, self.steps)
    }
}

/// One open-loop rollout over the held-out log, scored by angle MAE.
#[pyfunction]
fn evaluate(model: &PyModel, config: &PyConfig, dataset: &PyDataset) -> PyResult<PyEvaluation> {
    let c = &config.inner;
    Ok(evaluation::eval_mae(&model.inner, &dataset.inner.test, &c.plant, &c.simulation, &c.evaluation).py()?.into())
}

/// The hidden reference actuator scored the same way.
#[pyfunction]
fn evaluate_hidden(config: &PyConfig, dataset: &PyDataset) -> PyResult<PyEvaluation> {
    let c = &config.inner;
    let hidden = c.hidden_spec().py()?;
    Ok(evaluation::eval_hidden(&hidden, &dataset.inner.test, &c.plant, &c.simulation, &c.evaluation).py()?.into())
}

/// Segmented batch loss of `model` over every `horizon`-step window of
/// `trajectory`, and its gradient with respect to the model parameters.
#[pyfunction]
#[pyo3(signature = (model, config, trajectory, horizon=3))]
fn loss_and_gradient(model: &PyModel, config: &PyConfig, trajectory: &PyTrajectory, horizon: usize) -> PyResult<(f64, Vec<f64>)> {
    let c = &config.inner;
    let param = Parameterization::new(model.inner.model.clone());
    let plant = model.inner.plant.apply(&c.plant);
    let segments = make_segments(&trajectory.inner, horizon).py()?;
    let refs: Vec<&Segment> = segments.iter().collect();
    let objective = Objective::new(&param, &plant, c.weights, c.simulation, 1).py()?;
    let (loss, grad) = objective.loss_and_gradient(&param.initial(), &refs).py()?;
    Ok((loss, grad.0))
}

/// One integration step of the default rod; returns `(q, qdot)`.
#[pyfunction]
#[pyo3(signature = (q, qdot, torque, dt=0.002))]
fn step(q: f64, qdot: f64, torque: f64, dt: f64) -> (f64, f64) {
    let s = dynamics::step(JointState::new(q, qdot), torque, &PlantParams::default(), &StepConfig { dt });
    (s.q, s.qdot)
}

#[pymodule]
fn trajid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyEvaluation>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_hidden, m)?)?;
    m.add_function(wrap_pyfunction!(loss_and_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
