//! Python bindings: datasets, the fusion solver, the federated pipeline and
//! the simulation harness.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use latefuse::federation::{run_pipeline as core_run_pipeline, Method, PipelineConfig, PipelineOutput};
use latefuse::fusion::{prox_group as core_prox, solve_fusion as core_solve, FusionProblem};
use latefuse::moments::{BandwidthPolicy, QuadraticSurrogate};
use latefuse::sim::{generate_scenario as core_generate, run_experiment as core_run_experiment, write_experiment, ScenarioConfig};
use latefuse::{Error, ModelKind, TaskDataset};

create_exception!(latefuse_py, ConfigError, PyValueError);
create_exception!(latefuse_py, NumericalError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    if e.is_config() {
        ConfigError::new_err(e.to_string())
    } else {
        NumericalError::new_err(e.to_string())
    }
}

fn square(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(ConfigError::new_err(format!("expected a {d}×{d} matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// One task's sample: covariate rows, optional treatment, outcome.
#[pyclass(name = "TaskDataset", module = "latefuse_py", frozen)]
#[derive(Clone)]
struct PyTaskDataset {
    inner: TaskDataset,
}

#[pymethods]
impl PyTaskDataset {
    #[new]
    #[pyo3(signature = (x, y, t=None, task_id=0))]
    fn new(x: Vec<Vec<f64>>, y: Vec<f64>, t: Option<Vec<f64>>, task_id: usize) -> PyResult<Self> {
        Ok(Self { inner: TaskDataset::from_rows(task_id, &x, t, y).map_err(to_py)? })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn p(&self) -> usize {
        self.inner.p()
    }

    #[getter]
    fn task_id(&self) -> usize {
        self.inner.task_id()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y().iter().copied().collect()
    }

    #[getter]
    fn t(&self) -> Option<Vec<f64>> {
        self.inner.t().map(|t| t.iter().copied().collect())
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n()).map(|i| self.inner.row(i)).collect()
    }

    fn __repr__(&self) -> String {
        format!("TaskDataset(task_id={}, n={}, p={})", self.inner.task_id(), self.inner.n(), self.inner.p())
    }
}

/// Result of a federated run.
#[pyclass(name = "PipelineResult", module = "latefuse_py", frozen)]
struct PyPipelineResult {
    inner: PipelineOutput,
}

#[pymethods]
impl PyPipelineResult {
    /// Final estimates, one list per task.
    #[getter]
    fn estimates(&self) -> Vec<Vec<f64>> {
        self.inner.estimates.iter().map(|e| e.theta.clone()).collect()
    }

    /// Individual-task (fold-pooled) estimates.
    #[getter]
    fn initial(&self) -> Vec<Vec<f64>> {
        self.inner.initial.iter().map(|e| e.theta.clone()).collect()
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn center(&self) -> Vec<f64> {
        self.inner.solution.u0.clone()
    }

    #[getter]
    fn nuisance_fused(&self) -> bool {
        self.inner.nuisance_fused
    }

    /// `(grid, losses)` of the cross-validated λ search, if one ran.
    #[getter]
    fn lambda_path(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.lambda_selection.as_ref().map(|s| (s.grid.clone(), s.losses.clone()))
    }

    /// Audit log as JSON lines.
    fn audit_jsonl(&self) -> String {
        self.inner.audit.to_jsonl()
    }

    #[getter]
    fn audit_bytes(&self) -> usize {
        self.inner.audit.entries().iter().map(|e| e.bytes).sum()
    }
}

/// Prox of `lam‖v‖` under the metric `W`: argmin ½vᵀWv + cᵀv + lam‖v‖.
#[pyfunction]
fn prox_group(w: Vec<Vec<f64>>, c: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    let v = core_prox(&square(&w)?, &DVector::from_vec(c), lam).map_err(to_py)?;
    Ok(v.iter().copied().collect())
}

/// Solves the fusion problem for surrogates `(G_k, W_k)` with weights.
#[pyfunction]
#[pyo3(signature = (g, w, lam, weights=None))]
fn solve_fusion<'py>(
    py: Python<'py>,
    g: Vec<Vec<f64>>,
    w: Vec<Vec<Vec<f64>>>,
    lam: f64,
    weights: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    if g.len() != w.len() {
        return Err(ConfigError::new_err("g and w need one entry per task"));
    }
    let weights = weights.unwrap_or_else(|| vec![1.0; g.len()]);
    if weights.len() != g.len() {
        return Err(ConfigError::new_err("weights need one entry per task"));
    }
    let surrogates = g
        .into_iter()
        .zip(&w)
        .zip(&weights)
        .enumerate()
        .map(|(k, ((gk, wk), &a))| QuadraticSurrogate::new(k, DVector::from_vec(gk), square(wk)?, a).map_err(to_py))
        .collect::<PyResult<Vec<_>>>()?;
    let sol = core_solve(&FusionProblem { surrogates, lambda: lam }).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("u0", sol.u0)?;
    out.set_item("u", sol.u)?;
    out.set_item("objective", sol.objective)?;
    out.set_item("converged", sol.converged)?;
    out.set_item("fused", sol.active_set)?;
    out.set_item("iterations", sol.iterations)?;
    Ok(out)
}

/// Runs the simulated federation on one dataset per task.
#[pyfunction]
#[pyo3(signature = (datasets, model, method="mtl", folds=5, seed=0, lambda_grid=None, bandwidth=None))]
fn run_pipeline(
    py: Python<'_>,
    datasets: Vec<PyTaskDataset>,
    model: &str,
    method: &str,
    folds: usize,
    seed: u64,
    lambda_grid: Option<Vec<f64>>,
    bandwidth: Option<f64>,
) -> PyResult<PyPipelineResult> {
    let kind: ModelKind = model.parse().map_err(to_py)?;
    let method: Method = method.parse().map_err(to_py)?;
    let mut config = PipelineConfig::new(kind, method);
    config.folds = folds;
    config.seed = seed;
    config.lambda_grid = lambda_grid;
    if let Some(h) = bandwidth {
        config.bandwidth = BandwidthPolicy::Fixed(h);
    }
    let data: Vec<TaskDataset> = datasets.into_iter().map(|d| d.inner).collect();
    let inner = py.allow_threads(|| core_run_pipeline(&data, &config)).map_err(to_py)?;
    Ok(PyPipelineResult { inner })
}

fn scenario_config(scenario: u8, n: usize, eta: f64, seed: u64, tasks: usize, p: Option<usize>) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::new(scenario, n, eta);
    cfg.seed = seed;
    cfg.tasks = tasks;
    if let Some(p) = p {
        cfg.p = p;
    }
    cfg
}

/// Draws one repeat of a built-in scenario: `(datasets, true parameters)`.
#[pyfunction]
#[pyo3(signature = (scenario, n, eta, seed=0, repeat=0, tasks=5, p=None))]
fn generate_scenario(
    scenario: u8,
    n: usize,
    eta: f64,
    seed: u64,
    repeat: usize,
    tasks: usize,
    p: Option<usize>,
) -> PyResult<(Vec<PyTaskDataset>, Vec<Vec<f64>>)> {
    let scen = core_generate(&scenario_config(scenario, n, eta, seed, tasks, p), repeat).map_err(to_py)?;
    Ok((
        scen.datasets.into_iter().map(|inner| PyTaskDataset { inner }).collect(),
        scen.truths.into_iter().map(|t| t.theta).collect(),
    ))
}

/// Runs repeats × methods of a scenario and returns the summary rows; with
/// `out`, also writes the CSV/JSONL outputs there.
#[pyfunction]
#[pyo3(signature = (scenario, n, eta, repeats=1, seed=0, methods=vec!["itl".to_owned(), "mtl".to_owned(), "mtl-nuis".to_owned()], folds=5, tasks=5, p=None, out=None))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    scenario: u8,
    n: usize,
    eta: f64,
    repeats: usize,
    seed: u64,
    methods: Vec<String>,
    folds: usize,
    tasks: usize,
    p: Option<usize>,
    out: Option<std::path::PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = scenario_config(scenario, n, eta, seed, tasks, p);
    cfg.repeats = repeats;
    cfg.folds = folds;
    cfg.methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>().map_err(to_py)?;
    let result = py.allow_threads(|| core_run_experiment(&cfg)).map_err(to_py)?;
    if let Some(dir) = out {
        write_experiment(&result, dir).map_err(to_py)?;
    }
    result
        .summary
        .iter()
        .map(|row| {
            let d = PyDict::new(py);
            d.set_item("method", row.method.to_string())?;
            d.set_item("metric", &row.metric)?;
            d.set_item("mean", row.mean)?;
            d.set_item("se", row.se)?;
            d.set_item("repeats", row.repeats)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn latefuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskDataset>()?;
    m.add_class::<PyPipelineResult>()?;
    m.add_function(wrap_pyfunction!(prox_group, m)?)?;
    m.add_function(wrap_pyfunction!(solve_fusion, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
