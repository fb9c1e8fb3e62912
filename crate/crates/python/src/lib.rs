//! Python bindings: graph learning, synthetic data, checkpoints and metrics.

use chrono::{Duration, TimeZone, Utc};
use gsaf_core::autodiff::Tensor;
use gsaf_core::data::{synth_planted_graph, synth_toy_pattern, GraphSignalSeries, PlantedSpec};
use gsaf_core::graph::{learn_graph as learn, DEFAULT_THRESHOLD};
use gsaf_core::model::ModelState;
use gsaf_core::training;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

type Matrix = Vec<Vec<f64>>;
type Edge = (usize, usize, f64);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(value_err)
}

fn rows(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|r| t.row_values(r).to_vec()).collect()
}

/// Fits a sparse GMRF to `values` (one row per instant) and returns the
/// thresholded edges `(i, j, rho)`.
#[pyfunction]
#[pyo3(signature = (values, lam=None, threshold=DEFAULT_THRESHOLD))]
fn learn_graph(values: Matrix, lam: Option<f64>, threshold: f64) -> PyResult<Vec<Edge>> {
    let values = tensor(&values)?;
    let aux = Tensor::zeros(values.rows(), 0);
    let start = Utc.with_ymd_and_hms(2000, 1, 1, 0, 0, 0).unwrap();
    let series = GraphSignalSeries::from_values(start, Duration::hours(1), values, aux).map_err(value_err)?;
    let graph = learn(&series, lam, threshold).map_err(value_err)?;
    Ok(graph.edges)
}

/// Planted-graph series: `(values, aux, edges)`.
#[pyfunction]
#[pyo3(signature = (n_nodes=6, t_total=2000, edge_density=0.3, periods=vec![24], noise=0.5, seed=0))]
fn synth_planted(
    n_nodes: usize,
    t_total: usize,
    edge_density: f64,
    periods: Vec<usize>,
    noise: f64,
    seed: u64,
) -> PyResult<(Matrix, Matrix, Vec<Edge>)> {
    let spec = PlantedSpec::new(n_nodes, t_total, edge_density, periods, noise, seed);
    let (series, graph) = synth_planted_graph(&spec).map_err(value_err)?;
    Ok((rows(&series.values), rows(&series.aux), graph.edges))
}

/// Toy motif series: `(values, match_positions, current)`.
#[pyfunction]
#[pyo3(signature = (n_repeats=3, noise=0.0, seed=0))]
fn synth_toy(n_repeats: usize, noise: f64, seed: u64) -> PyResult<(Vec<f64>, Vec<usize>, usize)> {
    let toy = synth_toy_pattern(n_repeats, noise, seed).map_err(value_err)?;
    Ok((toy.series.values.column_values(0), toy.match_positions, toy.current))
}

#[pyfunction]
fn rmse(pred: Matrix, actual: Matrix) -> PyResult<f64> {
    training::rmse(&tensor(&pred)?, &tensor(&actual)?).map_err(value_err)
}

/// MAPE as a fraction over actuals at or above `threshold`; `None` when none qualify.
#[pyfunction]
#[pyo3(signature = (pred, actual, threshold=0.0))]
fn mape(pred: Matrix, actual: Matrix, threshold: f64) -> PyResult<Option<f64>> {
    training::mape(&tensor(&pred)?, &tensor(&actual)?, threshold).map_err(value_err)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    gsaf_core::cli::run(std::iter::once("gsaf".to_string()).chain(args))
}

/// A trained checkpoint.
#[pyclass(frozen)]
struct Model {
    state: ModelState,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        let state = ModelState::from_bytes(&bytes).map_err(|e| value_err(format!("{path}: {e}")))?;
        Ok(Model { state })
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.state.config.n_nodes
    }

    #[getter]
    fn history(&self) -> usize {
        self.state.template.history_len()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.state.config.horizon
    }

    #[getter]
    fn aux_dim(&self) -> usize {
        self.state.config.aux_dim
    }

    #[getter]
    fn edges(&self) -> Vec<Edge> {
        self.state.graph.edges.clone()
    }

    fn config_json(&self) -> String {
        serde_json::to_string(&self.state.config).expect("config serializes")
    }

    fn config_hash(&self) -> String {
        gsaf_core::cli::config_hash(&self.state)
    }

    /// Forecast from `history` (`N` rows of `T` values in template order) and
    /// `aux` (`A` rows covering the history and the forecast steps).
    /// Returns `steps` rows of `N` predictions.
    #[pyo3(signature = (history, aux=None, steps=None))]
    fn forecast(&self, py: Python<'_>, history: Matrix, aux: Option<Matrix>, steps: Option<usize>) -> PyResult<Matrix> {
        let steps = steps.unwrap_or(self.state.config.horizon);
        let history = tensor(&history)?;
        let aux = aux.map(|a| tensor(&a)).transpose()?;
        let report = py
            .detach(|| self.state.forecast(&history, aux.as_ref(), steps, None))
            .map_err(value_err)?;
        Ok(rows(&report.predictions))
    }
}

#[pymodule]
fn gsaf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(learn_graph, m)?)?;
    m.add_function(wrap_pyfunction!(synth_planted, m)?)?;
    m.add_function(wrap_pyfunction!(synth_toy, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(mape, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    m.add("DEFAULT_THRESHOLD", DEFAULT_THRESHOLD)?;
    Ok(())
}
