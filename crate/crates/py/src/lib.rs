//! Python bindings. Matrices cross the boundary as lists of rows.

use lowrank_rl::algorithms::{self, AnchorSource, EstimationMode, NSchedule, RecursionKind, RunConfig};
use lowrank_rl::estimation::{anchor_complete, AnchorPlan};
use lowrank_rl::generators::{self, GapMdpParams, TuckerMode};
use lowrank_rl::harness::{self, csv_string};
use lowrank_rl::mdp::{self, GenerativeModel, Policy, QTable, TabularMdp};
use lowrank_rl::{spectral, Error};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::IndexOutOfRange(_) => PyIndexError::new_err(e.to_string()),
        Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: &Rows) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn q_rows(q: &QTable) -> Vec<Rows> {
    q.steps().iter().map(to_rows).collect()
}

fn policy_actions(p: &Policy) -> Option<Vec<Vec<usize>>> {
    match p {
        Policy::Deterministic { actions, .. } => Some(actions.clone()),
        Policy::Stochastic { .. } => None,
    }
}

fn parse_mode(mode: &str) -> PyResult<EstimationMode> {
    match mode {
        "sampled" => Ok(EstimationMode::Sampled),
        "exact" | "exact_expectation" => Ok(EstimationMode::ExactExpectation),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    }
}

/// A finite-horizon tabular MDP.
#[pyclass(name = "Mdp", module = "pylowrank", frozen)]
struct PyMdp {
    inner: TabularMdp,
}

#[pymethods]
impl PyMdp {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        TabularMdp::from_json(text).map(|inner| PyMdp { inner }).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn mean_reward(&self, h: usize, s: usize, a: usize) -> PyResult<f64> {
        self.inner.check_index(h, s, a).map_err(py_err)?;
        Ok(self.inner.mean_reward(h, s, a))
    }

    fn transition(&self, h: usize, s: usize, a: usize) -> PyResult<Vec<f64>> {
        self.inner.check_index(h, s, a).map_err(py_err)?;
        Ok(self.inner.transition(h, s, a).to_vec())
    }

    /// `(Q*, V*, greedy actions)`, each indexed by step `h - 1`.
    fn solve(&self) -> (Vec<Rows>, Vec<Vec<f64>>, Vec<Vec<usize>>) {
        let opt = mdp::exact_backward_induction(&self.inner);
        let v = (1..=self.inner.horizon()).map(|h| opt.v.step(h).iter().copied().collect()).collect();
        (q_rows(&opt.q), v, policy_actions(&opt.policy).unwrap_or_default())
    }

    fn suboptimality_gap(&self) -> f64 {
        mdp::suboptimality_gap(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mdp(n_states={}, n_actions={}, horizon={})",
            self.inner.n_states(),
            self.inner.n_actions(),
            self.inner.horizon()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n_states, n_actions, horizon, d, seed, mode = "S_S_d"))]
fn gen_tucker_mdp(n_states: usize, n_actions: usize, horizon: usize, d: usize, seed: u64, mode: &str) -> PyResult<PyMdp> {
    let mode = match mode {
        "S_S_d" => TuckerMode::SSd,
        "S_d_A" => TuckerMode::SdA,
        other => return Err(PyValueError::new_err(format!("unknown Tucker mode {other:?}"))),
    };
    let (inner, _) = generators::gen_tucker_mdp(n_states, n_actions, horizon, d, mode, seed).map_err(py_err)?;
    Ok(PyMdp { inner })
}

#[pyfunction]
#[pyo3(signature = (n_states, n_actions, horizon, seed, min_gap = 0.2))]
fn gen_gap_mdp(n_states: usize, n_actions: usize, horizon: usize, seed: u64, min_gap: f64) -> PyResult<PyMdp> {
    let params = GapMdpParams {
        n_states,
        n_actions,
        horizon,
        min_gap,
        ..GapMdpParams::default()
    };
    let (inner, _) = generators::gen_gap_mdp(&params, seed).map_err(py_err)?;
    Ok(PyMdp { inner })
}

#[pyfunction]
fn gen_doubly_exp_mdp(horizon: usize) -> PyResult<PyMdp> {
    generators::gen_doubly_exp_mdp(horizon).map(|inner| PyMdp { inner }).map_err(py_err)
}

#[pyfunction]
fn gen_eps_rank_example(m: usize) -> PyResult<PyMdp> {
    generators::gen_eps_rank_example(m).map(|inner| PyMdp { inner }).map_err(py_err)
}

/// Spectral summary of `matrix` at target rank `d`.
#[pyfunction]
fn svd_report<'py>(py: Python<'py>, matrix: Rows, d: usize) -> PyResult<Bound<'py, PyDict>> {
    let r = spectral::svd_report(&to_matrix(&matrix)?, d).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("rank_numerical", r.rank_numerical)?;
    out.set_item("sigma_1", r.sigma_1)?;
    out.set_item("sigma_d", r.sigma_d)?;
    out.set_item("mu", r.mu)?;
    out.set_item("kappa", r.kappa)?;
    out.set_item("inf_norm", r.inf_norm)?;
    Ok(out)
}

/// Completes `matrix` from its anchor rows and columns only.
#[pyfunction]
fn anchor_completion(matrix: Rows, s_anchor: Vec<usize>, a_anchor: Vec<usize>, d: usize) -> PyResult<Rows> {
    let m = to_matrix(&matrix)?;
    let plan = AnchorPlan::new(m.nrows(), m.ncols(), s_anchor, a_anchor, 1.0, 1.0).map_err(py_err)?;
    let (rows, cols) = plan.blocks(&m);
    let c = anchor_complete(&rows, &cols, &plan, d).map_err(py_err)?;
    Ok(to_rows(&c.matrix))
}

#[allow(clippy::too_many_arguments)]
fn run_low_rank<'py>(
    py: Python<'py>,
    mdp: &PyMdp,
    d: usize,
    p: f64,
    n: u64,
    mode: &str,
    seed: u64,
    mcpi: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::new(d, AnchorSource::Sample { p1: p, p2: p }, NSchedule::Constant(n), parse_mode(mode)?, seed);
    let gm = GenerativeModel::new(&mdp.inner, seed).map_err(py_err)?;
    let run = py
        .detach(|| if mcpi { algorithms::lr_mcpi(&gm, &cfg) } else { algorithms::lr_evi(&gm, &cfg) })
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("q_bar", q_rows(&run.q_bar))?;
    out.set_item("policy", policy_actions(&run.policy))?;
    out.set_item("samples_used", run.samples_used)?;
    out.set_item("omega_sizes", run.per_step.iter().map(|r| r.omega_size).collect::<Vec<_>>())?;
    out.set_item("rank_deficient", run.any_rank_deficient())?;
    Ok(out)
}

/// Low-rank empirical value iteration with Bernoulli(`p`) anchors.
#[pyfunction]
#[pyo3(signature = (mdp, d, p, n, mode = "sampled", seed = 0))]
fn lr_evi<'py>(py: Python<'py>, mdp: &PyMdp, d: usize, p: f64, n: u64, mode: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    run_low_rank(py, mdp, d, p, n, mode, seed, false)
}

/// Low-rank Monte Carlo policy iteration with Bernoulli(`p`) anchors.
#[pyfunction]
#[pyo3(signature = (mdp, d, p, n, mode = "sampled", seed = 0))]
fn lr_mcpi<'py>(py: Python<'py>, mdp: &PyMdp, d: usize, p: f64, n: u64, mode: &str, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    run_low_rank(py, mdp, d, p, n, mode, seed, true)
}

/// `eps_h` for `h = H, H-1, ..., 1`.
#[pyfunction]
#[pyo3(signature = (horizon, eps_terminal, kind = "doubly_exp", alpha = 0.5))]
fn recursion(horizon: usize, eps_terminal: f64, kind: &str, alpha: f64) -> PyResult<Vec<f64>> {
    let kind = match kind {
        "doubly_exp" => RecursionKind::DoublyExp,
        "exponential" => RecursionKind::Exponential { alpha },
        other => return Err(PyValueError::new_err(format!("unknown recursion kind {other:?}"))),
    };
    Ok(algorithms::recursion_driver(kind, horizon, eps_terminal).map_err(py_err)?.eps)
}

/// Runs an experiment from its JSON config and returns the results CSV.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let resolved = harness::parse_config_str(config_json).map_err(py_err)?;
    let out = py.detach(|| harness::run_experiment(&resolved.spec)).map_err(py_err)?;
    csv_string(&out.rows).map_err(py_err)
}

#[pymodule]
fn pylowrank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMdp>()?;
    m.add_function(wrap_pyfunction!(gen_tucker_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(gen_gap_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(gen_doubly_exp_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(gen_eps_rank_example, m)?)?;
    m.add_function(wrap_pyfunction!(svd_report, m)?)?;
    m.add_function(wrap_pyfunction!(anchor_completion, m)?)?;
    m.add_function(wrap_pyfunction!(lr_evi, m)?)?;
    m.add_function(wrap_pyfunction!(lr_mcpi, m)?)?;
    m.add_function(wrap_pyfunction!(recursion, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("CSV_HEADER", harness::CSV_HEADER.join(","))?;
    Ok(())
}
