//! Python bindings: problems, the SQP solver, certification, validation and
//! curvature estimation.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nlsls::benchmark::satellite_problem;
use nlsls::config::ProblemConfig;
use nlsls::curvature::{mu_monte_carlo, SampleDomain};
use nlsls::dynamics::{LinearizationPoint, SatelliteModel, SystemModel};
use nlsls::error::Error;
use nlsls::ocp::{certify, Mode, RobustProblem, SolutionCertificate, Tube};
use nlsls::sqp::{self, SqpOptions};
use nlsls::validation::{monte_carlo, Sampling, ValidationPlan};

create_exception!(nlsls_py, SolveError, PyRuntimeError, "The SQP solver did not return a certified solution.");

fn err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

/// A robust optimal control problem with its solver options.
#[pyclass(frozen)]
struct Problem {
    inner: RobustProblem,
    options: SqpOptions,
    config_hash: Option<String>,
}

#[pymethods]
impl Problem {
    /// Loads a TOML configuration file.
    #[staticmethod]
    fn from_toml(path: &str) -> PyResult<Self> {
        let cfg = ProblemConfig::load(path).map_err(err)?;
        Self::from_config(cfg)
    }

    #[staticmethod]
    fn from_toml_str(text: &str) -> PyResult<Self> {
        let cfg = ProblemConfig::from_toml_str(text).map_err(err)?;
        Self::from_config(cfg)
    }

    /// The satellite attitude benchmark.
    #[staticmethod]
    #[pyo3(signature = (mode = "closed_loop", horizon = 10))]
    fn satellite(mode: &str, horizon: usize) -> PyResult<Self> {
        let mode: Mode = mode.parse().map_err(err)?;
        Ok(Self { inner: satellite_problem(mode, horizon).map_err(err)?, options: SqpOptions::default(), config_hash: None })
    }

    /// Copy with a different mode and, optionally, horizon.
    #[pyo3(signature = (mode, horizon = None))]
    fn with_mode(&self, mode: &str, horizon: Option<usize>) -> PyResult<Self> {
        let mut inner = self.inner.with_mode(mode.parse().map_err(err)?);
        if let Some(t) = horizon {
            inner = inner.with_horizon(t);
        }
        Ok(Self { inner, options: self.options.clone(), config_hash: None })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn nx(&self) -> usize {
        self.inner.nx()
    }

    #[getter]
    fn nu(&self) -> usize {
        self.inner.nu()
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.inner.mu.mu.clone()
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.inner.x0.iter().copied().collect()
    }

    fn __repr__(&self) -> String {
        format!("Problem(model={}, mode={}, horizon={})", self.inner.model.name(), self.inner.mode, self.inner.horizon)
    }
}

impl Problem {
    fn from_config(cfg: ProblemConfig) -> PyResult<Self> {
        Ok(Self { inner: cfg.build().map_err(err)?, options: cfg.sqp.clone(), config_hash: Some(cfg.problem_hash()) })
    }
}

/// A certified solution: nominal trajectory, system responses and error bounds.
#[pyclass(frozen)]
struct Solution {
    inner: SolutionCertificate,
    #[pyo3(get)]
    seconds: f64,
}

#[pymethods]
impl Solution {
    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        vecs(&self.inner.z)
    }

    #[getter]
    fn v(&self) -> Vec<Vec<f64>> {
        vecs(&self.inner.v)
    }

    #[getter]
    fn tau(&self) -> Vec<f64> {
        self.inner.tau.clone()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    /// Feedback gain block `K^{i,j}` as nested lists.
    fn feedback_block(&self, i: usize, j: usize) -> PyResult<Vec<Vec<f64>>> {
        let k = &self.inner.feedback;
        if j > i || i >= k.horizon() {
            return Err(PyValueError::new_err(format!("no block ({i}, {j}) below the diagonal of a horizon-{} operator", k.horizon())));
        }
        Ok(rows(k.block(i, j)))
    }

    /// Interval half-widths of the reachable-set tube, one list per step.
    fn tube_half_widths(&self, problem: &Problem) -> PyResult<Vec<Vec<f64>>> {
        let tube = Tube::build(&self.inner, &problem.inner.effective_e(), &problem.inner.mu).map_err(err)?;
        Ok((0..=tube.horizon()).map(|k| tube.half_widths(k).iter().copied().collect()).collect())
    }

    /// Re-checks the certificate; returns the residuals and the verdict.
    #[pyo3(signature = (problem, tol = 1e-6))]
    fn certify<'py>(&self, py: Python<'py>, problem: &Problem, tol: f64) -> PyResult<Bound<'py, PyDict>> {
        let rep = certify(&self.inner, &problem.inner, tol).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("passed", rep.passed)?;
        d.set_item("failures", rep.failures)?;
        d.set_item("dynamics", rep.dynamics)?;
        d.set_item("slp", rep.slp)?;
        d.set_item("tightening", rep.tightening)?;
        d.set_item("tau_recursion", rep.tau_recursion)?;
        d.set_item("tau_sign", rep.tau_sign)?;
        d.set_item("structure", rep.structure)?;
        Ok(d)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: SolutionCertificate::from_json(text).map_err(err)?, seconds: 0.0 })
    }

    fn __repr__(&self) -> String {
        format!("Solution(mode={}, horizon={}, objective={:.6})", self.inner.mode, self.inner.horizon(), self.inner.objective)
    }
}

/// Runs the SQP solver. Options default to those of the problem.
#[pyfunction]
#[pyo3(signature = (problem, max_iters = None, conv_tol = None, gamma = None))]
fn solve(py: Python<'_>, problem: &Problem, max_iters: Option<usize>, conv_tol: Option<f64>, gamma: Option<f64>) -> PyResult<Solution> {
    let mut opts = problem.options.clone();
    if let Some(n) = max_iters {
        opts.max_iters = n;
    }
    if let Some(t) = conv_tol {
        opts.conv_tol = t;
    }
    if let Some(g) = gamma {
        opts.gamma = g;
    }
    match py.detach(|| sqp::solve(&problem.inner, &opts)) {
        Ok(s) => {
            let mut inner = s.certificate;
            inner.config_hash = problem.config_hash.clone();
            Ok(Solution { inner, seconds: s.seconds })
        }
        Err(f) => Err(SolveError::new_err((format!("{:?}", f.kind), f.to_string()))),
    }
}

/// Monte-Carlo rollouts of a solution; returns aggregate counts.
#[pyfunction]
#[pyo3(signature = (problem, solution, rollouts = 1000, sampling = "uniform", seed = 0, slack = 1e-8))]
fn validate<'py>(
    py: Python<'py>,
    problem: &Problem,
    solution: &Solution,
    rollouts: usize,
    sampling: &str,
    seed: u64,
    slack: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let sampling: Sampling = sampling.parse().map_err(err)?;
    let plan = ValidationPlan { batches: vec![(sampling, rollouts)], seed, slack };
    let (rep, _) = py.detach(|| monte_carlo(&problem.inner, &solution.inner, &plan)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("rollouts", rollouts)?;
    d.set_item("violations", rep.violations)?;
    d.set_item("tube_exits", rep.tube_exits)?;
    d.set_item("tau_breaches", rep.tau_breaches)?;
    d.set_item("worst_constraint", rep.worst_constraint)?;
    d.set_item("worst_tau_margin", rep.worst_tau_margin)?;
    d.set_item("clean", rep.is_clean())?;
    Ok(d)
}

/// Curvature diagonal of the satellite model by Monte-Carlo sampling.
#[pyfunction]
#[pyo3(signature = (samples = 10_000, seed = 0))]
fn mu_estimate(py: Python<'_>, samples: usize, seed: u64) -> PyResult<Vec<f64>> {
    py.detach(|| mu_monte_carlo(&SatelliteModel::default(), &SampleDomain::satellite(), samples, seed)).map(|b| b.mu).map_err(err)
}

/// One discrete step of the satellite model.
#[pyfunction]
fn satellite_step(x: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
    let m = SatelliteModel::default();
    Ok(m.eval_f(&DVector::from_vec(x), &DVector::from_vec(u)).map_err(err)?.iter().copied().collect())
}

/// Jacobians `(A, B)` of the discrete satellite step.
#[pyfunction]
fn satellite_jacobians(x: Vec<f64>, u: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let m = SatelliteModel::default();
    let (a, b) = m.jacobians(&LinearizationPoint::new(DVector::from_vec(x), DVector::from_vec(u))).map_err(err)?;
    Ok((rows(&a), rows(&b)))
}

#[pymodule]
pub fn nlsls_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Solution>()?;
    m.add("SolveError", m.py().get_type::<SolveError>())?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(mu_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(satellite_step, m)?)?;
    m.add_function(wrap_pyfunction!(satellite_jacobians, m)?)?;
    Ok(())
}
