//! Python bindings for the flakelab core: test ids, rerun statistics,
//! JUnit parsing, verdict archives and root-cause classification.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use flakelab::classify::{self, Evidence};
use flakelab::stats::{self, RerunCount, RerunEstimate};
use flakelab::{OrderKind, RunFilter, Verdict};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_verdicts(verdicts: Vec<String>) -> PyResult<Vec<Verdict>> {
    verdicts.iter().map(|v| v.parse().map_err(value_err)).collect()
}

/// `(test_id, n_once, [n at each confidence])`.
type EstimateRow = (PyTestId, Option<u64>, Vec<Option<u64>>);

fn count_to_py(n: RerunCount) -> Option<u64> {
    n.get()
}

/// Canonical test identifier `suite::class::name[param]`.
#[pyclass(name = "TestId", frozen, eq, ord, hash, str, skip_from_py_object)]
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct PyTestId(flakelab::TestId);

impl std::fmt::Display for PyTestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[pymethods]
impl PyTestId {
    #[new]
    #[pyo3(signature = (suite_path, class_name, test_name, parametrization = ""))]
    fn new(suite_path: &str, class_name: &str, test_name: &str, parametrization: &str) -> PyResult<Self> {
        flakelab::TestId::new(suite_path, class_name, test_name, parametrization)
            .map(PyTestId)
            .map_err(value_err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        text.parse().map(PyTestId).map_err(value_err)
    }

    #[getter]
    fn suite_path(&self) -> &str {
        self.0.suite_path()
    }

    #[getter]
    fn class_name(&self) -> &str {
        self.0.class_name()
    }

    #[getter]
    fn test_name(&self) -> &str {
        self.0.test_name()
    }

    #[getter]
    fn parametrization(&self) -> &str {
        self.0.parametrization()
    }

    fn __repr__(&self) -> String {
        format!("TestId({:?})", self.0.to_string())
    }
}

/// Probabilities of PASS, FAIL/ERROR and SKIP in one execution.
#[pyclass(name = "RateTriple", frozen, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyRateTriple(stats::RateTriple);

#[pymethods]
impl PyRateTriple {
    #[new]
    #[pyo3(signature = (p_pass, p_fail_error, p_skip = 0.0))]
    fn new(p_pass: f64, p_fail_error: f64, p_skip: f64) -> PyResult<Self> {
        stats::RateTriple::new(p_pass, p_fail_error, p_skip)
            .map(PyRateTriple)
            .map_err(value_err)
    }

    /// Rates observed over a verdict sequence such as `["PASS", "FAIL"]`.
    #[staticmethod]
    fn from_verdicts(verdicts: Vec<String>) -> PyResult<Self> {
        let counts = flakelab::VerdictCounts::from_verdicts(parse_verdicts(verdicts)?);
        stats::rates(&counts).map(PyRateTriple).map_err(value_err)
    }

    #[getter]
    fn p_pass(&self) -> f64 {
        self.0.p_pass
    }

    #[getter]
    fn p_fail_error(&self) -> f64 {
        self.0.p_fail_error
    }

    #[getter]
    fn p_skip(&self) -> f64 {
        self.0.p_skip
    }

    fn can_unveil(&self) -> bool {
        self.0.can_unveil()
    }

    fn __repr__(&self) -> String {
        format!(
            "RateTriple(p_pass={}, p_fail_error={}, p_skip={})",
            self.0.p_pass, self.0.p_fail_error, self.0.p_skip
        )
    }
}

/// Probability that `n` reruns show both a pass and a failure.
#[pyfunction]
fn unveil_probability(rates: &PyRateTriple, n: u64) -> f64 {
    stats::unveil_probability(&rates.0, n)
}

/// Smallest rerun count whose unveil probability exceeds `p`, or None when
/// no count does.
#[pyfunction]
fn statistical_reruns(rates: &PyRateTriple, p: f64) -> PyResult<Option<u64>> {
    stats::statistical_reruns(&rates.0, p).map(count_to_py).map_err(value_err)
}

/// Smallest rerun count that sees at least one pass with probability above `p`.
#[pyfunction]
fn failure_confirmation_reruns(p_pass: f64, p: f64) -> PyResult<Option<u64>> {
    stats::failure_confirmation_reruns(p_pass, p).map(count_to_py).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (rates, n, trials = 100_000, seed = 0))]
fn monte_carlo_unveil(py: Python<'_>, rates: &PyRateTriple, n: u64, trials: u64, seed: u64) -> f64 {
    let r = rates.0;
    py.detach(|| stats::monte_carlo_unveil(&r, n, trials, seed))
}

/// 1-based position by which a sequence has shown both a pass and a failure.
#[pyfunction]
fn n_once(verdicts: Vec<String>) -> PyResult<Option<u64>> {
    Ok(stats::n_once(&parse_verdicts(verdicts)?))
}

/// `Victim`, `Brittle` or `Undetermined` for a sequence of isolated runs.
#[pyfunction]
fn classify_od_kind(verdicts: Vec<String>) -> PyResult<&'static str> {
    Ok(classify::classify_od_kind(&parse_verdicts(verdicts)?).as_str())
}

/// Parses a JUnit-XML report into `(test_id, verdict, duration_s)` tuples.
#[pyfunction]
fn parse_junit_report(xml: &[u8]) -> PyResult<Vec<(PyTestId, &'static str, f64)>> {
    let entries = flakelab::junit::parse_junit_report(xml).map_err(value_err)?;
    Ok(entries
        .into_iter()
        .map(|e| (PyTestId(e.test), e.verdict.as_str(), e.duration_s))
        .collect())
}

fn order_filter(order: Option<&str>) -> PyResult<RunFilter> {
    match order {
        None | Some("all") => Ok(RunFilter::all()),
        Some(o) => o.parse::<OrderKind>().map(RunFilter::order).map_err(value_err),
    }
}

/// Verdicts of a campaign, tests by runs.
#[pyclass(name = "VerdictMatrix", frozen)]
struct PyVerdictMatrix(flakelab::VerdictMatrix);

#[pymethods]
impl PyVerdictMatrix {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        flakelab::archive::load_archive(&path)
            .map(PyVerdictMatrix)
            .map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        flakelab::archive::save_archive(&self.0, &path).map_err(value_err)
    }

    fn tests(&self) -> Vec<PyTestId> {
        self.0.tests().iter().cloned().map(PyTestId).collect()
    }

    #[pyo3(signature = (order = None))]
    fn run_count(&self, order: Option<&str>) -> PyResult<usize> {
        Ok(self.0.run_count(order_filter(order)?))
    }

    /// Verdicts of one test in run order; `order` is `same`, `shuffled` or `all`.
    #[pyo3(signature = (test, order = None))]
    fn sequence(&self, test: &PyTestId, order: Option<&str>) -> PyResult<Vec<&'static str>> {
        let seq = self.0.sequence(&test.0, order_filter(order)?).map_err(value_err)?;
        Ok(seq.into_iter().map(Verdict::as_str).collect())
    }

    /// `(test_id, label, od_kind)` per test, without side evidence.
    fn classify(&self, py: Python<'_>) -> Vec<(PyTestId, &'static str, Option<&'static str>)> {
        let rows = py.detach(|| classify::classify_matrix(&self.0, &Evidence::default()));
        rows.into_iter()
            .map(|c| (PyTestId(c.test), c.label.name(), c.label.od_kind().map(|k| k.as_str())))
            .collect()
    }

    /// `(test_id, n_once, [n at each confidence])` for every test with at
    /// least one executed run.
    #[pyo3(signature = (confidences = vec![0.5, 0.95], order = None))]
    fn estimates(
        &self,
        confidences: Vec<f64>,
        order: Option<&str>,
    ) -> PyResult<Vec<EstimateRow>> {
        let filter = order_filter(order)?;
        let mut out = Vec::new();
        for test in self.0.tests() {
            let seq = self.0.sequence(test, filter).map_err(value_err)?;
            match RerunEstimate::from_sequence(test.clone(), &seq, &confidences) {
                Ok(e) => out.push((
                    PyTestId(e.test),
                    e.n_once,
                    e.n_at.into_iter().map(|(_, n)| n.get()).collect(),
                )),
                Err(stats::StatsError::ZeroExecutions) => {}
                Err(e) => return Err(value_err(e)),
            }
        }
        Ok(out)
    }

    fn __len__(&self) -> usize {
        self.0.tests().len()
    }
}

#[pymodule]
#[pyo3(name = "flakelab")]
fn flakelab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTestId>()?;
    m.add_class::<PyRateTriple>()?;
    m.add_class::<PyVerdictMatrix>()?;
    m.add_function(wrap_pyfunction!(unveil_probability, m)?)?;
    m.add_function(wrap_pyfunction!(statistical_reruns, m)?)?;
    m.add_function(wrap_pyfunction!(failure_confirmation_reruns, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo_unveil, m)?)?;
    m.add_function(wrap_pyfunction!(n_once, m)?)?;
    m.add_function(wrap_pyfunction!(classify_od_kind, m)?)?;
    m.add_function(wrap_pyfunction!(parse_junit_report, m)?)?;
    Ok(())
}
