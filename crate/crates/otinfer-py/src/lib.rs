//! Python bindings for the `otinfer` crate.
//!
//! The module mirrors the CLI's surface with in-memory data: samples are
//! lists of coordinate rows, every estimate comes back as a plain dict, and
//! confidence intervals carry the same fields the JSON reports use.
//!
//! ```python
//! import otinfer_py as ot
//! out = ot.solve([[0.0], [1.0]], [[0.0], [2.0]], epsilon=1.0)
//! ci = ot.cost_ci([[0.0], [1.0]], [[0.0], [2.0]], level=0.95)
//! ```

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use otinfer::inference::{
    ci, coloc_curve, default_schedule, divergence_ci as div_ci, map_ci as map_ci_impl, var_cond,
    var_cost, var_plan, ConfidenceInterval, EtaSpec, SampleSizes, VarianceEstimate,
};
use otinfer::measures::{build_cost, parse_cost_name, CostContext, DiscreteMeasure};
use otinfer::montecarlo::{run_coverage, NMode, SimConfig};
use otinfer::operators::{NeumannMode, OperatorContext};
use otinfer::sinkhorn::{
    conditional_density_row, entropic_cost, plan_density, plan_expectation, sinkhorn_cost,
    sinkhorn_divergence, solve as solve_dual, PlanDensity, PotentialPair, DEFAULT_MAX_ITER,
};
use otinfer::OtError;

fn err(e: OtError) -> PyErr {
    match e {
        OtError::NotConverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn measure(points: Vec<Vec<f64>>, weights: Option<Vec<f64>>) -> PyResult<DiscreteMeasure> {
    if points.is_empty() {
        return Err(PyValueError::new_err("sample must contain at least one row"));
    }
    let dim = points[0].len();
    if points.iter().any(|row| row.len() != dim) {
        return Err(PyValueError::new_err("sample rows have mixed dimensions"));
    }
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let arr = Array2::from_shape_vec((points.len(), dim), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    match weights {
        Some(w) => DiscreteMeasure::new(arr, Array1::from_vec(w)).map_err(err),
        None => DiscreteMeasure::uniform(arr).map_err(err),
    }
}

struct Problem {
    p: DiscreteMeasure,
    q: DiscreteMeasure,
    ctx: CostContext,
    sizes: SampleSizes,
    tol: f64,
}

#[allow(clippy::too_many_arguments)]
fn problem(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
) -> PyResult<Problem> {
    let p = measure(x, weights_x)?;
    let q = measure(y, weights_y)?;
    let spec = parse_cost_name(cost).map_err(err)?;
    let ctx = build_cost(spec, &p, &q, epsilon).map_err(err)?;
    let sizes = SampleSizes::new(p.len(), q.len()).map_err(err)?;
    Ok(Problem { p, q, ctx, sizes, tol })
}

struct Solved {
    pot: PotentialPair,
    plan: PlanDensity,
    op: OperatorContext,
}

fn solve_problem(pb: &Problem) -> PyResult<Solved> {
    let (pot, report) = solve_dual(&pb.p, &pb.q, &pb.ctx, pb.tol, DEFAULT_MAX_ITER).map_err(err)?;
    if !report.converged {
        return Err(PyRuntimeError::new_err(format!(
            "solver did not converge: residual {:.3e} after {} iterations",
            report.final_residual, report.iterations
        )));
    }
    let plan = plan_density(&pot, &pb.ctx, &pb.p, &pb.q, pb.tol).map_err(err)?;
    let op = OperatorContext::new(&plan, &pb.p, &pb.q, &pb.ctx);
    Ok(Solved { pot, plan, op })
}

/// Accepts "cost", "indicator:<t>", "coord:<k>", or an explicit table
/// (list of rows over the product of supports).
fn eta_spec(obj: &Bound<'_, PyAny>) -> PyResult<EtaSpec> {
    if let Ok(name) = obj.extract::<String>() {
        if name == "cost" {
            return Ok(EtaSpec::Cost);
        }
        if let Some(t) = name.strip_prefix("indicator:") {
            let t: f64 = t
                .parse()
                .map_err(|_| PyValueError::new_err(format!("bad indicator threshold {t:?}")))?;
            return Ok(EtaSpec::Indicator(t));
        }
        if let Some(k) = name.strip_prefix("coord:") {
            let k: usize = k
                .parse()
                .map_err(|_| PyValueError::new_err(format!("bad coordinate index {k:?}")))?;
            return Ok(EtaSpec::Coord(k));
        }
        return Err(PyValueError::new_err(format!(
            "unknown eta {name:?}: expected \"cost\", \"indicator:<t>\", \"coord:<k>\", or a table"
        )));
    }
    let rows = obj.extract::<Vec<Vec<f64>>>().map_err(|_| {
        PyValueError::new_err("eta must be a recognized name or a rectangular table of floats")
    })?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("eta table must be rectangular and nonempty"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let table = Array2::from_shape_vec((rows.len(), rows[0].len()), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(EtaSpec::Table(table))
}

/// Accepts None or "direct" (exact resolvent), "auto" (sample-size
/// schedule), or an integer number of Neumann terms.
fn neumann_mode(obj: Option<&Bound<'_, PyAny>>, sizes: SampleSizes) -> PyResult<NeumannMode> {
    let Some(obj) = obj else {
        return Ok(NeumannMode::Direct);
    };
    if let Ok(name) = obj.extract::<String>() {
        return match name.as_str() {
            "direct" => Ok(NeumannMode::Direct),
            "auto" => Ok(NMode::Auto.resolve(sizes)),
            other => Err(PyValueError::new_err(format!(
                "unknown truncation mode {other:?}: expected \"direct\", \"auto\", or an integer"
            ))),
        };
    }
    if let Ok(terms) = obj.extract::<usize>() {
        return Ok(NeumannMode::Terms(terms));
    }
    Err(PyValueError::new_err(
        "truncation mode must be \"direct\", \"auto\", or an integer",
    ))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn interval_dict<'py>(py: Python<'py>, iv: &ConfidenceInterval) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("estimate", iv.estimate)?;
    d.set_item("lower", iv.lower)?;
    d.set_item("upper", iv.upper)?;
    d.set_item("level", iv.level)?;
    d.set_item("std_error", iv.std_error)?;
    d.set_item("degenerate", iv.degenerate)?;
    Ok(d)
}

fn variance_dict<'py>(py: Python<'py>, var: &VarianceEstimate) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("value", var.value)?;
    d.set_item("lambda_hat", var.lambda_hat)?;
    d.set_item("scale", var.scale)?;
    d.set_item("method", var.method.to_string())?;
    d.set_item("n_used", var.n_used.to_string())?;
    Ok(d)
}

fn scalar_payload<'py>(
    py: Python<'py>,
    estimate: f64,
    var: &VarianceEstimate,
    iv: &ConfidenceInterval,
) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("estimate", estimate)?;
    d.set_item("variance", variance_dict(py, var)?)?;
    d.set_item("ci", interval_dict(py, iv)?)?;
    Ok(d)
}

/// Solve the entropic transport problem and return potentials, the coupling,
/// both cost functionals, and the solver diagnostics.
#[pyfunction]
#[pyo3(signature = (x, y, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let (pot, report) = solve_dual(&pb.p, &pb.q, &pb.ctx, pb.tol, DEFAULT_MAX_ITER).map_err(err)?;
    let plan = plan_density(&pot, &pb.ctx, &pb.p, &pb.q, pb.tol.max(1e-2)).map_err(err)?;
    let coupling = Array2::from_shape_fn((pb.p.len(), pb.q.len()), |(i, j)| {
        pb.p.weights()[i] * pb.q.weights()[j] * plan.xi()[(i, j)]
    });
    let d = PyDict::new(py);
    d.set_item("entropic_cost", entropic_cost(&pot, &pb.p, &pb.q, &pb.ctx))?;
    d.set_item("sinkhorn_cost", sinkhorn_cost(&plan, &pb.ctx, &pb.p, &pb.q))?;
    d.set_item("f", pot.f().to_vec())?;
    d.set_item("g", pot.g().to_vec())?;
    d.set_item("plan", rows(&coupling))?;
    d.set_item("converged", report.converged)?;
    d.set_item("iterations", report.iterations)?;
    d.set_item("final_residual", report.final_residual)?;
    d.set_item("duality_gap", report.duality_gap)?;
    d.set_item("marginal_residual", plan.marginal_residual())?;
    Ok(d)
}

/// Sinkhorn divergence S(P,Q) − ½·S(P,P) − ½·S(Q,Q).
#[pyfunction]
#[pyo3(signature = (x, y, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9))]
#[allow(clippy::too_many_arguments)]
fn divergence(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
) -> PyResult<f64> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    sinkhorn_divergence(&pb.p, &pb.q, pb.ctx.spec(), epsilon, tol).map_err(err)
}

/// Confidence interval for the entropic cost.
#[pyfunction]
#[pyo3(signature = (x, y, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9, level=0.95))]
#[allow(clippy::too_many_arguments)]
fn cost_ci<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
    level: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let solved = solve_problem(&pb)?;
    let estimate = entropic_cost(&solved.pot, &pb.p, &pb.q, &pb.ctx);
    let variance = var_cost(&solved.pot, &pb.p, &pb.q, &pb.ctx, pb.sizes);
    let interval = ci(estimate, &variance, level).map_err(err)?;
    scalar_payload(py, estimate, &variance, &interval)
}

/// Confidence interval for the plan expectation ∫η dπ.
#[pyfunction]
#[pyo3(signature = (x, y, eta, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9, level=0.95, n_terms=None))]
#[allow(clippy::too_many_arguments)]
fn plan_ci<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    eta: &Bound<'py, PyAny>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
    level: f64,
    n_terms: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let eta = eta_spec(eta)?;
    let mode = neumann_mode(n_terms, pb.sizes)?;
    let solved = solve_problem(&pb)?;
    let table = eta.table(&pb.ctx, &pb.q).map_err(err)?;
    let estimate = plan_expectation(&solved.plan, &pb.p, &pb.q, &table).map_err(err)?;
    let variance = var_plan(&solved.op, &table, pb.sizes, mode).map_err(err)?;
    let interval = ci(estimate, &variance, level).map_err(err)?;
    scalar_payload(py, estimate, &variance, &interval)
}

/// Confidence interval for the conditional expectation E[η(x₀,Y) | X=x₀].
#[pyfunction]
#[pyo3(signature = (x, y, x0, eta, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9, level=0.95, n_terms=None))]
#[allow(clippy::too_many_arguments)]
fn cond_ci<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    x0: Vec<f64>,
    eta: &Bound<'py, PyAny>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
    level: f64,
    n_terms: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let eta = eta_spec(eta)?;
    let mode = neumann_mode(n_terms, pb.sizes)?;
    let solved = solve_problem(&pb)?;
    let row = eta.row_at(&x0, &pb.ctx, &pb.p, &pb.q).map_err(err)?;
    let xi_row = conditional_density_row(&solved.pot, &x0, &pb.q, &pb.ctx).map_err(err)?;
    let estimate: f64 = (0..pb.q.len())
        .map(|j| pb.q.weights()[j] * xi_row[j] * row[j])
        .sum();
    let variance = var_cond(
        &solved.op, &solved.pot, &x0, &row, &pb.q, &pb.ctx, pb.sizes, mode,
    )
    .map_err(err)?;
    let interval = ci(estimate, &variance, level).map_err(err)?;
    scalar_payload(py, estimate, &variance, &interval)
}

/// Entropic (barycentric) transport map at x₀ with per-coordinate intervals.
#[pyfunction]
#[pyo3(signature = (x, y, x0, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9, level=0.95, n_terms=None))]
#[allow(clippy::too_many_arguments)]
fn map_ci<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    x0: Vec<f64>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
    level: f64,
    n_terms: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let mode = neumann_mode(n_terms, pb.sizes)?;
    let solved = solve_problem(&pb)?;
    let report = map_ci_impl(
        &solved.op, &solved.pot, &x0, &pb.q, &pb.ctx, pb.sizes, level, mode,
    )
    .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("estimate", report.map.clone())?;
    d.set_item("covariance", rows(&report.covariance))?;
    let intervals: Vec<Bound<'py, PyDict>> = report
        .intervals
        .iter()
        .map(|iv| interval_dict(py, iv))
        .collect::<PyResult<_>>()?;
    d.set_item("ci", intervals)?;
    Ok(d)
}

/// Sinkhorn divergence with its confidence interval and the three
/// underlying entropic costs.
#[pyfunction]
#[pyo3(signature = (x, y, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9, level=0.95))]
#[allow(clippy::too_many_arguments)]
fn divergence_ci<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
    level: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let report = div_ci(&pb.p, &pb.q, pb.ctx.spec(), epsilon, tol, pb.sizes, level).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("divergence", report.divergence)?;
    d.set_item("s_pq", report.s_pq)?;
    d.set_item("s_pp", report.s_pp)?;
    d.set_item("s_qq", report.s_qq)?;
    d.set_item("variance", variance_dict(py, &report.variance)?)?;
    d.set_item("ci", interval_dict(py, &report.interval)?)?;
    Ok(d)
}

/// Colocalization curve t ↦ π({c ≤ t}) with pointwise intervals and a
/// simultaneous band over the threshold grid.
#[pyfunction]
#[pyo3(signature = (x, y, thresholds, *, weights_x=None, weights_y=None, cost="sq_euclidean", epsilon=1.0, tol=1e-9, level=0.95, n_terms=None))]
#[allow(clippy::too_many_arguments)]
fn coloc<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    thresholds: Vec<f64>,
    weights_x: Option<Vec<f64>>,
    weights_y: Option<Vec<f64>>,
    cost: &str,
    epsilon: f64,
    tol: f64,
    level: f64,
    n_terms: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyDict>> {
    let pb = problem(x, y, weights_x, weights_y, cost, epsilon, tol)?;
    let mode = neumann_mode(n_terms, pb.sizes)?;
    let solved = solve_problem(&pb)?;
    let result =
        coloc_curve(&solved.op, &pb.ctx, &thresholds, pb.sizes, level, mode).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("thresholds", result.thresholds.clone())?;
    d.set_item("values", result.values.clone())?;
    d.set_item("covariance", rows(&result.covariance))?;
    d.set_item("band", result.band.clone())?;
    let pointwise: Vec<Bound<'py, PyDict>> = result
        .pointwise
        .iter()
        .map(|iv| interval_dict(py, iv))
        .collect::<PyResult<_>>()?;
    d.set_item("pointwise", pointwise)?;
    Ok(d)
}

/// Run a seeded coverage study described by a JSON config; returns the
/// report as a JSON string. Identical configs give identical bytes.
#[pyfunction]
fn simulate(config_json: &str) -> PyResult<String> {
    let cfg = SimConfig::from_json(config_json).map_err(err)?;
    let report = run_coverage(&cfg).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Number of Neumann terms the sample-size schedule picks for (n, m).
#[pyfunction]
fn default_truncation(n: usize, m: usize) -> PyResult<usize> {
    Ok(default_schedule(SampleSizes::new(n, m).map_err(err)?))
}

#[pymodule]
fn otinfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(divergence, m)?)?;
    m.add_function(wrap_pyfunction!(cost_ci, m)?)?;
    m.add_function(wrap_pyfunction!(plan_ci, m)?)?;
    m.add_function(wrap_pyfunction!(cond_ci, m)?)?;
    m.add_function(wrap_pyfunction!(map_ci, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_ci, m)?)?;
    m.add_function(wrap_pyfunction!(coloc, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(default_truncation, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
