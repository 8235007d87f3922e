use std::sync::Arc;

use backfrac::constants::DerivedConstants;
use backfrac::experiment::{
    fit_slopes, rate_checks, run_experiment, theoretical_rate as rate_of, ExperimentSpec,
};
use backfrac::forward::{self, Provenance};
use backfrac::inverse::{self, BackwardOperator};
use backfrac::mittag_leffler::{self as ml, MLOrder, DEFAULT_REL_TOL};
use backfrac::regularization::{solve_with_rule, ChoiceRule, DiscrepancyConfig, Method, RuleInputs};
use backfrac::spectral::{
    self, DecayProfile, DomainSpec, SourceSet, SpectralDomain, SpectralField, TimeSource,
};
use backfrac::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Parameter(_)
        | Error::Domain(_)
        | Error::Dimension { .. }
        | Error::Configuration(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrRaise<T> {
    fn or_raise(self) -> PyResult<T>;
}

impl<T> OrRaise<T> for backfrac::Result<T> {
    fn or_raise(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None().into_bound(py)),
        Value::Bool(b) => b.into_bound_py_any(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_bound_py_any(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_bound_py_any(py),
        },
        Value::String(s) => s.into_bound_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            Ok(list.into_any())
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            Ok(dict.into_any())
        }
    }
}

fn json_of<T: serde::Serialize>(value: &T) -> PyResult<serde_json::Value> {
    serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// E_{γ,β}(x) for x ≤ 0.
#[pyfunction]
#[pyo3(signature = (gamma, beta, x, rel_tol = DEFAULT_REL_TOL))]
fn ml_eval(gamma: f64, beta: f64, x: f64, rel_tol: f64) -> PyResult<f64> {
    ml::ml_eval(MLOrder::new(gamma, beta).or_raise()?, x, rel_tol).or_raise()
}

/// t^{α-1} E_{α,α}(-λt^α).
#[pyfunction]
fn ml_kernel(alpha: f64, lam: f64, t: f64) -> PyResult<f64> {
    ml::ml_kernel(alpha, lam, t).or_raise()
}

/// ∫_0^τ of the kernel, which never exceeds 1/λ.
#[pyfunction]
#[pyo3(signature = (alpha, lam, tau, rel_tol = DEFAULT_REL_TOL))]
fn ml_kernel_l1(alpha: f64, lam: f64, tau: f64, rel_tol: f64) -> PyResult<f64> {
    ml::ml_kernel_l1(alpha, lam, tau, rel_tol).or_raise()
}

/// E_{α,1}(-λt^α).
#[pyfunction]
fn relaxation(alpha: f64, lam: f64, t: f64) -> PyResult<f64> {
    ml::relaxation(alpha, lam, t).or_raise()
}

#[pyfunction]
#[pyo3(signature = (method, rule, p, nu = 0.5))]
fn theoretical_rate(method: &str, rule: &str, p: f64, nu: f64) -> PyResult<f64> {
    Ok(rate_of(
        method.parse().or_raise()?,
        rule.parse().or_raise()?,
        p,
        nu,
    ))
}

/// Dirichlet Laplacian on an axis-aligned box, truncated to the first
/// `n_modes` eigenpairs.
#[pyclass(frozen, module = "backfrac_py")]
struct Domain {
    inner: Arc<SpectralDomain>,
}

#[pymethods]
impl Domain {
    #[new]
    #[pyo3(signature = (dim = 1, side_lengths = None, n_modes = 256))]
    fn new(dim: usize, side_lengths: Option<Vec<f64>>, n_modes: usize) -> PyResult<Self> {
        let sides = side_lengths.unwrap_or_else(|| vec![std::f64::consts::PI; dim]);
        let inner = SpectralDomain::new(DomainSpec {
            dim,
            side_lengths: sides,
            n_modes,
        })
        .or_raise()?;
        Ok(Self {
            inner: Arc::new(inner),
        })
    }

    #[getter]
    fn n_modes(&self) -> usize {
        self.inner.n_modes()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues().to_vec()
    }

    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta()
    }

    #[getter]
    fn lambda1(&self) -> f64 {
        self.inner.lambda1()
    }

    fn hp_norm(&self, coeffs: Vec<f64>, p: f64) -> PyResult<f64> {
        SpectralField::new(coeffs)
            .and_then(|f| f.hp_norm(&self.inner, p))
            .or_raise()
    }

    /// Seeded member of {‖g‖_{H_p} ≤ ρ}, just inside its boundary.
    #[pyo3(signature = (p, rho = 1.0, seed = 0))]
    fn synthesize(&self, p: f64, rho: f64, seed: u64) -> PyResult<Vec<f64>> {
        let set = SourceSet::new(rho, p).or_raise()?;
        spectral::synthesize_source_member(&self.inner, set, DecayProfile::default(), seed)
            .map(SpectralField::into_coeffs)
            .or_raise()
    }

    fn __repr__(&self) -> String {
        format!(
            "Domain(dim={}, side_lengths={:?}, n_modes={})",
            self.inner.dim(),
            self.inner.side_lengths(),
            self.inner.n_modes()
        )
    }
}

fn source_of(domain: &SpectralDomain, f: Option<Vec<f64>>, tau: f64) -> PyResult<TimeSource> {
    match f {
        Some(v) => TimeSource::constant(v, tau).or_raise(),
        None => TimeSource::zero(domain.n_modes(), tau).or_raise(),
    }
}

/// Coefficients of u(t) for each requested time (t = τ when `times` is empty).
/// `f` gives time-constant source coefficients per mode.
#[pyfunction]
#[pyo3(signature = (domain, alpha, g, tau = 1.0, f = None, times = None))]
fn forward_solve(
    domain: &Domain,
    alpha: f64,
    g: Vec<f64>,
    tau: f64,
    f: Option<Vec<f64>>,
    times: Option<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let source = source_of(&domain.inner, f, tau)?;
    let g = SpectralField::new(g).or_raise()?;
    let sol = forward::forward_solve(domain.inner.clone(), alpha, g, source, tau).or_raise()?;
    let times = times.unwrap_or_else(|| vec![tau]);
    times
        .iter()
        .map(|&t| sol.at(t).map(SpectralField::into_coeffs).or_raise())
        .collect()
}

/// Υ = h − Ψ_f(τ).
#[pyfunction]
#[pyo3(signature = (domain, alpha, h, tau = 1.0, f = None))]
fn effective_data(
    domain: &Domain,
    alpha: f64,
    h: Vec<f64>,
    tau: f64,
    f: Option<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let source = source_of(&domain.inner, f, tau)?;
    let h = SpectralField::new(h).or_raise()?;
    forward::effective_data(&domain.inner, &h, &source, alpha, tau, Provenance::Clean)
        .map(|u| u.upsilon.into_coeffs())
        .or_raise()
}

/// Perturbs (h, f) within the combined budget δ; returns (h_noisy, f_noisy).
#[pyfunction]
#[pyo3(signature = (domain, h, f, delta, split = 0.5, seed = 0, tau = 1.0))]
fn inject_noise(
    domain: &Domain,
    h: Vec<f64>,
    f: Vec<f64>,
    delta: f64,
    split: f64,
    seed: u64,
    tau: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let source = TimeSource::constant(f, tau).or_raise()?;
    let h = SpectralField::new(h).or_raise()?;
    let noisy = spectral::inject_noise(&domain.inner, &h, &source, delta, split, seed).or_raise()?;
    let f_noisy = noisy.f_noisy.values_at(0.0);
    Ok((noisy.h_noisy.into_coeffs(), f_noisy))
}

/// The forward map g ↦ (κ_n g_n) at horizon τ.
#[pyclass(frozen, module = "backfrac_py")]
struct Operator {
    inner: BackwardOperator,
    constants: DerivedConstants,
}

#[pymethods]
impl Operator {
    #[new]
    #[pyo3(signature = (domain, alpha = 0.5, tau = 1.0))]
    fn new(domain: &Domain, alpha: f64, tau: f64) -> PyResult<Self> {
        let inner = BackwardOperator::new(domain.inner.clone(), alpha, tau).or_raise()?;
        let constants = DerivedConstants::calibrate(&domain.inner, alpha, tau).or_raise()?;
        Ok(Self { inner, constants })
    }

    #[getter]
    fn kappas(&self) -> Vec<f64> {
        self.inner.kappas().to_vec()
    }

    /// Calibrated constants (C₁, C₂, C₃, …) as a dict.
    #[getter]
    fn constants<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &json_of(&self.constants)?)
    }

    fn apply(&self, g: Vec<f64>) -> PyResult<Vec<f64>> {
        let g = SpectralField::new(g).or_raise()?;
        inverse::apply_t(&self.inner, &g)
            .map(SpectralField::into_coeffs)
            .or_raise()
    }

    fn exact_backward(&self, upsilon: Vec<f64>) -> PyResult<Vec<f64>> {
        let ups = forward::EffectiveData::new(SpectralField::new(upsilon).or_raise()?, Provenance::Noisy);
        inverse::exact_backward(&self.inner, &ups)
            .map(SpectralField::into_coeffs)
            .or_raise()
    }

    /// Regularized reconstruction from noisy effective data.
    ///
    /// `method` is "qbvm", "mqbvm:<q>" or "ftm"; `rule` is "apriori",
    /// "aposteriori" or "manual" (the latter with `beta` or `n_cut`).
    #[pyo3(signature = (
        upsilon, delta, method = "qbvm", rule = "apriori", p = 2.0, rho = 1.0,
        beta = None, n_cut = None, xi = 1.5, mu = 1.5, nu = 0.5
    ))]
    #[allow(clippy::too_many_arguments)]
    fn solve<'py>(
        &self,
        py: Python<'py>,
        upsilon: Vec<f64>,
        delta: f64,
        method: &str,
        rule: &str,
        p: f64,
        rho: f64,
        beta: Option<f64>,
        n_cut: Option<usize>,
        xi: f64,
        mu: f64,
        nu: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let method: Method = method.parse().or_raise()?;
        let rule: ChoiceRule = rule.parse().or_raise()?;
        let ups = forward::EffectiveData::new(SpectralField::new(upsilon).or_raise()?, Provenance::Noisy);
        let root_tol = DiscrepancyConfig::default().root_tol;
        let inputs = RuleInputs {
            delta,
            rho,
            p,
            constants: &self.constants,
            discrepancy: DiscrepancyConfig::new(xi, mu, nu, root_tol).or_raise()?,
            manual: beta.or(n_cut.map(|n| n as f64)),
        };
        let sol = py
            .detach(|| solve_with_rule(&self.inner, &ups, method, rule, &inputs))
            .or_raise()?;
        let out = PyDict::new(py);
        out.set_item("g_rec", sol.g_rec.coeffs().to_vec())?;
        out.set_item("method", method.to_string())?;
        out.set_item("rule", rule.to_string())?;
        out.set_item("parameter", sol.parameter.as_f64())?;
        out.set_item("residual", sol.diagnostics.residual)?;
        out.set_item("notes", sol.diagnostics.notes)?;
        Ok(out)
    }
}

/// Runs a δ-sweep. `spec_json` overrides defaults field by field. Returns a
/// dict with "records", "fits", "checks" (run-level) and "rate_checks".
#[pyfunction]
#[pyo3(signature = (spec_json = None))]
fn run_rates<'py>(py: Python<'py>, spec_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let spec = match spec_json {
        Some(text) => ExperimentSpec::from_json(text).or_raise()?,
        None => ExperimentSpec::default(),
    };
    let (run, report) = py
        .detach(|| {
            let run = run_experiment(&spec)?;
            let report = fit_slopes(&run.records, spec.discard, spec.discrepancy.nu);
            Ok::<_, Error>((run, report))
        })
        .or_raise()?;
    let checks = rate_checks(&run, &report, spec.discard);
    let value = serde_json::json!({
        "records": json_of(&run.records)?,
        "fits": json_of(&report.fits)?,
        "checks": json_of(&run.checks)?,
        "rate_checks": json_of(&checks)?,
    });
    to_py(py, &value)
}

#[pymodule]
fn backfrac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Domain>()?;
    m.add_class::<Operator>()?;
    m.add_function(wrap_pyfunction!(ml_eval, m)?)?;
    m.add_function(wrap_pyfunction!(ml_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(ml_kernel_l1, m)?)?;
    m.add_function(wrap_pyfunction!(relaxation, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_rate, m)?)?;
    m.add_function(wrap_pyfunction!(forward_solve, m)?)?;
    m.add_function(wrap_pyfunction!(effective_data, m)?)?;
    m.add_function(wrap_pyfunction!(inject_noise, m)?)?;
    m.add_function(wrap_pyfunction!(run_rates, m)?)?;
    Ok(())
}
