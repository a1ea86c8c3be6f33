//! Python bindings: systems, charts, certificates and expressions.

use aacord::chart::{build_system_chart, Chart as CoreChart, ChartOptions, ChartPoint};
use aacord::expr::Expr;
use aacord::flow::{flow_one, FlowConfig};
use aacord::pipeline;
use aacord::report::ResidualReport;
use aacord::spec;
use aacord::structure::{certify, SystemDef};
use aacord::symplectic::{hamiltonian_vector_field, phase_variables, poisson_bracket as bracket, PhasePoint};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: aacord::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (v.to_string(),))
}

fn report_to_py<'py>(py: Python<'py>, command: &str, r: &ResidualReport, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let mut extra = std::collections::BTreeMap::new();
    extra.insert("seed".to_string(), serde_json::json!(seed));
    to_py(py, &r.to_json(command, extra))
}

/// A parsed expression.
#[pyclass(name = "Expression", frozen)]
struct PyExpr {
    inner: Expr,
}

#[pymethods]
impl PyExpr {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyExpr { inner: text.parse().map_err(|e: aacord::expr::ParseError| PyValueError::new_err(e.to_string()))? })
    }

    fn differentiate(&self, var: &str) -> PyExpr {
        PyExpr { inner: self.inner.differentiate(var) }
    }

    fn free_vars(&self) -> Vec<String> {
        self.inner.free_vars().into_iter().collect()
    }

    /// Evaluates with a mapping from variable names to values.
    fn eval(&self, values: &Bound<'_, PyDict>) -> PyResult<f64> {
        let names = self.free_vars();
        let mut x = Vec::with_capacity(names.len());
        for n in &names {
            let v = values.get_item(n)?.ok_or_else(|| PyValueError::new_err(format!("unbound variable `{n}`")))?;
            x.push(v.extract::<f64>()?);
        }
        let c = self.inner.compile(&names).map_err(err)?;
        c.eval(&x).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expression('{}')", self.inner)
    }
}

/// A completely integrable system.
#[pyclass(name = "System", frozen)]
struct PySystem {
    inner: SystemDef,
}

#[pymethods]
impl PySystem {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn integral_names(&self) -> Vec<String> {
        self.inner.integral_names.clone()
    }

    #[getter]
    fn reference(&self) -> Vec<f64> {
        self.inner.reference.to_vec()
    }

    /// Certificate of the integrability hypotheses.
    #[pyo3(signature = (seed = 42))]
    fn certify<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let r = certify(&self.inner, seed).map_err(err)?;
        report_to_py(py, "validate", &r, seed)
    }

    /// Period lattice of the fiber through `point` (default: the reference).
    #[pyo3(signature = (point = None, seed = 42))]
    fn topology<'py>(&self, py: Python<'py>, point: Option<Vec<f64>>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let z = match point {
            Some(p) => PhasePoint::new(p).map_err(err)?,
            None => self.inner.reference.clone(),
        };
        let (lat, r) = pipeline::topology(&self.inner, &z, seed).map_err(err)?;
        let doc = to_py(py, &serde_json::to_value(&lat).expect("lattice serializes"))?;
        let out = report_to_py(py, "topology", &r, seed)?;
        out.set_item("lattice", doc)?;
        Ok(out)
    }

    #[pyo3(signature = (seed = 42))]
    fn chart(&self, seed: u64) -> PyResult<PyChart> {
        let chart = build_system_chart(&self.inner, seed, &ChartOptions::default()).map_err(err)?;
        Ok(PyChart { sys: self.inner.clone(), inner: chart })
    }

    /// Canonical blocks, equations of motion and round trip.
    #[pyo3(signature = (seed = 42, hamiltonian = None, t_max = 20.0))]
    fn verify<'py>(
        &self,
        py: Python<'py>,
        seed: u64,
        hamiltonian: Option<&str>,
        t_max: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let h = hamiltonian.map(|t| pipeline::parse_hamiltonian(&self.inner, t)).transpose().map_err(err)?;
        let (_, r) = pipeline::verify(&self.inner, seed, h.as_ref(), t_max, 16).map_err(err)?;
        report_to_py(py, "verify", &r, seed)
    }

    fn __repr__(&self) -> String {
        format!("System('{}', n={}, k={})", self.inner.name, self.inner.n, self.inner.k())
    }
}

/// A generalized action-angle chart.
#[pyclass(name = "Chart", frozen)]
struct PyChart {
    sys: SystemDef,
    inner: CoreChart,
}

#[pymethods]
impl PyChart {
    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.r()
    }

    #[getter]
    fn lattice_basis(&self) -> Vec<Vec<f64>> {
        self.inner.lattice().basis.clone()
    }

    /// `(actions, x, t, phi)` of a phase point.
    fn forward(&self, z: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let w = self.inner.forward(&z).map_err(err)?;
        Ok((w.actions, w.x, w.t, w.phi))
    }

    fn inverse(&self, actions: Vec<f64>, x: Vec<f64>, t: Vec<f64>, phi: Vec<f64>) -> PyResult<Vec<f64>> {
        let w = ChartPoint { actions, x, t, phi };
        Ok(self.inner.inverse(&w).map_err(err)?.into_vec())
    }

    /// Actions as functions of the Casimir values.
    fn actions(&self, casimirs: Vec<f64>) -> PyResult<Vec<f64>> {
        if casimirs.len() != self.inner.m() {
            return Err(PyValueError::new_err(format!("expected {} Casimir values", self.inner.m())));
        }
        Ok(self.inner.actions(&casimirs).0)
    }

    fn frequency_matrix(&self, casimirs: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let f = self.inner.frequency_matrix(&casimirs).map_err(err)?;
        Ok((0..f.nrows()).map(|i| f.row(i).iter().copied().collect()).collect())
    }

    fn metadata<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.metadata())
    }

    /// Trajectory rows `t, q, p, I, x, t, phi` and their header.
    #[pyo3(signature = (hamiltonian = None, point = None, t_max = 10.0, dt = 0.1))]
    fn trace(
        &self,
        hamiltonian: Option<&str>,
        point: Option<Vec<f64>>,
        t_max: f64,
        dt: f64,
    ) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let h = match hamiltonian {
            Some(t) => pipeline::parse_hamiltonian(&self.sys, t),
            None => self.sys.hamiltonian_expr(),
        }
        .map_err(err)?;
        let z = point.unwrap_or_else(|| self.sys.reference.to_vec());
        let rows = pipeline::trace(&self.inner, &h, &z, t_max, dt).map_err(err)?;
        Ok((pipeline::trace_header(&self.inner), rows))
    }
}

#[pyfunction]
fn catalog() -> Vec<&'static str> {
    spec::catalog_names()
}

#[pyfunction]
fn load_catalog(name: &str) -> PyResult<PySystem> {
    Ok(PySystem { inner: spec::load_catalog(name).map_err(err)? })
}

#[pyfunction]
fn load_spec(path: &str) -> PyResult<PySystem> {
    Ok(PySystem { inner: spec::load_spec(path).map_err(err)? })
}

/// Parses specification text (TOML).
#[pyfunction]
fn parse_spec(text: &str) -> PyResult<PySystem> {
    Ok(PySystem { inner: spec::load_spec_str(text).map_err(err)? })
}

/// Canonical bracket `{f, g}` on R^{2n}.
#[pyfunction]
fn poisson_bracket(f: &str, g: &str, n: usize) -> PyResult<PyExpr> {
    let (f, g) = (PyExpr::new(f)?, PyExpr::new(g)?);
    Ok(PyExpr { inner: bracket(&f.inner, &g.inner, n) })
}

/// Time-`t` map of the Hamiltonian flow of `h` on R^{2n}.
#[pyfunction]
#[pyo3(signature = (h, z, t, rtol = 1e-10, atol = 1e-12))]
fn hamiltonian_flow(h: &str, z: Vec<f64>, t: f64, rtol: f64, atol: f64) -> PyResult<Vec<f64>> {
    if z.len() % 2 != 0 {
        return Err(PyValueError::new_err("phase point needs an even number of coordinates"));
    }
    let n = z.len() / 2;
    let e = PyExpr::new(h)?.inner;
    if let Some(v) = e.free_vars().into_iter().find(|v| !phase_variables(n).contains(v)) {
        return Err(PyValueError::new_err(format!("unknown variable `{v}`")));
    }
    let field = hamiltonian_vector_field(&e, n).map_err(err)?;
    flow_one(&field, t, &z, &FlowConfig::with_tolerances(rtol, atol)).map_err(err)
}

#[pymodule]
fn aacord_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpr>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<PyChart>()?;
    m.add_function(wrap_pyfunction!(catalog, m)?)?;
    m.add_function(wrap_pyfunction!(load_catalog, m)?)?;
    m.add_function(wrap_pyfunction!(load_spec, m)?)?;
    m.add_function(wrap_pyfunction!(parse_spec, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_bracket, m)?)?;
    m.add_function(wrap_pyfunction!(hamiltonian_flow, m)?)?;
    Ok(())
}
