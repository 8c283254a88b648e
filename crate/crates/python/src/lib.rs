//! Python bindings: `Runtime`, `Agent`, `check`, `extract_action` and `bench`.
//!
//! Structured results cross the boundary as plain dicts and lists.

use std::sync::Arc;

use cellagent::descriptor::{describe_function, describe_variable, FunctionOverrides};
use cellagent::gateway::{HttpModel, ModelBackend, ScriptedModel};
use cellagent::orchestrator::{new_agent, Agent as CoreAgent, AgentConfig, ModelParams, SessionResult, Transcript};
use cellagent::runtime::{create_runtime, restore, RuntimeConfig, RuntimeHandle, Snapshot};
use cellagent::security::{self, default_policy, SecurityPolicy};
use cellagent::semantic;
use cellagent::statebench::{bundled_suite, oracle_factory, render_table, report, run_suite, Category};
use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn policy(imports: Option<Vec<String>>, calls: Option<Vec<String>>, attributes: Option<Vec<String>>) -> SecurityPolicy {
    if imports.is_none() && calls.is_none() && attributes.is_none() {
        return default_policy();
    }
    SecurityPolicy::new(imports.unwrap_or_default(), calls.unwrap_or_default(), attributes.unwrap_or_default())
}

/// A persistent Python namespace; cells run in order and share state.
#[pyclass(module = "pycellagent")]
struct Runtime {
    inner: RuntimeHandle,
}

#[pymethods]
impl Runtime {
    #[new]
    #[pyo3(signature = (timeout=None))]
    fn new(timeout: Option<f64>) -> PyResult<Self> {
        let mut config = RuntimeConfig::default();
        if let Some(t) = timeout {
            config.timeout_secs = t;
        }
        Ok(Self {
            inner: create_runtime(config).map_err(err)?,
        })
    }

    /// Run one cell and return its outcome as a dict.
    fn execute(&self, py: Python<'_>, source: &str) -> PyResult<Py<PyAny>> {
        let out = self.inner.execute_cell(source).map_err(err)?;
        to_py(py, &out)
    }

    fn get(&self, name: &str) -> PyResult<Py<PyAny>> {
        self.inner.get_variable(name).map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    #[pyo3(signature = (name, value, description="", overwrite=false))]
    fn inject(&self, name: &str, value: Py<PyAny>, description: &str, overwrite: bool) -> PyResult<()> {
        let desc = describe_variable(name, &value, description).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.inject_variable(desc, value, overwrite).map(drop).map_err(err)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names()
    }

    fn entries(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.list_entries())
    }

    #[getter]
    fn cell_counter(&self) -> u64 {
        self.inner.cell_counter()
    }

    fn reset(&self) -> PyResult<()> {
        self.inner.reset().map_err(err)
    }

    /// Serialize the namespace; returns JSON text.
    fn snapshot(&self) -> PyResult<String> {
        self.inner.snapshot().and_then(|s| s.to_json()).map_err(err)
    }

    #[staticmethod]
    fn restore(text: &str) -> PyResult<Self> {
        let snap = Snapshot::from_json(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: restore(&snap, RuntimeConfig::default()).map_err(err)?,
        })
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.contains(name)
    }

    fn __repr__(&self) -> String {
        format!("Runtime(cells={}, names={})", self.inner.cell_counter(), self.inner.names().len())
    }
}

fn session(py: Python<'_>, r: &SessionResult) -> PyResult<Py<PyAny>> {
    let d = PyDict::new(py);
    d.set_item("final", r.final_message())?;
    d.set_item("aborted", r.is_aborted())?;
    d.set_item("max_steps", r.final_ == cellagent::orchestrator::Final::MaxSteps)?;
    d.set_item("turns", to_py(py, &Transcript::from_result(r).turns)?)?;
    d.set_item("usage", to_py(py, &r.usage)?)?;
    Ok(d.into_any().unbind())
}

/// The turn loop over one runtime and one model backend.
#[pyclass(module = "pycellagent", unsendable)]
struct Agent {
    inner: CoreAgent,
    last: Option<SessionResult>,
}

#[pymethods]
impl Agent {
    /// `responses` selects a scripted backend; otherwise the HTTP backend is
    /// configured from the environment.
    #[new]
    #[pyo3(signature = (responses=None, *, model=None, max_turns=None, max_output=None, runtime=None, banned_imports=None, banned_calls=None, banned_attributes=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        responses: Option<Vec<String>>,
        model: Option<String>,
        max_turns: Option<usize>,
        max_output: Option<usize>,
        runtime: Option<PyRef<'_, Runtime>>,
        banned_imports: Option<Vec<String>>,
        banned_calls: Option<Vec<String>>,
        banned_attributes: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let mut config = AgentConfig::default();
        if let Some(m) = model {
            config.model = ModelParams::for_model(m);
        }
        if let Some(n) = max_turns {
            config.max_turns = n;
        }
        if let Some(n) = max_output {
            config.max_output = n;
        }
        config.policy = policy(banned_imports, banned_calls, banned_attributes);
        let backend: Arc<dyn ModelBackend> = match responses {
            Some(r) => Arc::new(ScriptedModel::new(r)),
            None => Arc::new(HttpModel::from_env().map_err(err)?),
        };
        let rt = match runtime {
            Some(r) => r.inner.clone(),
            None => create_runtime(RuntimeConfig::default()).map_err(err)?,
        };
        let inner = new_agent(config, rt, backend, vec![], vec![]).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner, last: None })
    }

    /// Answer one query; history and namespace carry over between calls.
    fn run(&mut self, py: Python<'_>, query: &str) -> PyResult<Py<PyAny>> {
        let r = self.inner.step(query).map_err(err)?;
        let out = session(py, &r)?;
        self.last = Some(r);
        Ok(out)
    }

    #[pyo3(signature = (name, value, description=""))]
    fn add_variable(&mut self, name: &str, value: Py<PyAny>, description: &str) -> PyResult<()> {
        let desc = describe_variable(name, &value, description).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.add_variable(desc, value).map_err(err)
    }

    #[pyo3(signature = (function, description=None))]
    fn add_function(&mut self, function: Py<PyAny>, description: Option<String>) -> PyResult<()> {
        let overrides = description.map(|d| FunctionOverrides {
            description: Some(d),
            ..FunctionOverrides::default()
        });
        let desc = describe_function(&function, overrides).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.add_function(desc, function).map_err(err)
    }

    fn get_variable(&self, name: &str) -> PyResult<Py<PyAny>> {
        self.inner.get_variable(name).map_err(|e| PyKeyError::new_err(e.to_string()))
    }

    #[getter]
    fn runtime(&self) -> Runtime {
        Runtime {
            inner: self.inner.runtime().clone(),
        }
    }

    #[getter]
    fn system_prompt(&self) -> String {
        self.inner.system_prompt().to_string()
    }

    #[getter]
    fn usage(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.total_usage())
    }

    /// JSON transcript of the most recent `run`.
    fn transcript(&self) -> Option<String> {
        self.last.as_ref().map(|r| Transcript::from_result(r).to_json())
    }
}

/// Policy violations for `source`; the default policy unless lists are given.
#[pyfunction]
#[pyo3(signature = (source, *, imports=None, calls=None, attributes=None))]
fn check(
    py: Python<'_>,
    source: &str,
    imports: Option<Vec<String>>,
    calls: Option<Vec<String>>,
    attributes: Option<Vec<String>>,
) -> PyResult<Py<PyAny>> {
    to_py(py, &security::check(source, &policy(imports, calls, attributes)))
}

/// Split a model response into code or a final answer.
#[pyfunction]
#[pyo3(signature = (response, identifier="python"))]
fn extract_action(py: Python<'_>, response: &str, identifier: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &semantic::extract_action(response, identifier))
}

/// Run the bundled suite with the reference-code backend; returns
/// `(report, table)`.
#[pyfunction]
#[pyo3(name = "bench", signature = (jobs=1, categories=None))]
fn run_bench(py: Python<'_>, jobs: usize, categories: Option<Vec<String>>) -> PyResult<(Py<PyAny>, String)> {
    let mut cases = bundled_suite().map_err(err)?;
    if let Some(names) = categories {
        let wanted: Vec<Category> = names
            .iter()
            .map(|n| Category::parse(n).ok_or_else(|| PyValueError::new_err(format!("unknown category {n:?}"))))
            .collect::<PyResult<_>>()?;
        cases.retain(|c| wanted.contains(&c.category));
    }
    let factory = oracle_factory(AgentConfig::default());
    let results = py.detach(|| run_suite(&cases, &factory, jobs.max(1)));
    let rep = report(&results).map_err(err)?;
    Ok((to_py(py, &rep)?, render_table(&rep)))
}

#[pymodule]
pub fn pycellagent(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Runtime>()?;
    m.add_class::<Agent>()?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(extract_action, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("MAX_STEPS_MESSAGE", cellagent::orchestrator::MAX_STEPS_MESSAGE)?;
    Ok(())
}
