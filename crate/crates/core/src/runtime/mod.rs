//! Persistent Python kernel.
//!
//! A [`Runtime`] owns one global namespace inside the process-wide CPython
//! interpreter. Cells executed against it see every binding made by earlier
//! cells and every injected object, until the runtime is [reset](Runtime::reset).
//! Distinct runtimes never share bindings.
//!
//! Value equality, used by snapshot restore and transfer checks, follows
//! [`values_equal`]:
//!
//! - objects with a host-defined `__eq__` compare structurally (`int`, `str`,
//!   containers, dataclasses, ...);
//! - numpy arrays compare by shape and element-wise equality, pandas objects
//!   through `.equals`;
//! - objects that only inherit identity equality are equal when they are the
//!   same object, or when their pickled state is byte-identical.

mod snapshot;

use std::cell::RefCell;
use std::ffi::CString;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use pyo3::prelude::*;
use pyo3::sync::PyOnceLock;
use pyo3::types::{PyDict, PyModule, PyTuple};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{FunctionDescriptor, VariableDescriptor};

pub use snapshot::{restore, Encoding, SkippedEntry, Snapshot, SnapshotEntry, SNAPSHOT_VERSION};
pub(crate) use snapshot::decode_value;

/// A live Python value.
pub type PyValue = Py<PyAny>;

/// Shared handle to a runtime; cloning it shares the namespace.
pub type RuntimeHandle = Arc<Runtime>;

const KERNEL_SOURCE: &str = include_str!("kernel.py");
static KERNEL: PyOnceLock<Py<PyModule>> = PyOnceLock::new();
static NEXT_ID: AtomicU64 = AtomicU64::new(1);

const SUMMARY_WIDTH: usize = 80;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("the Python interpreter is not available")]
    KernelDead,
    #[error("kernel startup failed: {0}")]
    Startup(String),
    #[error("runtime {0} already has a cell in flight")]
    Busy(String),
    #[error("cell source is empty")]
    EmptySource,
    #[error("name not found: {0}")]
    NotFound(String),
    #[error("{0:?} is not a valid identifier")]
    InvalidIdentifier(String),
    #[error("{0:?} collides with a host builtin")]
    BuiltinCollision(String),
    #[error("{0:?} is already injected")]
    NameCollision(String),
    #[error("{0:?} is not callable")]
    NotCallable(String),
    #[error("unsupported snapshot version {0:?}")]
    UnsupportedVersion(String),
    #[error("corrupt snapshot entry {name:?}: {reason}")]
    CorruptPayload { name: String, reason: String },
    #[error("snapshot I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("snapshot document: {0}")]
    Document(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("python error: {0}")]
    Python(String),
}

impl RuntimeError {
    pub(crate) fn py(err: PyErr) -> Self {
        Python::attach(|py| RuntimeError::Python(describe_pyerr(py, &err)))
    }
}

pub(crate) fn describe_pyerr(py: Python<'_>, err: &PyErr) -> String {
    let name = err
        .get_type(py)
        .name()
        .map(|n| n.to_string())
        .unwrap_or_else(|_| "Exception".into());
    format!("{name}: {}", err.value(py))
}

/// Initialise the embedded interpreter if this process has not already.
pub fn ensure_python() {
    Python::initialize();
}

pub(crate) fn kernel(py: Python<'_>) -> PyResult<&Bound<'_, PyModule>> {
    KERNEL
        .get_or_try_init(py, || {
            let code = CString::new(KERNEL_SOURCE).expect("kernel source has no NUL");
            PyModule::from_code(py, &code, c"cellagent_kernel.py", c"cellagent_kernel")
                .map(Bound::unbind)
        })
        .map(|m| m.bind(py))
}

/// Runtime construction options; loadable from TOML or JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Modules imported and bound at start, as `"math"` or `"pandas as pd"`.
    pub preload: Vec<String>,
    /// Wall-clock budget per cell.
    pub timeout_secs: f64,
    /// Characters kept per output stream; the full length is still counted.
    pub stdout_cap: Option<usize>,
    /// Characters kept from the repr of a cell's last expression.
    pub last_value_limit: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            preload: Vec::new(),
            timeout_secs: 30.0,
            stdout_cap: Some(1_000_000),
            last_value_limit: 1_000,
        }
    }
}

impl RuntimeConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RuntimeError> {
        toml::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, RuntimeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| RuntimeError::Config(e.to_string()))
        } else {
            Self::from_toml_str(&text)
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.001))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Injected,
    CellCreated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamespaceEntry {
    pub name: String,
    pub type_name: String,
    pub origin: Origin,
    pub summary: String,
}

/// What an injected name was described as when it entered the namespace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InjectedDescriptor {
    Function(FunctionDescriptor),
    Variable(VariableDescriptor),
}

impl InjectedDescriptor {
    pub fn name(&self) -> &str {
        match self {
            Self::Function(f) => &f.name,
            Self::Variable(v) => &v.name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Syntax,
    Runtime,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub kind: ErrorKind,
    /// Exception class name.
    pub exception: String,
    pub message: String,
    /// Formatted traceback, as the interpreter would print it.
    pub traceback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub cell_index: u64,
    pub source: String,
    pub stdout: String,
    pub stderr: String,
    /// Total characters written to stdout, including any past the capture cap.
    pub stdout_chars: usize,
    pub stderr_chars: usize,
    pub error: Option<CellError>,
    pub last_value_repr: Option<String>,
    /// Seconds.
    pub duration: f64,
}

impl ExecutionOutcome {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

struct State {
    cell_counter: u64,
    manifest: Vec<InjectedDescriptor>,
}

pub struct Runtime {
    id: String,
    config: RuntimeConfig,
    created_at: DateTime<Utc>,
    globals: Py<PyDict>,
    state: Mutex<State>,
    busy: AtomicBool,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime")
            .field("id", &self.id)
            .field("cell_counter", &self.cell_counter())
            .finish_non_exhaustive()
    }
}

thread_local! {
    static CELL_STACK: RefCell<Vec<(String, u64)>> = const { RefCell::new(Vec::new()) };
}

/// The (runtime id, cell index) of the innermost cell running on this thread.
pub fn current_cell() -> Option<(String, u64)> {
    CELL_STACK.with(|s| s.borrow().last().cloned())
}

struct CellScope;

impl CellScope {
    fn enter(id: &str, index: u64) -> Self {
        CELL_STACK.with(|s| s.borrow_mut().push((id.to_string(), index)));
        CellScope
    }
}

impl Drop for CellScope {
    fn drop(&mut self) {
        CELL_STACK.with(|s| {
            s.borrow_mut().pop();
        });
    }
}

struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

/// Raises `CellTimeout` into the executing thread once the budget runs out.
struct Watchdog {
    done: Arc<Mutex<bool>>,
    fired: Arc<AtomicBool>,
    cancel: mpsc::Sender<()>,
    ident: u64,
}

impl Watchdog {
    fn start(ident: u64, timeout: Duration, exc: PyValue) -> Self {
        let done = Arc::new(Mutex::new(false));
        let fired = Arc::new(AtomicBool::new(false));
        let (cancel, rx) = mpsc::channel::<()>();
        let (d, f) = (done.clone(), fired.clone());
        std::thread::spawn(move || {
            if rx.recv_timeout(timeout) != Err(mpsc::RecvTimeoutError::Timeout) {
                return;
            }
            Python::attach(|py| {
                let done = d.lock().unwrap();
                if !*done {
                    f.store(true, Ordering::SeqCst);
                    // SAFETY: the GIL is held and `exc` is a live exception class.
                    unsafe {
                        pyo3::ffi::PyThreadState_SetAsyncExc(
                            ident as std::os::raw::c_long,
                            exc.bind(py).as_ptr(),
                        );
                    }
                }
            });
        });
        Self { done, fired, cancel, ident }
    }

    /// Must be called with the GIL held, right after the cell returns.
    fn finish(self) -> bool {
        *self.done.lock().unwrap() = true;
        let _ = self.cancel.send(());
        let fired = self.fired.load(Ordering::SeqCst);
        if fired {
            // SAFETY: GIL held by caller; a null exception clears any pending one.
            unsafe {
                pyo3::ffi::PyThreadState_SetAsyncExc(
                    self.ident as std::os::raw::c_long,
                    std::ptr::null_mut(),
                );
            }
        }
        fired
    }
}

/// Create a runtime with an empty user namespace.
pub fn create_runtime(config: RuntimeConfig) -> Result<RuntimeHandle, RuntimeError> {
    Runtime::new(config).map(Arc::new)
}

fn is_host_internal(name: &str) -> bool {
    name.len() > 4 && name.starts_with("__") && name.ends_with("__")
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Self, RuntimeError> {
        ensure_python();
        let globals = Python::try_attach(|py| -> Result<Py<PyDict>, RuntimeError> {
            kernel(py).map_err(|e| RuntimeError::Startup(describe_pyerr(py, &e)))?;
            let globals = PyDict::new(py);
            let builtins = py
                .import("builtins")
                .map_err(|e| RuntimeError::Startup(describe_pyerr(py, &e)))?;
            globals
                .set_item("__builtins__", builtins)
                .and_then(|_| globals.set_item("__name__", "__main__"))
                .map_err(|e| RuntimeError::Startup(describe_pyerr(py, &e)))?;
            Ok(globals.unbind())
        })
        .ok_or(RuntimeError::KernelDead)??;
        let rt = Self {
            id: format!("rt-{}", NEXT_ID.fetch_add(1, Ordering::Relaxed)),
            config,
            created_at: Utc::now(),
            globals,
            state: Mutex::new(State {
                cell_counter: 0,
                manifest: Vec::new(),
            }),
            busy: AtomicBool::new(false),
        };
        rt.apply_preload()?;
        Ok(rt)
    }

    fn apply_preload(&self) -> Result<(), RuntimeError> {
        for spec in &self.config.preload {
            let (module, alias) = match spec.split_once(" as ") {
                Some((m, a)) => (m.trim(), a.trim()),
                None => (spec.trim(), spec.trim().split('.').next().unwrap_or_default()),
            };
            let value = Python::attach(|py| {
                py.import(module)
                    .map(|m| m.into_any().unbind())
                    .map_err(|e| RuntimeError::Startup(format!("preload {module}: {}", describe_pyerr(py, &e))))
            })?;
            let desc = VariableDescriptor {
                name: alias.to_string(),
                type_label: "module".into(),
                description: format!("The preloaded `{module}` module."),
            };
            self.inject_variable(desc, value, true)?;
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.created_at
    }

    pub fn cell_counter(&self) -> u64 {
        self.state.lock().unwrap().cell_counter
    }

    /// Descriptors of every injected name still present in the namespace.
    pub fn injected_manifest(&self) -> Vec<InjectedDescriptor> {
        self.state.lock().unwrap().manifest.clone()
    }

    /// The namespace dict itself. Mutating it bypasses the manifest.
    pub fn globals<'py>(&self, py: Python<'py>) -> &Bound<'py, PyDict> {
        self.globals.bind(py)
    }

    /// Run one cell. Runtime exceptions, syntax errors and timeouts are
    /// reported in the outcome; only kernel-level failures are `Err`.
    ///
    /// If the cell raises, the namespace bindings are rolled back to what they
    /// were before the cell (in-place mutations of existing objects remain).
    pub fn execute_cell(&self, source: &str) -> Result<ExecutionOutcome, RuntimeError> {
        if source.trim().is_empty() {
            return Err(RuntimeError::EmptySource);
        }
        if self
            .busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return Err(RuntimeError::Busy(self.id.clone()));
        }
        let _busy = BusyGuard(&self.busy);
        let index = {
            let mut st = self.state.lock().unwrap();
            st.cell_counter += 1;
            st.cell_counter
        };
        let outcome = Python::try_attach(|py| self.run_cell(py, source, index))
            .ok_or(RuntimeError::KernelDead)??;
        self.prune_manifest();
        Ok(outcome)
    }

    fn run_cell(
        &self,
        py: Python<'_>,
        source: &str,
        index: u64,
    ) -> Result<ExecutionOutcome, RuntimeError> {
        let k = kernel(py).map_err(RuntimeError::py)?;
        let globals = self.globals.bind(py);
        let filename = format!("<cell-{index}>");
        let started = Instant::now();

        let before = globals.copy().map_err(RuntimeError::py)?;
        k.call_method1("push_capture", (self.config.stdout_cap,))
            .map_err(RuntimeError::py)?;
        let _scope = CellScope::enter(&self.id, index);

        let ident: u64 = k
            .call_method0("thread_ident")
            .and_then(|v| v.extract())
            .map_err(RuntimeError::py)?;
        let timeout_exc = k.getattr("CellTimeout").map_err(RuntimeError::py)?.unbind();

        let compiled = k.call_method1("compile_cell", (source, &filename));
        let mut timed_out = false;
        let result: PyResult<Option<Bound<'_, PyAny>>> = match compiled {
            Err(e) => Err(e),
            Ok(pair) => {
                let builtins = py.import("builtins").map_err(RuntimeError::py)?;
                let exec = builtins.getattr("exec").map_err(RuntimeError::py)?;
                let eval = builtins.getattr("eval").map_err(RuntimeError::py)?;
                let (body, last): (Bound<'_, PyAny>, Bound<'_, PyAny>) =
                    pair.extract().map_err(RuntimeError::py)?;
                let dog = Watchdog::start(ident, self.config.timeout(), timeout_exc);
                let r = exec.call1((body, globals)).and_then(|_| {
                    if last.is_none() {
                        Ok(None)
                    } else {
                        eval.call1((last, globals)).map(Some)
                    }
                });
                timed_out = dog.finish();
                r
            }
        };

        let (stdout, stdout_chars, stderr, stderr_chars): (String, usize, String, usize) = k
            .call_method0("pop_capture")
            .and_then(|v| v.extract())
            .map_err(RuntimeError::py)?;

        let mut last_value_repr = None;
        let mut error = None;
        match result {
            Ok(Some(value)) if !value.is_none() => {
                last_value_repr = Some(
                    k.call_method1("summarize", (value, self.config.last_value_limit))
                        .and_then(|v| v.extract())
                        .map_err(RuntimeError::py)?,
                );
            }
            Ok(_) => {}
            Err(err) => {
                let exc = err.value(py);
                let is_syntax = exc.is_instance_of::<pyo3::exceptions::PySyntaxError>();
                let is_timeout = timed_out
                    && exc
                        .get_type()
                        .is(k.getattr("CellTimeout").map_err(RuntimeError::py)?);
                let (exception, message, traceback): (String, String, String) = k
                    .call_method1("format_error", (exc, &filename, source))
                    .and_then(|v| v.extract())
                    .map_err(RuntimeError::py)?;
                let kind = if is_syntax {
                    ErrorKind::Syntax
                } else if is_timeout {
                    ErrorKind::Timeout
                } else {
                    ErrorKind::Runtime
                };
                let message = if kind == ErrorKind::Timeout {
                    format!("cell exceeded the {}s time limit", self.config.timeout_secs)
                } else {
                    message
                };
                error = Some(CellError {
                    kind,
                    exception,
                    message,
                    traceback,
                });
                globals.clear();
                globals.update(before.as_mapping()).map_err(RuntimeError::py)?;
            }
        }

        Ok(ExecutionOutcome {
            cell_index: index,
            source: source.to_string(),
            stdout,
            stderr,
            stdout_chars,
            stderr_chars,
            error,
            last_value_repr,
            duration: started.elapsed().as_secs_f64(),
        })
    }

    fn prune_manifest(&self) {
        let names: Vec<String> = self.state.lock().unwrap().manifest.iter().map(|d| d.name().to_string()).collect();
        let present: Vec<bool> = Python::attach(|py| {
            let g = self.globals.bind(py);
            names.iter().map(|n| g.contains(n).unwrap_or(false)).collect()
        });
        let mut st = self.state.lock().unwrap();
        let mut i = 0;
        st.manifest.retain(|_| {
            let keep = present.get(i).copied().unwrap_or(true);
            i += 1;
            keep
        });
    }

    fn check_name(&self, py: Python<'_>, name: &str) -> Result<(), RuntimeError> {
        let k = kernel(py).map_err(RuntimeError::py)?;
        let ok: bool = k
            .call_method1("is_identifier", (name,))
            .and_then(|v| v.extract())
            .map_err(RuntimeError::py)?;
        if !ok {
            return Err(RuntimeError::InvalidIdentifier(name.to_string()));
        }
        let builtin: bool = k
            .call_method1("is_builtin_name", (name,))
            .and_then(|v| v.extract())
            .map_err(RuntimeError::py)?;
        if builtin {
            return Err(RuntimeError::BuiltinCollision(name.to_string()));
        }
        Ok(())
    }

    fn bind_injected(
        &self,
        descriptor: InjectedDescriptor,
        value: PyValue,
        overwrite: bool,
    ) -> Result<NamespaceEntry, RuntimeError> {
        let name = descriptor.name().to_string();
        Python::attach(|py| -> Result<(), RuntimeError> {
            self.check_name(py, &name)?;
            let st = self.state.lock().unwrap();
            if !overwrite && st.manifest.iter().any(|d| d.name() == name) {
                return Err(RuntimeError::NameCollision(name.clone()));
            }
            drop(st);
            self.globals
                .bind(py)
                .set_item(&name, value.bind(py))
                .map_err(RuntimeError::py)
        })?;
        {
            let mut st = self.state.lock().unwrap();
            st.manifest.retain(|d| d.name() != name);
            st.manifest.push(descriptor);
        }
        self.entry(&name)
    }

    /// Bind `value` under the descriptor's name. Re-injecting an injected
    /// name requires `overwrite`; shadowing a cell-created name does not.
    pub fn inject_variable(
        &self,
        descriptor: VariableDescriptor,
        value: PyValue,
        overwrite: bool,
    ) -> Result<NamespaceEntry, RuntimeError> {
        self.bind_injected(InjectedDescriptor::Variable(descriptor), value, overwrite)
    }

    pub fn inject_function(
        &self,
        descriptor: FunctionDescriptor,
        callable: PyValue,
        overwrite: bool,
    ) -> Result<NamespaceEntry, RuntimeError> {
        let callable_ok = Python::attach(|py| callable.bind(py).is_callable());
        if !callable_ok {
            return Err(RuntimeError::NotCallable(descriptor.name.clone()));
        }
        self.bind_injected(InjectedDescriptor::Function(descriptor), callable, overwrite)
    }

    /// The live object bound to `name`.
    pub fn get_variable(&self, name: &str) -> Result<PyValue, RuntimeError> {
        Python::try_attach(|py| {
            self.globals
                .bind(py)
                .get_item(name)
                .map_err(RuntimeError::py)?
                .filter(|_| !is_host_internal(name))
                .map(Bound::unbind)
                .ok_or_else(|| RuntimeError::NotFound(name.to_string()))
        })
        .ok_or(RuntimeError::KernelDead)?
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get_variable(name).is_ok()
    }

    /// Remove a binding. Injected names leave the manifest with it.
    pub fn delete_variable(&self, name: &str) -> Result<(), RuntimeError> {
        Python::attach(|py| {
            let g = self.globals.bind(py);
            if is_host_internal(name) || !g.contains(name).map_err(RuntimeError::py)? {
                return Err(RuntimeError::NotFound(name.to_string()));
            }
            g.del_item(name).map_err(RuntimeError::py)
        })?;
        self.state.lock().unwrap().manifest.retain(|d| d.name() != name);
        Ok(())
    }

    fn origin_of(&self, name: &str) -> Origin {
        if self.state.lock().unwrap().manifest.iter().any(|d| d.name() == name) {
            Origin::Injected
        } else {
            Origin::CellCreated
        }
    }

    fn entry(&self, name: &str) -> Result<NamespaceEntry, RuntimeError> {
        let value = self.get_variable(name)?;
        let (type_name, summary) = Python::attach(|py| -> PyResult<(String, String)> {
            let k = kernel(py)?;
            let t = k.call_method1("type_label", (value.bind(py),))?.extract()?;
            let s = k
                .call_method1("summarize", (value.bind(py), SUMMARY_WIDTH))?
                .extract()?;
            Ok((t, s))
        })
        .map_err(RuntimeError::py)?;
        Ok(NamespaceEntry {
            name: name.to_string(),
            type_name,
            origin: self.origin_of(name),
            summary,
        })
    }

    /// User-visible names in binding order. Dunder names (`__builtins__`,
    /// `__name__`, ...) belong to the host and are never listed.
    pub fn names(&self) -> Vec<String> {
        Python::attach(|py| {
            self.globals
                .bind(py)
                .keys()
                .iter()
                .filter_map(|k| k.extract::<String>().ok())
                .filter(|k| !is_host_internal(k))
                .collect()
        })
    }

    pub fn list_entries(&self) -> Vec<NamespaceEntry> {
        self.names()
            .iter()
            .filter_map(|n| self.entry(n).ok())
            .collect()
    }

    /// Clear the namespace back to its freshly created state.
    pub fn reset(&self) -> Result<(), RuntimeError> {
        Python::attach(|py| -> Result<(), RuntimeError> {
            let g = self.globals.bind(py);
            let builtins = py.import("builtins").map_err(RuntimeError::py)?;
            g.clear();
            g.set_item("__builtins__", builtins).map_err(RuntimeError::py)?;
            g.set_item("__name__", "__main__").map_err(RuntimeError::py)?;
            Ok(())
        })?;
        {
            let mut st = self.state.lock().unwrap();
            st.cell_counter = 0;
            st.manifest.clear();
        }
        self.apply_preload()
    }

    pub(crate) fn restore_counter(&self, counter: u64) {
        self.state.lock().unwrap().cell_counter = counter;
    }

    /// A fresh runtime whose namespace holds deep copies of `names`
    /// (all user names when `None`). Values that cannot be deep-copied are
    /// left out.
    pub fn clone_isolated(&self, names: Option<&[String]>) -> Result<RuntimeHandle, RuntimeError> {
        let clone = create_runtime(self.config.clone())?;
        let wanted: Vec<String> = match names {
            Some(n) => n.to_vec(),
            None => self.names(),
        };
        Python::attach(|py| -> Result<(), RuntimeError> {
            let k = kernel(py).map_err(RuntimeError::py)?;
            let src = self.globals.bind(py);
            let dst = clone.globals.bind(py);
            for name in &wanted {
                if let Some(v) = src.get_item(name).map_err(RuntimeError::py)? {
                    if let Ok(copy) = k.call_method1("deep_clone", (v,)) {
                        dst.set_item(name, copy).map_err(RuntimeError::py)?;
                    }
                }
            }
            Ok(())
        })?;
        Ok(clone)
    }
}

/// Value equality used for snapshot and transfer fidelity; see module docs.
pub fn values_equal(a: &PyValue, b: &PyValue) -> bool {
    Python::attach(|py| {
        kernel(py)
            .and_then(|k| k.call_method1("values_equal", (a.bind(py), b.bind(py))))
            .and_then(|r| r.extract::<bool>())
            .unwrap_or(false)
    })
}

/// Render call arguments the way the invocation log records them, e.g. `(2, 3)`.
pub(crate) fn render_args(
    py: Python<'_>,
    args: &Bound<'_, PyTuple>,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> String {
    kernel(py)
        .and_then(|k| k.call_method1("render_args", (args, kwargs)))
        .and_then(|r| r.extract())
        .unwrap_or_else(|_| "(<unrepresentable>)".into())
}

/// Another reference to the same Python object.
pub fn share(value: &PyValue) -> PyValue {
    Python::attach(|py| value.clone_ref(py))
}

/// Evaluate a Python expression in a scratch namespace; handy for building
/// values to inject.
pub fn eval_value(source: &str) -> Result<PyValue, RuntimeError> {
    ensure_python();
    Python::attach(|py| {
        let code = CString::new(source).map_err(|e| RuntimeError::Python(e.to_string()))?;
        py.eval(&code, None, None)
            .map(Bound::unbind)
            .map_err(RuntimeError::py)
    })
}

/// Execute Python source in a scratch namespace and return one of its names.
/// Used to build classes and instances outside any runtime.
pub fn define_value(source: &str, name: &str) -> Result<PyValue, RuntimeError> {
    ensure_python();
    Python::attach(|py| {
        let code = CString::new(source).map_err(|e| RuntimeError::Python(e.to_string()))?;
        let scope = PyDict::new(py);
        scope
            .set_item("__builtins__", py.import("builtins").map_err(RuntimeError::py)?)
            .map_err(RuntimeError::py)?;
        scope.set_item("__name__", "__main__").map_err(RuntimeError::py)?;
        py.run(&code, Some(&scope), None).map_err(RuntimeError::py)?;
        scope
            .get_item(name)
            .map_err(RuntimeError::py)?
            .map(Bound::unbind)
            .ok_or_else(|| RuntimeError::NotFound(name.to_string()))
    })
}
