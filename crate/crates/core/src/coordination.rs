//! Multi-agent primitives that communicate through runtimes rather than text.
//!
//! Sub-agents are injected into a meta-agent's runtime as live proxy objects,
//! values move between runtimes by reference, and several agents can share one
//! runtime behind a gate that lets one cell run at a time.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use pyo3::exceptions::PyRuntimeError;
use pyo3::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{describe_variable, DescriptorError, VariableDescriptor};
use crate::orchestrator::{Agent, AgentError};
use crate::runtime::{
    decode_value, InjectedDescriptor, NamespaceEntry, PyValue, RuntimeError, RuntimeHandle,
    SnapshotEntry,
};

#[derive(Debug, Error)]
pub enum CoordinationError {
    #[error("name {0:?} is already taken")]
    Collision(String),
    #[error("agent {0:?} is already bound to a shared runtime")]
    AlreadyBound(String),
    #[error("agent {0:?} is busy")]
    Busy(String),
    #[error("entry {name:?} cannot be serialized: {reason}")]
    Unserializable { name: String, reason: String },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

pub type SharedAgent = Arc<Mutex<Agent>>;

pub fn share_agent(agent: Agent) -> SharedAgent {
    Arc::new(Mutex::new(agent))
}

/// Mutual exclusion around cell execution on a shared runtime.
///
/// Callers must not hold the interpreter lock while waiting on the gate.
#[derive(Debug, Default)]
pub struct Gate {
    lock: Mutex<()>,
}

impl Gate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn acquire(&self) -> MutexGuard<'_, ()> {
        self.lock.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Named agents, each reachable by reference.
#[derive(Debug, Default)]
pub struct AgentRegistry {
    entries: Mutex<BTreeMap<String, SharedAgent>>,
}

impl AgentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, name: &str, agent: SharedAgent) -> Result<(), CoordinationError> {
        if !crate::descriptor::is_identifier(name) {
            return Err(RuntimeError::InvalidIdentifier(name.to_string()).into());
        }
        let mut entries = self.entries.lock().unwrap();
        if entries.contains_key(name) {
            return Err(CoordinationError::Collision(name.to_string()));
        }
        entries.insert(name.to_string(), agent);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<SharedAgent> {
        self.entries.lock().unwrap().get(name).cloned()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.lock().unwrap().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A sub-agent as seen from inside a runtime.
#[pyclass(module = "cellagent", name = "AgentProxy")]
pub struct AgentProxy {
    name: String,
    agent: SharedAgent,
}

impl AgentProxy {
    fn drive<T: Send>(
        &self,
        py: Python<'_>,
        f: impl FnOnce(&mut Agent) -> Result<T, AgentError> + Send,
    ) -> PyResult<T> {
        let agent = self.agent.clone();
        let name = self.name.clone();
        py.detach(move || {
            let mut guard = agent
                .try_lock()
                .map_err(|_| PyRuntimeError::new_err(format!("agent {name:?} is busy")))?;
            f(&mut guard).map_err(|e| PyRuntimeError::new_err(e.to_string()))
        })
    }
}

#[pymethods]
impl AgentProxy {
    /// Start a new session for `query` and return the final message.
    fn run(&self, py: Python<'_>, query: String) -> PyResult<String> {
        self.drive(py, move |a| a.run(&query).map(|r| r.final_message().to_string()))
    }

    /// Continue the sub-agent's conversation and return the final message.
    fn step(&self, py: Python<'_>, message: String) -> PyResult<String> {
        self.drive(py, move |a| a.step(&message).map(|r| r.final_message().to_string()))
    }

    /// Read a live value from the sub-agent's runtime.
    fn get_variable(&self, py: Python<'_>, name: String) -> PyResult<PyValue> {
        self.drive(py, move |a| a.get_variable(&name))
    }

    /// Bind a value in the sub-agent's runtime.
    #[pyo3(signature = (name, value, description = String::new()))]
    fn set_variable(&self, py: Python<'_>, name: String, value: PyValue, description: String) -> PyResult<()> {
        self.drive(py, move |a| a.set_variable(&name, value, &description))
    }

    /// Names bound in the sub-agent's runtime.
    fn variables(&self, py: Python<'_>) -> PyResult<Vec<String>> {
        self.drive(py, |a| Ok(a.runtime().names()))
    }

    #[getter]
    fn name(&self) -> String {
        self.name.clone()
    }

    fn __repr__(&self) -> String {
        format!("<agent {}>", self.name)
    }
}

/// Inject `sub` into `meta`'s runtime as a live object named `name`.
pub fn register_subagent(meta: &mut Agent, name: &str, sub: SharedAgent) -> Result<(), CoordinationError> {
    if meta.runtime().contains(name) {
        return Err(CoordinationError::Collision(name.to_string()));
    }
    crate::runtime::ensure_python();
    let proxy = Python::attach(|py| {
        Py::new(
            py,
            AgentProxy {
                name: name.to_string(),
                agent: sub,
            },
        )
        .map(Py::into_any)
        .map_err(RuntimeError::py)
    })?;
    let desc = VariableDescriptor::new(
        name,
        "Agent",
        "Sub-agent. Methods: run(query) -> str, step(message) -> str, \
         get_variable(name), set_variable(name, value), variables() -> list[str]",
    );
    meta.add_variable(desc, proxy)?;
    Ok(())
}

fn reject_collision(dst: &RuntimeHandle, name: &str, overwrite: bool) -> Result<(), CoordinationError> {
    if !overwrite && dst.contains(name) {
        return Err(CoordinationError::Collision(name.to_string()));
    }
    Ok(())
}

fn bind_transferred(
    src: &RuntimeHandle,
    name: &str,
    dst: &RuntimeHandle,
    target: &str,
    value: PyValue,
) -> Result<NamespaceEntry, CoordinationError> {
    let injected = src
        .injected_manifest()
        .into_iter()
        .find(|d| d.name() == name);
    let entry = match injected {
        Some(InjectedDescriptor::Function(mut f)) => {
            f.name = target.to_string();
            dst.inject_function(f, value, true)?
        }
        Some(InjectedDescriptor::Variable(mut v)) => {
            v.name = target.to_string();
            dst.inject_variable(v, value, true)?
        }
        None => {
            let desc = describe_variable(target, &value, &format!("transferred from runtime {}", src.id()))?;
            dst.inject_variable(desc, value, true)?
        }
    };
    Ok(entry)
}

/// Move the live object `name` from `src` into `dst` by reference.
pub fn transfer(
    src: &RuntimeHandle,
    name: &str,
    dst: &RuntimeHandle,
    new_name: Option<&str>,
    overwrite: bool,
) -> Result<NamespaceEntry, CoordinationError> {
    let target = new_name.unwrap_or(name);
    let value = src.get_variable(name)?;
    reject_collision(dst, target, overwrite)?;
    bind_transferred(src, name, dst, target, value)
}

/// Serialize `name` out of `src`, for a runtime in another process.
pub fn export_for_transfer(src: &RuntimeHandle, name: &str) -> Result<SnapshotEntry, CoordinationError> {
    src.export_entry(name)?.map_err(|s| CoordinationError::Unserializable {
        name: s.name,
        reason: s.reason,
    })
}

/// Bind a serialized entry in `dst`. Values are copies: identity is lost, and
/// objects whose state does not survive serialization arrive altered.
pub fn import_transferred(
    entry: &SnapshotEntry,
    dst: &RuntimeHandle,
    new_name: Option<&str>,
    overwrite: bool,
) -> Result<NamespaceEntry, CoordinationError> {
    let target = new_name.unwrap_or(&entry.name);
    reject_collision(dst, target, overwrite)?;
    let value = decode_value(entry)?;
    let desc = describe_variable(target, &value, "transferred by copy")?;
    Ok(dst.inject_variable(desc, value, true)?)
}

/// Agents sharing one runtime.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BindingInfo {
    pub runtime_id: String,
    pub members: Vec<String>,
}

pub struct SharedRuntimeBinding {
    runtime: RuntimeHandle,
    members: Vec<(String, SharedAgent)>,
    gate: Arc<Gate>,
}

impl std::fmt::Debug for SharedRuntimeBinding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SharedRuntimeBinding")
            .field("runtime", &self.runtime.id())
            .field("members", &self.member_names())
            .finish()
    }
}

/// Move every agent onto `runtime`. Their tools and variables are re-injected
/// there and each cell runs under one shared gate.
pub fn bind_shared(
    members: Vec<(String, SharedAgent)>,
    runtime: RuntimeHandle,
) -> Result<SharedRuntimeBinding, CoordinationError> {
    let mut guards = Vec::with_capacity(members.len());
    for (name, agent) in &members {
        let guard = agent
            .try_lock()
            .map_err(|_| CoordinationError::Busy(name.clone()))?;
        if guard.gate().is_some() {
            return Err(CoordinationError::AlreadyBound(name.clone()));
        }
        guards.push(guard);
    }
    let gate = Arc::new(Gate::new());
    for guard in guards.iter_mut() {
        guard.rebind_runtime(runtime.clone())?;
        guard.set_gate(Some(gate.clone()));
    }
    drop(guards);
    Ok(SharedRuntimeBinding {
        runtime,
        members,
        gate,
    })
}

impl SharedRuntimeBinding {
    pub fn runtime(&self) -> &RuntimeHandle {
        &self.runtime
    }

    pub fn member_names(&self) -> Vec<String> {
        self.members.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn member(&self, name: &str) -> Option<SharedAgent> {
        self.members
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, a)| a.clone())
    }

    pub fn info(&self) -> BindingInfo {
        BindingInfo {
            runtime_id: self.runtime.id().to_string(),
            members: self.member_names(),
        }
    }

    /// Run one cell under the gate, as any member would.
    pub fn execute(&self, code: &str) -> Result<crate::runtime::ExecutionOutcome, CoordinationError> {
        let _ticket = self.gate.acquire();
        Ok(self.runtime.execute_cell(code)?)
    }

    /// Inject a value every member can reference from its next cell.
    pub fn inject(&self, desc: VariableDescriptor, value: PyValue) -> Result<NamespaceEntry, CoordinationError> {
        let _ticket = self.gate.acquire();
        Ok(self.runtime.inject_variable(desc, value, true)?)
    }

    pub fn get_variable(&self, name: &str) -> Result<PyValue, CoordinationError> {
        Ok(self.runtime.get_variable(name)?)
    }

    /// Detach every member from the gate. Members stay on the shared runtime.
    pub fn release(self) {
        for (_, agent) in &self.members {
            agent.lock().unwrap().set_gate(None);
        }
    }
}

