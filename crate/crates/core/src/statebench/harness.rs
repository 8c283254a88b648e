use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use pyo3::prelude::*;
use pyo3::types::PyType;
use serde::{Deserialize, Serialize};

use super::validate::{validate, ValidatorResult};
use super::{BenchCase, Category};
use crate::descriptor::derive_type_schema;
use crate::gateway::{ScriptedModel, UsageCounter};
use crate::orchestrator::{Agent, AgentConfig, AgentError, SessionResult};
use crate::runtime::{create_runtime, RuntimeConfig};

/// Builds a fresh agent for each case.
pub type AgentFactory = dyn Fn(&BenchCase) -> Result<Agent, AgentError> + Sync;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    /// 1-based.
    pub index: usize,
    pub query: String,
    pub final_message: String,
    pub validation: ValidatorResult,
    /// Usage of this turn's model calls.
    pub usage: UsageCounter,
    /// Usage of the case up to and including this turn.
    pub cumulative: UsageCounter,
    pub error: Option<String>,
}

impl TurnResult {
    pub fn passed(&self) -> bool {
        self.validation.passed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub category: Category,
    pub turns: Vec<TurnResult>,
    pub usage: UsageCounter,
    /// Set when the case could not run here, e.g. a missing module.
    pub skipped: Option<String>,
    /// Set when the agent aborted; later turns are marked failed.
    pub aborted: Option<String>,
}

impl CaseResult {
    pub fn queries(&self) -> usize {
        self.turns.len()
    }

    pub fn passed(&self) -> usize {
        self.turns.iter().filter(|t| t.passed()).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.turns.is_empty() {
            0.0
        } else {
            self.passed() as f64 / self.turns.len() as f64
        }
    }

    fn skipped(case: &BenchCase, reason: String) -> Self {
        Self {
            id: case.id.clone(),
            category: case.category,
            turns: Vec::new(),
            usage: UsageCounter::default(),
            skipped: Some(reason),
            aborted: None,
        }
    }
}

fn missing_modules(case: &BenchCase) -> Vec<String> {
    if case.requires.is_empty() {
        return Vec::new();
    }
    crate::runtime::ensure_python();
    Python::attach(|py| {
        let util = py.import("importlib.util").ok();
        case.requires
            .iter()
            .filter(|m| {
                util.as_ref()
                    .and_then(|u| u.call_method1("find_spec", (m.as_str(),)).ok())
                    .is_none_or(|spec| spec.is_none())
            })
            .cloned()
            .collect()
    })
}

/// Run the setup and describe what it created to the agent.
fn seed(agent: &mut Agent, case: &BenchCase) -> Result<(), String> {
    if case.setup_source.trim().is_empty() {
        return Ok(());
    }
    let before = agent.runtime().names();
    let out = agent
        .runtime()
        .execute_cell(&case.setup_source)
        .map_err(|e| e.to_string())?;
    if let Some(err) = out.error {
        return Err(format!("setup failed: {}: {}", err.exception, err.message));
    }
    for name in agent.runtime().names() {
        if before.contains(&name) {
            continue;
        }
        let value = agent.runtime().get_variable(&name).map_err(|e| e.to_string())?;
        let (is_module, is_class) = Python::attach(|py| {
            let v = value.bind(py);
            (
                v.is_instance_of::<pyo3::types::PyModule>(),
                v.is_instance_of::<PyType>(),
            )
        });
        if is_module {
            continue;
        }
        if is_class {
            if let Ok(schema) = derive_type_schema(&value) {
                agent.add_type(schema).map_err(|e| e.to_string())?;
            }
            continue;
        }
        let desc = case.describe.get(&name).map(String::as_str).unwrap_or("");
        agent
            .set_variable(&name, value, desc)
            .map_err(|e| format!("describing {name}: {e}"))?;
    }
    Ok(())
}

fn session_error(result: &Result<SessionResult, AgentError>) -> Option<String> {
    match result {
        Ok(r) if r.is_aborted() => Some(r.final_message().to_string()),
        Ok(_) => None,
        Err(e) => Some(e.to_string()),
    }
}

/// Drive one case: setup first, then each query, validating right after it.
/// Later turns run even when earlier ones fail.
pub fn run_case(case: &BenchCase, factory: &AgentFactory) -> CaseResult {
    let missing = missing_modules(case);
    if !missing.is_empty() {
        return CaseResult::skipped(case, format!("missing modules: {}", missing.join(", ")));
    }
    let mut result = CaseResult {
        id: case.id.clone(),
        category: case.category,
        turns: Vec::with_capacity(case.turns.len()),
        usage: UsageCounter::default(),
        skipped: None,
        aborted: None,
    };
    let mut agent = match factory(case) {
        Ok(a) => Some(a),
        Err(e) => {
            result.aborted = Some(format!("agent construction failed: {e}"));
            None
        }
    };
    if let Some(a) = agent.as_mut() {
        if let Err(e) = seed(a, case) {
            result.aborted = Some(e);
        }
    }
    for (i, turn) in case.turns.iter().enumerate() {
        let index = i + 1;
        let (Some(a), None) = (agent.as_mut(), result.aborted.as_ref()) else {
            let reason = format!("not run: {}", result.aborted.as_deref().unwrap_or("no agent"));
            result.turns.push(TurnResult {
                index,
                query: turn.query.clone(),
                final_message: String::new(),
                validation: ValidatorResult::failed(index, &reason),
                usage: UsageCounter::default(),
                cumulative: result.usage,
                error: Some(reason),
            });
            continue;
        };
        let session = if i == 0 || turn.new_conversation {
            a.run(&turn.query)
        } else {
            a.step(&turn.query)
        };
        let usage = match &session {
            Ok(r) => r.usage,
            Err(AgentError::Fatal { partial, .. }) => partial.usage,
            Err(_) => UsageCounter::default(),
        };
        result.usage = result.usage.merged(&usage);
        let error = session_error(&session);
        let final_message = session
            .as_ref()
            .map(|r| r.final_message().to_string())
            .unwrap_or_default();
        let mut validation = match &error {
            Some(reason) => ValidatorResult::failed(index, reason),
            None => validate(a.runtime(), &turn.validator),
        };
        validation.turn_index = index;
        if let Some(reason) = &error {
            result.aborted = Some(reason.clone());
        }
        result.turns.push(TurnResult {
            index,
            query: turn.query.clone(),
            final_message,
            validation,
            usage,
            cumulative: result.usage,
            error,
        });
    }
    result
}

/// Run cases on up to `jobs` threads; results keep the input order.
pub fn run_suite(cases: &[BenchCase], factory: &AgentFactory, jobs: usize) -> Vec<CaseResult> {
    let jobs = jobs.clamp(1, cases.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CaseResult>>> = cases.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(case) = cases.get(i) else { break };
                *slots[i].lock().unwrap() = Some(run_case(case, factory));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every case ran"))
        .collect()
}

/// A backend that answers each turn with the case's reference code, then
/// closes the turn with a short final answer.
pub fn oracle_backend(case: &BenchCase) -> Result<ScriptedModel, AgentError> {
    let mut script = Vec::with_capacity(case.turns.len() * 2);
    for (i, t) in case.turns.iter().enumerate() {
        let code = t
            .oracle
            .as_deref()
            .ok_or_else(|| AgentError::Config(format!("case {:?} turn {} has no oracle code", case.id, i + 1)))?;
        script.push(format!("```python\n{}\n```", code.trim_end()));
        script.push(format!("Turn {} complete.", i + 1));
    }
    Ok(ScriptedModel::new(script))
}

/// Factory for oracle-driven agents on fresh default runtimes.
pub fn oracle_factory(config: AgentConfig) -> impl Fn(&BenchCase) -> Result<Agent, AgentError> + Sync {
    move |case| {
        let backend = Arc::new(oracle_backend(case)?);
        let runtime = create_runtime(RuntimeConfig::default())?;
        Agent::new(config.clone(), runtime, backend, Vec::new(), Vec::new(), Vec::new())
    }
}

