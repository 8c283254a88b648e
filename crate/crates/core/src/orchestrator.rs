//! The agent turn loop.
//!
//! Each turn samples a response, and if it carries a code block, checks the
//! block against the security policy, runs it in the runtime, shapes the
//! output and feeds it back. A response without code is the final answer.
//! After `max_turns` model calls the session ends with "Max steps reached".

use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyTuple};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::Gate;
use crate::descriptor::{
    describe_variable, render_context, ContextBundle, DescriptorError, FunctionDescriptor,
    TypeSchema, VariableDescriptor,
};
use crate::gateway::{
    default_temperature, GatewayError, ModelBackend, ModelRequest, Usage, UsageCounter,
};
use crate::runtime::{
    current_cell, render_args, share, ExecutionOutcome, PyValue, RuntimeError, RuntimeHandle,
};
use crate::security::{check, default_policy, SecurityPolicy, Violation};
use crate::semantic::{
    build_system_prompt, extract_action, make_feedback, security_observation, shape_observation,
    Action, ActionDiagnostic, ActionKind, ChatMessage, ConversationHistory, PromptTemplateSet,
    Role, SemanticError, ShapedObservation, DEFAULT_MAX_OUTPUT,
};

pub const MAX_STEPS_MESSAGE: &str = "Max steps reached";
pub const DEFAULT_MAX_TURNS: usize = 10;
pub const TRANSCRIPT_VERSION: &str = "cellagent-transcript/1";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("duplicate injected name {0:?}")]
    DuplicateName(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("kernel failure: {reason}")]
    Fatal {
        reason: String,
        partial: Box<SessionResult>,
    },
    #[error("transcript: {0}")]
    Transcript(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ModelParams {
    pub fn for_model(model_id: impl Into<String>) -> Self {
        let model_id = model_id.into();
        Self {
            temperature: default_temperature(&model_id),
            model_id,
            max_output_tokens: 4096,
        }
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::for_model("deepseek-v3.2")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub max_turns: usize,
    /// Shaping limit in characters.
    pub max_output: usize,
    pub policy: SecurityPolicy,
    pub templates: PromptTemplateSet,
    pub model: ModelParams,
    pub additional_context: String,
    /// Fixed prompt time; the wall clock when unset.
    pub current_time: Option<DateTime<Utc>>,
    /// Start each `step` with a fresh history (the runtime is kept).
    pub fresh_history_per_conversation: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_turns: DEFAULT_MAX_TURNS,
            max_output: DEFAULT_MAX_OUTPUT,
            policy: default_policy(),
            templates: PromptTemplateSet::default(),
            model: ModelParams::default(),
            additional_context: String::new(),
            current_time: None,
            fresh_history_per_conversation: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_turns == 0 {
            return Err(AgentError::Config("max_turns must be at least 1".into()));
        }
        if self.max_output == 0 {
            return Err(AgentError::Config("max_output must be at least 1".into()));
        }
        self.templates.validate()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| AgentError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| AgentError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub index: usize,
    pub response: String,
    pub action: Action,
    pub violations: Vec<Violation>,
    pub outcome: Option<ExecutionOutcome>,
    pub observation: Option<ShapedObservation>,
    /// The feedback message sent back to the model, if any.
    pub feedback: Option<String>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum Final {
    Answer(String),
    MaxSteps,
    Aborted(String),
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub final_: Final,
    pub turns: Vec<TurnRecord>,
    /// Usage of the model calls made in this session.
    pub usage: UsageCounter,
    pub runtime: RuntimeHandle,
}

impl SessionResult {
    /// The answer text, or the fixed message when the turn budget ran out.
    pub fn final_message(&self) -> &str {
        match &self.final_ {
            Final::Answer(a) => a,
            Final::MaxSteps => MAX_STEPS_MESSAGE,
            Final::Aborted(r) => r,
        }
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self.final_, Final::Aborted(_))
    }
}

pub struct Agent {
    config: AgentConfig,
    runtime: RuntimeHandle,
    backend: Arc<dyn ModelBackend>,
    functions: Vec<FunctionDescriptor>,
    variables: Vec<VariableDescriptor>,
    types: Vec<TypeSchema>,
    system: ChatMessage,
    history: ConversationHistory,
    total_usage: UsageCounter,
    gate: Option<Arc<Gate>>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("runtime", &self.runtime.id())
            .field("backend", &self.backend.describe())
            .field("history_len", &self.history.len())
            .finish_non_exhaustive()
    }
}

/// Inject `tools` and `variables` into `runtime` and install the system prompt.
pub fn new_agent(
    config: AgentConfig,
    runtime: RuntimeHandle,
    backend: Arc<dyn ModelBackend>,
    tools: Vec<(FunctionDescriptor, PyValue)>,
    variables: Vec<(VariableDescriptor, PyValue)>,
) -> Result<Agent, AgentError> {
    Agent::new(config, runtime, backend, tools, variables, Vec::new())
}

impl Agent {
    pub fn new(
        config: AgentConfig,
        runtime: RuntimeHandle,
        backend: Arc<dyn ModelBackend>,
        tools: Vec<(FunctionDescriptor, PyValue)>,
        variables: Vec<(VariableDescriptor, PyValue)>,
        types: Vec<TypeSchema>,
    ) -> Result<Agent, AgentError> {
        config.validate()?;
        let mut seen = std::collections::HashSet::new();
        for name in tools
            .iter()
            .map(|(d, _)| d.name.as_str())
            .chain(variables.iter().map(|(d, _)| d.name.as_str()))
        {
            if !seen.insert(name) {
                return Err(AgentError::DuplicateName(name.to_string()));
            }
        }
        let functions: Vec<FunctionDescriptor> = tools.iter().map(|(d, _)| d.clone()).collect();
        let var_descs: Vec<VariableDescriptor> = variables.iter().map(|(d, _)| d.clone()).collect();
        let system = Self::render_system(&config, &functions, &var_descs, &types)?;
        for (desc, f) in tools {
            runtime.inject_function(desc, f, true)?;
        }
        for (desc, v) in variables {
            runtime.inject_variable(desc, v, true)?;
        }
        Ok(Agent {
            history: ConversationHistory::new(system.clone())?,
            system,
            config,
            runtime,
            backend,
            functions,
            variables: var_descs,
            types,
            total_usage: UsageCounter::default(),
            gate: None,
        })
    }

    fn render_system(
        config: &AgentConfig,
        functions: &[FunctionDescriptor],
        variables: &[VariableDescriptor],
        types: &[TypeSchema],
    ) -> Result<ChatMessage, AgentError> {
        let bundle = render_context(functions, variables, types)?;
        let now = config.current_time.unwrap_or_else(Utc::now);
        Ok(build_system_prompt(
            &config.templates,
            &bundle,
            now,
            &config.additional_context,
        )?)
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn runtime(&self) -> &RuntimeHandle {
        &self.runtime
    }

    pub fn history(&self) -> &ConversationHistory {
        &self.history
    }

    pub fn system_prompt(&self) -> &str {
        &self.system.content
    }

    pub fn context_bundle(&self) -> ContextBundle {
        render_context(&self.functions, &self.variables, &self.types)
            .expect("descriptor names were checked on insertion")
    }

    /// Usage over every session this agent has run.
    pub fn total_usage(&self) -> UsageCounter {
        self.total_usage
    }

    pub fn function_descriptors(&self) -> &[FunctionDescriptor] {
        &self.functions
    }

    pub fn variable_descriptors(&self) -> &[VariableDescriptor] {
        &self.variables
    }

    pub(crate) fn set_gate(&mut self, gate: Option<Arc<Gate>>) {
        self.gate = gate;
    }

    pub(crate) fn gate(&self) -> Option<&Arc<Gate>> {
        self.gate.as_ref()
    }

    /// Point the agent at another runtime, re-injecting its own tools and
    /// variables there.
    pub(crate) fn rebind_runtime(&mut self, runtime: RuntimeHandle) -> Result<(), AgentError> {
        let manifest = self.runtime.injected_manifest();
        for desc in manifest {
            let value = self.runtime.get_variable(desc.name())?;
            match desc {
                crate::runtime::InjectedDescriptor::Function(f) => {
                    runtime.inject_function(f, value, true)?;
                }
                crate::runtime::InjectedDescriptor::Variable(v) => {
                    runtime.inject_variable(v, value, true)?;
                }
            }
        }
        self.runtime = runtime;
        Ok(())
    }

    /// Rebuild the system prompt. Takes effect for the next conversation.
    fn refresh_system(&mut self) -> Result<(), AgentError> {
        self.system = Self::render_system(&self.config, &self.functions, &self.variables, &self.types)?;
        Ok(())
    }

    /// Add a type schema to the prompt context.
    pub fn add_type(&mut self, schema: TypeSchema) -> Result<(), AgentError> {
        self.types.retain(|t| t.type_name != schema.type_name);
        self.types.push(schema);
        self.refresh_system()
    }

    /// Inject a variable and describe it in the prompt context.
    pub fn add_variable(&mut self, desc: VariableDescriptor, value: PyValue) -> Result<(), AgentError> {
        self.runtime.inject_variable(desc.clone(), value, true)?;
        self.variables.retain(|v| v.name != desc.name);
        self.variables.push(desc);
        self.refresh_system()
    }

    /// Inject a function and describe it in the prompt context.
    pub fn add_function(&mut self, desc: FunctionDescriptor, callable: PyValue) -> Result<(), AgentError> {
        self.runtime.inject_function(desc.clone(), callable, true)?;
        self.functions.retain(|f| f.name != desc.name);
        self.functions.push(desc);
        self.refresh_system()
    }

    pub fn get_variable(&self, name: &str) -> Result<PyValue, AgentError> {
        Ok(self.runtime.get_variable(name)?)
    }

    /// Bind `value` in the agent's runtime as an injected variable.
    pub fn set_variable(&mut self, name: &str, value: PyValue, description: &str) -> Result<(), AgentError> {
        let desc = describe_variable(name, &value, description)?;
        self.add_variable(desc, value)
    }

    /// Start a new session for `query` with a fresh history.
    pub fn run(&mut self, query: &str) -> Result<SessionResult, AgentError> {
        if query.trim().is_empty() {
            return Err(AgentError::EmptyQuery);
        }
        self.history = ConversationHistory::new(self.system.clone())?;
        self.history.append(ChatMessage::user(query))?;
        self.turn_loop()
    }

    /// Continue the conversation with `message`. The runtime, and unless
    /// configured otherwise the history, carry over from earlier calls.
    pub fn step(&mut self, message: &str) -> Result<SessionResult, AgentError> {
        if self.config.fresh_history_per_conversation || self.history.len() <= 1 {
            return self.run(message);
        }
        if message.trim().is_empty() {
            return Err(AgentError::EmptyQuery);
        }
        if self.history.last_role() == Some(Role::User) {
            // The previous session ran out of turns on a feedback message.
            self.history.append(ChatMessage::assistant(MAX_STEPS_MESSAGE))?;
        }
        self.history.append(ChatMessage::user(message))?;
        self.turn_loop()
    }

    fn execute(&self, code: &str) -> Result<ExecutionOutcome, RuntimeError> {
        let _ticket = self.gate.as_ref().map(|g| g.acquire());
        self.runtime.execute_cell(code)
    }

    fn turn_loop(&mut self) -> Result<SessionResult, AgentError> {
        let mut turns = Vec::new();
        let mut usage = UsageCounter::default();
        let block_id = self.config.templates.block_identifier.clone();
        for index in 1..=self.config.max_turns {
            let request = ModelRequest {
                messages: self.history.messages().to_vec(),
                temperature: self.config.model.temperature,
                max_output_tokens: self.config.model.max_output_tokens,
                model_id: self.config.model.model_id.clone(),
            };
            let response = match crate::gateway::complete(self.backend.as_ref(), &request) {
                Ok(r) => r,
                Err(e) => return Ok(self.finish(Final::Aborted(abort_reason(&e)), turns, usage)),
            };
            usage.accumulate(response.usage);
            self.total_usage.accumulate(response.usage);
            if response.text.is_empty() {
                let reason = "model returned an empty response".to_string();
                return Ok(self.finish(Final::Aborted(reason), turns, usage));
            }
            let action = extract_action(&response.text, &block_id);
            self.history.append(ChatMessage::assistant(response.text.clone()))?;

            let mut record = TurnRecord {
                index,
                response: response.text.clone(),
                action: action.clone(),
                violations: Vec::new(),
                outcome: None,
                observation: None,
                feedback: None,
                usage: response.usage,
            };
            let Some(code) = action.code.as_deref().filter(|_| action.kind == ActionKind::Code) else {
                turns.push(record);
                return Ok(self.finish(Final::Answer(response.text), turns, usage));
            };

            let violations = check(code, &self.config.policy);
            let observation = if violations.is_empty() {
                let outcome = match self.execute(code) {
                    Ok(o) => o,
                    Err(e) => {
                        turns.push(record);
                        let partial = self.finish(Final::Aborted(e.to_string()), turns, usage);
                        return Err(AgentError::Fatal {
                            reason: e.to_string(),
                            partial: Box::new(partial),
                        });
                    }
                };
                let shaped = shape_observation(&outcome, self.config.max_output);
                record.outcome = Some(outcome);
                shaped
            } else {
                let shaped = security_observation(&violations);
                record.violations = violations;
                shaped
            };
            let feedback = make_feedback(&observation, &self.config.templates);
            record.feedback = Some(feedback.content.clone());
            record.observation = Some(observation);
            self.history.append(feedback)?;
            turns.push(record);
        }
        Ok(self.finish(Final::MaxSteps, turns, usage))
    }

    fn finish(&self, final_: Final, turns: Vec<TurnRecord>, usage: UsageCounter) -> SessionResult {
        SessionResult {
            final_,
            turns,
            usage,
            runtime: self.runtime.clone(),
        }
    }
}

fn abort_reason(e: &GatewayError) -> String {
    format!("backend failure: {e}")
}

/// One recorded call of an instrumented function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub function: String,
    pub arguments: String,
    /// Index of the cell the call came from, if any.
    pub cell_index: Option<u64>,
}

/// Shared, append-only record of instrumented calls.
#[derive(Debug, Clone, Default)]
pub struct InvocationLog {
    records: Arc<Mutex<Vec<InvocationRecord>>>,
}

impl InvocationLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> Vec<InvocationRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, record: InvocationRecord) {
        self.records.lock().unwrap().push(record);
    }
}

/// Callable wrapper that logs each call and then delegates.
#[pyclass(module = "cellagent", name = "Instrumented")]
pub struct Instrumented {
    inner: PyValue,
    name: String,
    log: InvocationLog,
}

#[pymethods]
impl Instrumented {
    #[pyo3(signature = (*args, **kwargs))]
    fn __call__(
        &self,
        py: Python<'_>,
        args: &Bound<'_, PyTuple>,
        kwargs: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<PyValue> {
        self.log.push(InvocationRecord {
            function: self.name.clone(),
            arguments: render_args(py, args, kwargs),
            cell_index: current_cell().map(|(_, i)| i),
        });
        self.inner.bind(py).call(args, kwargs).map(Bound::unbind)
    }

    #[getter(__wrapped__)]
    fn wrapped(&self, py: Python<'_>) -> PyValue {
        self.inner.clone_ref(py)
    }

    #[getter(__name__)]
    fn name(&self) -> String {
        self.name.clone()
    }

    #[getter(__doc__)]
    fn doc(&self, py: Python<'_>) -> PyResult<PyValue> {
        Ok(self.inner.bind(py).getattr("__doc__")?.unbind())
    }

    fn __repr__(&self) -> String {
        format!("<instrumented {}>", self.name)
    }
}

/// Wrap `callable` so every call is appended to `log` under `name`.
pub fn instrument(callable: &PyValue, log: &InvocationLog, name: &str) -> Result<PyValue, AgentError> {
    crate::runtime::ensure_python();
    Python::attach(|py| {
        if !callable.bind(py).is_callable() {
            return Err(AgentError::Runtime(RuntimeError::NotCallable(name.to_string())));
        }
        Py::new(
            py,
            Instrumented {
                inner: share(callable),
                name: name.to_string(),
                log: log.clone(),
            },
        )
        .map(|p| p.into_any())
        .map_err(|e| AgentError::Runtime(RuntimeError::py(e)))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub index: usize,
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<ActionDiagnostic>,
    #[serde(default)]
    pub violations: Vec<Violation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ShapedObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptTotals {
    pub steps: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

/// Deterministic record of a session: no timings, no runtime ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: String,
    #[serde(rename = "final")]
    pub final_: Final,
    pub final_message: String,
    pub turns: Vec<TranscriptTurn>,
    pub totals: TranscriptTotals,
}

impl Transcript {
    pub fn from_result(result: &SessionResult) -> Self {
        let turns = result
            .turns
            .iter()
            .map(|t| TranscriptTurn {
                index: t.index,
                role: Role::Assistant,
                content: t.response.clone(),
                code: t.action.code.clone(),
                diagnostics: t.action.diagnostics.clone(),
                violations: t.violations.clone(),
                observation: t.observation.clone(),
                feedback: t.feedback.clone(),
                usage: t.usage,
            })
            .collect();
        Self {
            version: TRANSCRIPT_VERSION.into(),
            final_: result.final_.clone(),
            final_message: result.final_message().to_string(),
            turns,
            totals: TranscriptTotals {
                steps: result.usage.steps,
                prompt_tokens: result.usage.prompt_tokens,
                completion_tokens: result.usage.completion_tokens,
                total_tokens: result.usage.total(),
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcripts serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, AgentError> {
        serde_json::from_str(text).map_err(|e| AgentError::Transcript(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path).map_err(|e| AgentError::Transcript(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// Write the session transcript as JSON.
pub fn export_transcript(result: &SessionResult, path: impl AsRef<Path>) -> Result<(), AgentError> {
    std::fs::write(path, Transcript::from_result(result).to_json())
        .map_err(|e| AgentError::Transcript(e.to_string()))
}
