//! The conversation side of an agent: system prompt, history, parsing model
//! responses into actions, and turning cell outcomes into feedback.

pub mod templates;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::ContextBundle;
use crate::gateway::estimate_tokens;
use crate::runtime::{ErrorKind, ExecutionOutcome};
use crate::security::{format_violations, Violation};

pub use templates::{fill, PromptTemplateSet};

/// Default shaping limit, in characters.
pub const DEFAULT_MAX_OUTPUT: usize = 4000;

#[derive(Debug, Error, PartialEq)]
pub enum SemanticError {
    #[error("template {template} is missing placeholder {placeholder}")]
    Template {
        template: String,
        placeholder: String,
    },
    #[error("template overrides: {0}")]
    Config(String),
    #[error("cannot append a {got:?} message after a {last:?} message")]
    Ordering { last: Option<Role>, got: Role },
    #[error("{0:?} messages must not be empty")]
    EmptyContent(Role),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Append-only message list that starts with the system prompt and then
/// alternates user / assistant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationHistory {
    messages: Vec<ChatMessage>,
    chars: usize,
    token_estimate: u64,
}

impl ConversationHistory {
    pub fn new(system: ChatMessage) -> Result<Self, SemanticError> {
        if system.role != Role::System {
            return Err(SemanticError::Ordering {
                last: None,
                got: system.role,
            });
        }
        let chars = system.content.chars().count();
        Ok(Self {
            token_estimate: estimate_tokens(&system.content),
            messages: vec![system],
            chars,
        })
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last_role(&self) -> Option<Role> {
        self.messages.last().map(|m| m.role)
    }

    /// Estimated tokens of the whole history, counted as one prompt.
    pub fn token_estimate(&self) -> u64 {
        self.token_estimate
    }

    pub fn append(&mut self, message: ChatMessage) -> Result<(), SemanticError> {
        let last = self.last_role();
        let ok = matches!(
            (last, message.role),
            (Some(Role::System), Role::User) | (Some(Role::User), Role::Assistant) | (Some(Role::Assistant), Role::User)
        );
        if !ok {
            return Err(SemanticError::Ordering {
                last,
                got: message.role,
            });
        }
        if message.content.is_empty() {
            return Err(SemanticError::EmptyContent(message.role));
        }
        self.chars += message.content.chars().count();
        self.token_estimate = self.chars.div_ceil(4) as u64;
        self.messages.push(message);
        Ok(())
    }
}

/// Functional form of [`ConversationHistory::append`].
pub fn append(
    mut history: ConversationHistory,
    message: ChatMessage,
) -> Result<ConversationHistory, SemanticError> {
    history.append(message)?;
    Ok(history)
}

/// Assemble the system message from the templates and context blocks.
pub fn build_system_prompt(
    templates: &PromptTemplateSet,
    bundle: &ContextBundle,
    current_time: DateTime<Utc>,
    additional_context: &str,
) -> Result<ChatMessage, SemanticError> {
    templates.validate()?;
    let time = current_time.format("%Y-%m-%d %H:%M:%S").to_string();
    let instructions = templates.rendered_instructions();
    let content = fill(
        &templates.system_prompt,
        &[
            ("agent_identity", &templates.agent_identity),
            ("current_time", &time),
            ("functions", &bundle.functions_block),
            ("variables", &bundle.variables_block),
            ("types", &bundle.types_block),
            ("instructions", &instructions),
            ("additional_context", additional_context),
        ],
    );
    Ok(ChatMessage::system(content))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Code,
    FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionDiagnostic {
    /// The response held several code blocks; only the first was taken.
    MultipleBlocks { count: usize },
    /// The first code block was never closed.
    UnclosedFence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<ActionDiagnostic>,
}

struct Block {
    code: String,
    closed: bool,
}

fn is_language_tag(info: &str) -> bool {
    !info.is_empty()
        && info
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '+' | '.'))
}

/// Code blocks in `response`: those tagged with `identifier` and untagged
/// ones. Blocks tagged with another language are skipped.
fn code_blocks(response: &str, identifier: &str) -> Vec<Block> {
    const FENCE: &str = "```";
    let mut blocks = Vec::new();
    let mut rest = response;
    while let Some(open) = rest.find(FENCE) {
        let body_start = &rest[open + FENCE.len()..];
        let (content, closed, next) = match body_start.find(FENCE) {
            Some(end) => (&body_start[..end], true, &body_start[end + FENCE.len()..]),
            None => (body_start, false, ""),
        };
        rest = next;
        let code = match content.split_once('\n') {
            Some((info, body)) => {
                let info = info.trim();
                if info.eq_ignore_ascii_case(identifier) || info.is_empty() {
                    body
                } else if is_language_tag(info) {
                    continue;
                } else {
                    content
                }
            }
            None => content.trim(),
        };
        let code = code.strip_suffix('\n').unwrap_or(code);
        let code = code.strip_suffix('\r').unwrap_or(code);
        if code.trim().is_empty() {
            continue;
        }
        blocks.push(Block {
            code: code.to_string(),
            closed,
        });
    }
    blocks
}

/// Classify a model response. Never fails.
pub fn extract_action(response: &str, identifier: &str) -> Action {
    let blocks = code_blocks(response, identifier);
    let Some(first) = blocks.first() else {
        return Action {
            kind: ActionKind::FinalAnswer,
            code: None,
            answer: Some(response.to_string()),
            raw_response: response.to_string(),
            diagnostics: Vec::new(),
        };
    };
    let mut diagnostics = Vec::new();
    if blocks.len() > 1 {
        diagnostics.push(ActionDiagnostic::MultipleBlocks {
            count: blocks.len(),
        });
    }
    if !first.closed {
        diagnostics.push(ActionDiagnostic::UnclosedFence);
    }
    Action {
        kind: ActionKind::Code,
        code: Some(first.code.clone()),
        answer: None,
        raw_response: response.to_string(),
        diagnostics,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Output,
    SizeError,
    SecurityError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapedObservation {
    pub kind: ObservationKind,
    pub text: String,
    /// Characters of combined output before shaping.
    pub raw_length: usize,
    /// The limit the output was shaped against.
    pub limit: usize,
}

fn push_part(acc: &mut String, part: &str) {
    if part.is_empty() {
        return;
    }
    if !acc.is_empty() && !acc.ends_with('\n') {
        acc.push('\n');
    }
    acc.push_str(part);
}

/// stdout, then stderr, then the error report, as one text; plus the number
/// of characters the capture cap dropped.
fn combined_output(outcome: &ExecutionOutcome) -> (String, usize) {
    let mut text = String::new();
    push_part(&mut text, &outcome.stdout);
    push_part(&mut text, &outcome.stderr);
    if let Some(err) = &outcome.error {
        let report = match err.kind {
            ErrorKind::Timeout => format!("TimeoutError: {}", err.message),
            _ => err.traceback.clone(),
        };
        push_part(&mut text, &report);
    }
    let dropped = outcome
        .stdout_chars
        .saturating_sub(outcome.stdout.chars().count())
        + outcome
            .stderr_chars
            .saturating_sub(outcome.stderr.chars().count());
    (text, dropped)
}

/// Pass short output through verbatim; replace long output with a size error.
pub fn shape_observation(outcome: &ExecutionOutcome, max_length: usize) -> ShapedObservation {
    let (text, dropped) = combined_output(outcome);
    let raw_length = text.chars().count() + dropped;
    if raw_length <= max_length {
        let text = text.strip_suffix('\n').unwrap_or(&text).to_string();
        ShapedObservation {
            kind: ObservationKind::Output,
            text,
            raw_length,
            limit: max_length,
        }
    } else {
        ShapedObservation {
            kind: ObservationKind::SizeError,
            text: size_error_text(templates::TRUNCATION_FEEDBACK, raw_length, max_length),
            raw_length,
            limit: max_length,
        }
    }
}

fn size_error_text(template: &str, length: usize, limit: usize) -> String {
    fill(
        template,
        &[
            ("output_length", &length.to_string()),
            ("max_length", &limit.to_string()),
        ],
    )
}

/// Observation for a cell the policy blocked.
pub fn security_observation(violations: &[Violation]) -> ShapedObservation {
    let text = format_violations(violations);
    ShapedObservation {
        kind: ObservationKind::SecurityError,
        raw_length: text.chars().count(),
        text,
        limit: 0,
    }
}

/// The user message fed back to the model after a turn.
pub fn make_feedback(shaped: &ShapedObservation, templates: &PromptTemplateSet) -> ChatMessage {
    let content = match shaped.kind {
        ObservationKind::Output => fill(
            &templates.execution_feedback,
            &[("execution_output", &shaped.text)],
        ),
        ObservationKind::SizeError => {
            size_error_text(&templates.truncation_feedback, shaped.raw_length, shaped.limit)
        }
        ObservationKind::SecurityError => {
            fill(&templates.security_feedback, &[("error", &shaped.text)])
        }
    };
    ChatMessage::user(content)
}
