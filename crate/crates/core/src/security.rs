//! Static policy gate for code cells.
//!
//! Cells are parsed with the host interpreter's own grammar and every import,
//! call and attribute node is matched by name against the policy. Matching is
//! purely syntactic: `getattr(mod, "sys" + "tem")` is not caught, and
//! `__import__("os")` is caught only because `__import__` is a banned call.

use std::path::Path;

use pyo3::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{describe_pyerr, ensure_python, kernel, PyValue};
use crate::semantic::templates::{fill, SECURITY_FEEDBACK};

#[derive(Debug, Error, PartialEq)]
pub enum SecurityError {
    #[error("security feedback needs at least one violation")]
    NoViolations,
    #[error("policy: {0}")]
    Policy(String),
    #[error("python error: {0}")]
    Python(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleKind {
    ImportRule,
    FunctionRule,
    AttributeRule,
    SyntaxRule,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ImportRule => "ImportRule",
            Self::FunctionRule => "FunctionRule",
            Self::AttributeRule => "AttributeRule",
            Self::SyntaxRule => "SyntaxRule",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub kind: RuleKind,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecurityPolicy {
    pub banned_imports: Vec<String>,
    pub banned_calls: Vec<String>,
    pub banned_attributes: Vec<String>,
}

/// `os`, `subprocess`; `eval`, `exec`, `__import__`; `__builtins__`.
pub fn default_policy() -> SecurityPolicy {
    SecurityPolicy::new(
        ["os", "subprocess"],
        ["eval", "exec", "__import__"],
        ["__builtins__"],
    )
}

fn normalize(list: &mut Vec<String>) {
    let mut seen = std::collections::HashSet::new();
    list.retain(|s| {
        let t = s.trim();
        !t.is_empty() && seen.insert(t.to_string())
    });
    for s in list.iter_mut() {
        *s = s.trim().to_string();
    }
}

impl SecurityPolicy {
    pub fn new<I, C, A>(imports: I, calls: C, attributes: A) -> Self
    where
        I: IntoIterator,
        I::Item: Into<String>,
        C: IntoIterator,
        C::Item: Into<String>,
        A: IntoIterator,
        A::Item: Into<String>,
    {
        let mut p = Self {
            banned_imports: imports.into_iter().map(Into::into).collect(),
            banned_calls: calls.into_iter().map(Into::into).collect(),
            banned_attributes: attributes.into_iter().map(Into::into).collect(),
        };
        p.normalize();
        p
    }

    /// A policy that bans nothing; only syntax is checked.
    pub fn permissive() -> Self {
        Self::default()
    }

    /// Drop blank names and duplicates, keeping first occurrences.
    pub fn normalize(&mut self) {
        normalize(&mut self.banned_imports);
        normalize(&mut self.banned_calls);
        normalize(&mut self.banned_attributes);
    }

    pub fn rule_set(&self) -> Vec<Rule> {
        [
            (RuleKind::ImportRule, &self.banned_imports),
            (RuleKind::FunctionRule, &self.banned_calls),
            (RuleKind::AttributeRule, &self.banned_attributes),
        ]
        .into_iter()
        .filter(|(_, t)| !t.is_empty())
        .map(|(kind, targets)| Rule {
            kind,
            targets: targets.clone(),
        })
        .collect()
    }

    /// Parse a policy document; JSON when `json`, TOML otherwise.
    pub fn from_str(text: &str, json: bool) -> Result<Self, SecurityError> {
        let mut p: Self = if json {
            serde_json::from_str(text).map_err(|e| SecurityError::Policy(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| SecurityError::Policy(e.to_string()))?
        };
        p.normalize();
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SecurityError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SecurityError::Policy(format!("{}: {e}", path.display())))?;
        Self::from_str(&text, path.extension().is_some_and(|e| e == "json"))
    }

    fn import_banned(&self, module: &str) -> Option<&str> {
        self.banned_imports
            .iter()
            .find(|b| module == b.as_str() || module.strip_prefix(b.as_str()).is_some_and(|r| r.starts_with('.')))
            .map(String::as_str)
    }

    fn call_banned(&self, callee: &str) -> Option<&str> {
        let bare = callee
            .strip_prefix("builtins.")
            .or_else(|| callee.strip_prefix("__builtins__."))
            .unwrap_or(callee);
        self.banned_calls
            .iter()
            .find(|b| callee == b.as_str() || bare == b.as_str())
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_kind: RuleKind,
    pub offending_name: String,
    /// 1-based line and column.
    pub location: (usize, usize),
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxErrorInfo {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Parse result. Exactly one of `tree` / `syntax_error` is set.
#[derive(Debug)]
pub struct SyntaxReport {
    pub tree: Option<PyValue>,
    pub syntax_error: Option<SyntaxErrorInfo>,
}

impl SyntaxReport {
    pub fn ok(&self) -> bool {
        self.tree.is_some()
    }
}

/// Parse `source` with the host grammar. Syntax errors are values.
pub fn parse_source(source: &str) -> SyntaxReport {
    ensure_python();
    Python::attach(|py| {
        let parsed = kernel(py).and_then(|k| k.call_method1("parse_tree", (source,)));
        match parsed {
            Ok(tree) => SyntaxReport {
                tree: Some(tree.unbind()),
                syntax_error: None,
            },
            Err(e) => {
                let info = kernel(py)
                    .and_then(|k| k.call_method1("syntax_location", (e.value(py),)))
                    .and_then(|r| r.extract::<(usize, usize, String)>())
                    .map(|(line, column, message)| SyntaxErrorInfo {
                        line,
                        column,
                        message,
                    })
                    .unwrap_or_else(|_| SyntaxErrorInfo {
                        line: 1,
                        column: 1,
                        message: describe_pyerr(py, &e),
                    });
                SyntaxReport {
                    tree: None,
                    syntax_error: Some(info),
                }
            }
        }
    })
}

fn violation(kind: RuleKind, name: &str, line: usize, col: usize, what: &str) -> Violation {
    Violation {
        rule_kind: kind,
        offending_name: name.to_string(),
        location: (line, col),
        message: format!(
            "{}: {what} '{name}' is not allowed (line {line}, column {col})",
            kind.as_str()
        ),
    }
}

/// Every policy match in `source`, sorted by location. A syntax error yields
/// a single `SyntaxRule` violation.
pub fn check(source: &str, policy: &SecurityPolicy) -> Vec<Violation> {
    let report = parse_source(source);
    let tree = match (report.tree, report.syntax_error) {
        (Some(tree), _) => tree,
        (None, Some(err)) => {
            return vec![Violation {
                rule_kind: RuleKind::SyntaxRule,
                offending_name: String::new(),
                location: (err.line, err.column),
                message: format!(
                    "SyntaxRule: {} (line {}, column {})",
                    err.message, err.line, err.column
                ),
            }]
        }
        (None, None) => unreachable!("parse_source sets one side"),
    };
    let facts: Result<Vec<(String, String, usize, usize)>, String> = Python::attach(|py| {
        kernel(py)
            .and_then(|k| k.call_method1("tree_facts", (tree.bind(py),)))
            .and_then(|r| r.extract())
            .map_err(|e| describe_pyerr(py, &e))
    });
    let facts = match facts {
        Ok(f) => f,
        Err(reason) => {
            return vec![Violation {
                rule_kind: RuleKind::SyntaxRule,
                offending_name: String::new(),
                location: (1, 1),
                message: format!("SyntaxRule: source could not be analyzed: {reason} (line 1, column 1)"),
            }]
        }
    };
    let mut out = Vec::new();
    for (kind, name, line, col) in facts {
        match kind.as_str() {
            "import" => {
                if let Some(b) = policy.import_banned(&name) {
                    let mut v = violation(RuleKind::ImportRule, &name, line, col, "import of module");
                    v.offending_name = b.to_string();
                    out.push(v);
                }
            }
            "call" => {
                if let Some(b) = policy.call_banned(&name) {
                    out.push(violation(RuleKind::FunctionRule, b, line, col, "call to"));
                }
            }
            "ref" if policy.banned_attributes.contains(&name) => {
                out.push(violation(RuleKind::AttributeRule, &name, line, col, "access to"));
            }
            "attr" if policy.banned_attributes.contains(&name) => {
                out.push(violation(RuleKind::AttributeRule, &name, line, col, "attribute"));
            }
            _ => {}
        }
    }
    out.sort_by(|a, b| {
        a.location
            .cmp(&b.location)
            .then(a.rule_kind.cmp(&b.rule_kind))
            .then(a.offending_name.cmp(&b.offending_name))
    });
    out.dedup();
    out
}

/// One violation message per line; the `{error}` text of the feedback.
pub fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.message.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// The security-error feedback text for `violations`.
pub fn format_security_feedback(violations: &[Violation]) -> Result<String, SecurityError> {
    if violations.is_empty() {
        return Err(SecurityError::NoViolations);
    }
    Ok(fill(SECURITY_FEEDBACK, &[("error", &format_violations(violations))]))
}
