//! Stateful-management benchmark: cases, validators, harness and report.
//!
//! A case seeds a runtime, then drives an agent through a list of queries.
//! After each query the harness inspects the live namespace directly; the
//! model's text is never parsed for the verdict.

mod harness;
mod report;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::security::{check, SecurityPolicy};

pub use harness::{
    oracle_backend, oracle_factory, run_case, run_suite, AgentFactory, CaseResult, TurnResult,
};
pub use report::{render_table, report, BenchReport, CaseRow, CategoryRow, UsageTotals};
pub use validate::{validate, AssertionOutcome, ValidatorResult};

/// Name under which the bundled suite is addressed from the command line.
pub const BUNDLED_SUITE: &str = "stateful";

#[derive(Debug, Error, PartialEq)]
pub enum BenchError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("case {case:?}, {field}: {reason}")]
    Schema {
        case: String,
        field: String,
        reason: String,
    },
    #[error("duplicate case id {0:?}")]
    DuplicateCase(String),
    #[error("no results to report")]
    NoResults,
}

fn schema(case: &str, field: impl Into<String>, reason: impl Into<String>) -> BenchError {
    BenchError::Schema {
        case: case.to_string(),
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Simple,
    Object,
    Scientific,
    MultiVariable,
    MultiTurn,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Self::Simple,
        Self::Object,
        Self::Scientific,
        Self::MultiVariable,
        Self::MultiTurn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Simple => "simple",
            Self::Object => "object",
            Self::Scientific => "scientific",
            Self::MultiVariable => "multi_variable",
            Self::MultiTurn => "multi_turn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    #[default]
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    /// `len(value) == expected`.
    Len,
    /// Element of a sequence, key of a mapping, or substring.
    Contains,
    /// Type name of the value.
    Type,
}

/// One step of a variable path such as `data['scores']['math']`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathSegment {
    Attr(String),
    Index(i64),
    Key(String),
    /// A zero-argument call, e.g. `stack.size()`.
    Call,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariablePath {
    pub root: String,
    pub segments: Vec<PathSegment>,
    pub text: String,
}

impl VariablePath {
    pub fn parse(text: &str) -> Result<Self, String> {
        let chars: Vec<char> = text.trim().chars().collect();
        let mut i = 0;
        let ident = |i: &mut usize| -> Option<String> {
            let start = *i;
            while *i < chars.len() && (chars[*i].is_alphanumeric() || chars[*i] == '_') {
                *i += 1;
            }
            let s: String = chars[start..*i].iter().collect();
            (!s.is_empty() && !s.starts_with(|c: char| c.is_ascii_digit())).then_some(s)
        };
        let root = ident(&mut i).ok_or_else(|| format!("{text:?} must start with a name"))?;
        let mut segments = Vec::new();
        while i < chars.len() {
            match chars[i] {
                '.' => {
                    i += 1;
                    let name = ident(&mut i).ok_or_else(|| format!("{text:?}: expected attribute after '.'"))?;
                    segments.push(PathSegment::Attr(name));
                }
                '(' => {
                    if chars.get(i + 1) != Some(&')') {
                        return Err(format!("{text:?}: only zero-argument calls are allowed"));
                    }
                    i += 2;
                    segments.push(PathSegment::Call);
                }
                '[' => {
                    let close = chars[i..]
                        .iter()
                        .position(|&c| c == ']')
                        .map(|p| p + i)
                        .ok_or_else(|| format!("{text:?}: unclosed '['"))?;
                    let inner: String = chars[i + 1..close].iter().collect();
                    let inner = inner.trim();
                    let quoted = inner.len() >= 2
                        && ((inner.starts_with('\'') && inner.ends_with('\''))
                            || (inner.starts_with('"') && inner.ends_with('"')));
                    if quoted {
                        segments.push(PathSegment::Key(inner[1..inner.len() - 1].to_string()));
                    } else {
                        let n = inner
                            .parse::<i64>()
                            .map_err(|_| format!("{text:?}: index {inner:?} is neither an integer nor a quoted key"))?;
                        segments.push(PathSegment::Index(n));
                    }
                    i = close + 1;
                }
                c => return Err(format!("{text:?}: unexpected {c:?}")),
            }
        }
        Ok(Self {
            root,
            segments,
            text: text.trim().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub path: VariablePath,
    pub cmp: Comparator,
    pub expected: serde_json::Value,
    /// Absolute tolerance for numbers; `None` means exact for integers and
    /// 1e-9 relative for reals.
    pub tolerance: Option<f64>,
}

impl Assertion {
    pub fn label(&self) -> String {
        format!("{} {:?} {}", self.path.text, self.cmp, self.expected).to_lowercase()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Validator {
    pub assertions: Vec<Assertion>,
    /// Code run on an isolated copy of the namespace; binds `passed` and
    /// optionally `message`.
    pub source: Option<String>,
    /// Names copied into the isolated namespace; all when `None`.
    pub names: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTurn {
    pub query: String,
    pub validator: Validator,
    /// Reference solution used by the oracle backend.
    pub oracle: Option<String>,
    /// Start a new conversation over the same runtime.
    pub new_conversation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub id: String,
    pub category: Category,
    pub description: String,
    pub setup_source: String,
    pub turns: Vec<BenchTurn>,
    /// Descriptions for names created by the setup.
    pub describe: BTreeMap<String, String>,
    /// Modules that must be importable for the case to run.
    pub requires: Vec<String>,
    pub tags: Vec<String>,
}

impl BenchCase {
    /// A copy whose oracle code for turn `turn` (1-based) is `code`.
    pub fn with_oracle_override(&self, turn: usize, code: &str) -> Self {
        let mut c = self.clone();
        if let Some(t) = turn.checked_sub(1).and_then(|i| c.turns.get_mut(i)) {
            t.oracle = Some(code.to_string());
        }
        c
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAssertion {
    path: String,
    #[serde(default)]
    cmp: Comparator,
    expected: serde_json::Value,
    tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    query: Option<String>,
    oracle: Option<String>,
    #[serde(default)]
    new_conversation: bool,
    #[serde(default, rename = "assert")]
    assertions: Vec<RawAssertion>,
    check: Option<String>,
    check_names: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    id: Option<String>,
    category: Option<String>,
    #[serde(default)]
    description: String,
    #[serde(default)]
    setup: String,
    #[serde(default)]
    describe: BTreeMap<String, String>,
    #[serde(default)]
    requires: Vec<String>,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    turns: Vec<RawTurn>,
}

/// Parse one case document. `origin` names the document in errors.
pub fn parse_case(text: &str, origin: &str) -> Result<BenchCase, BenchError> {
    if text.trim().is_empty() {
        return Err(schema(origin, "document", "empty"));
    }
    let raw: RawCase = toml::from_str(text).map_err(|e| schema(origin, "document", e.to_string()))?;
    let id = raw
        .id
        .filter(|s| !s.trim().is_empty())
        .ok_or_else(|| schema(origin, "id", "missing"))?;
    let category = raw
        .category
        .ok_or_else(|| schema(&id, "category", "missing"))
        .and_then(|c| Category::parse(&c).ok_or_else(|| schema(&id, "category", format!("unknown category {c:?}"))))?;
    if raw.turns.is_empty() {
        return Err(schema(&id, "turns", "a case needs at least one turn"));
    }
    if !raw.setup.trim().is_empty() {
        let violations = check(&raw.setup, &SecurityPolicy::permissive());
        if let Some(v) = violations.first() {
            return Err(schema(&id, "setup", v.message.clone()));
        }
    }
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (n, t) in raw.turns.into_iter().enumerate() {
        let field = |f: &str| format!("turn {}: {f}", n + 1);
        let query = t
            .query
            .filter(|q| !q.trim().is_empty())
            .ok_or_else(|| schema(&id, field("query"), "missing"))?;
        if t.assertions.is_empty() && t.check.is_none() {
            return Err(schema(&id, field("validator"), "needs `assert` entries or a `check`"));
        }
        let mut assertions = Vec::with_capacity(t.assertions.len());
        for (k, a) in t.assertions.into_iter().enumerate() {
            let afield = |f: &str| field(&format!("assert[{k}].{f}"));
            let path = VariablePath::parse(&a.path).map_err(|e| schema(&id, afield("path"), e))?;
            if let Some(tol) = a.tolerance {
                if tol.is_nan() || tol < 0.0 {
                    return Err(schema(&id, afield("tolerance"), "must be >= 0"));
                }
            }
            if a.cmp == Comparator::Len && a.expected.as_u64().is_none() {
                return Err(schema(&id, afield("expected"), "len needs a non-negative integer"));
            }
            if matches!(a.cmp, Comparator::Lt | Comparator::Le | Comparator::Gt | Comparator::Ge)
                && !a.expected.is_number()
            {
                return Err(schema(&id, afield("expected"), "ordering needs a number"));
            }
            if a.cmp == Comparator::Type && !a.expected.is_string() {
                return Err(schema(&id, afield("expected"), "type needs a string"));
            }
            assertions.push(Assertion {
                path,
                cmp: a.cmp,
                expected: a.expected,
                tolerance: a.tolerance,
            });
        }
        turns.push(BenchTurn {
            query,
            validator: Validator {
                assertions,
                source: t.check,
                names: t.check_names,
            },
            oracle: t.oracle,
            new_conversation: t.new_conversation,
        });
    }
    Ok(BenchCase {
        id,
        category,
        description: raw.description,
        setup_source: raw.setup,
        turns,
        describe: raw.describe,
        requires: raw.requires,
        tags: raw.tags,
    })
}

fn check_unique(cases: &[BenchCase]) -> Result<(), BenchError> {
    let mut seen = std::collections::HashSet::new();
    for c in cases {
        if !seen.insert(c.id.as_str()) {
            return Err(BenchError::DuplicateCase(c.id.clone()));
        }
    }
    Ok(())
}

/// Load a case file, or every `*.toml` in a directory in file-name order.
pub fn load_suite(path: impl AsRef<Path>) -> Result<Vec<BenchCase>, BenchError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| BenchError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(io)? {
            let p = entry.map_err(io)?.path();
            if p.extension().is_some_and(|e| e == "toml") {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(schema(&path.display().to_string(), "suite", "no case files"));
        }
    } else {
        files.push(path.to_path_buf());
    }
    let mut cases = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| BenchError::Io {
            path: f.display().to_string(),
            reason: e.to_string(),
        })?;
        cases.push(parse_case(&text, &f.display().to_string())?);
    }
    check_unique(&cases)?;
    Ok(cases)
}

const BUNDLED: &[(&str, &str)] = &[
    ("string_split_join", include_str!("../../suites/stateful/string_split_join.toml")),
    ("dict_nested", include_str!("../../suites/stateful/dict_nested.toml")),
    ("stack_advanced", include_str!("../../suites/stateful/stack_advanced.toml")),
    ("cart_quantity", include_str!("../../suites/stateful/cart_quantity.toml")),
    ("dataframe_merge", include_str!("../../suites/stateful/dataframe_merge.toml")),
    ("dataframe_pivot", include_str!("../../suites/stateful/dataframe_pivot.toml")),
    ("ndarray_reshape", include_str!("../../suites/stateful/ndarray_reshape.toml")),
    ("volume_filter", include_str!("../../suites/stateful/volume_filter.toml")),
    ("startup_journey", include_str!("../../suites/stateful/startup_journey.toml")),
    ("weekend_party", include_str!("../../suites/stateful/weekend_party.toml")),
    ("carol_debt_paydown", include_str!("../../suites/stateful/carol_debt_paydown.toml")),
];

/// The suite compiled into the binary.
pub fn bundled_suite() -> Result<Vec<BenchCase>, BenchError> {
    let cases = BUNDLED
        .iter()
        .map(|(name, text)| parse_case(text, name))
        .collect::<Result<Vec<_>, _>>()?;
    check_unique(&cases)?;
    Ok(cases)
}

/// `path` as a suite location, or the bundled suite for [`BUNDLED_SUITE`].
pub fn resolve_suite(path: &str) -> Result<Vec<BenchCase>, BenchError> {
    if path == BUNDLED_SUITE && !Path::new(path).exists() {
        return bundled_suite();
    }
    if !Path::new(path).exists() {
        return Err(BenchError::Io {
            path: path.to_string(),
            reason: "no such file or directory".into(),
        });
    }
    load_suite(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_parse() {
        let p = VariablePath::parse("data['scores'][\"math\"]").unwrap();
        assert_eq!(p.root, "data");
        assert_eq!(
            p.segments,
            vec![PathSegment::Key("scores".into()), PathSegment::Key("math".into())]
        );
        let p = VariablePath::parse("cart.items[0].get()").unwrap();
        assert_eq!(
            p.segments,
            vec![
                PathSegment::Attr("items".into()),
                PathSegment::Index(0),
                PathSegment::Attr("get".into()),
                PathSegment::Call
            ]
        );
        assert!(VariablePath::parse("x(1)").is_err());
        assert!(VariablePath::parse("1x").is_err());
        assert!(VariablePath::parse("x[").is_err());
        assert!(VariablePath::parse("x[-1]").is_ok());
    }

    #[test]
    fn empty_document_is_a_schema_error() {
        assert!(matches!(parse_case("  \n", "f.toml"), Err(BenchError::Schema { .. })));
    }

    #[test]
    fn missing_validator_names_the_turn() {
        let doc = "id = 'c'\ncategory = 'simple'\n[[turns]]\nquery = 'q'\nassert = [{ path = 'x', expected = 1 }]\n[[turns]]\nquery = 'q2'\n";
        let err = parse_case(doc, "f").unwrap_err();
        assert_eq!(
            err,
            BenchError::Schema {
                case: "c".into(),
                field: "turn 2: validator".into(),
                reason: "needs `assert` entries or a `check`".into()
            }
        );
        assert!(err.to_string().contains("turn 2"));
    }

    #[test]
    fn unknown_category_rejected() {
        let doc = "id = 'c'\ncategory = 'weird'\n[[turns]]\nquery = 'q'\ncheck = 'passed = True'\n";
        assert!(parse_case(doc, "f").unwrap_err().to_string().contains("category"));
    }
}
