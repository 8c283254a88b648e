//! Metadata for injected objects and the prompt blocks built from it.
//!
//! Functions are described by name, signature and documentation, variables
//! by name, type label and description, and classes by a [`TypeSchema`].
//! Rendering never touches the values themselves.

use std::collections::HashSet;

use pyo3::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::{ensure_python, kernel, PyValue};

/// Upper bound on the rendered description plus doc sections of one function.
pub const DOC_CAP: usize = 600;

/// Label used when an annotation is missing.
pub const UNKNOWN_LABEL: &str = "Any";

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("cannot describe {0}: no usable metadata and no overrides")]
    MetadataMissing(String),
    #[error("duplicate descriptor {name:?} in the {block} block")]
    DuplicateDescriptor { block: &'static str, name: String },
    #[error("{0:?} is not a valid identifier")]
    InvalidIdentifier(String),
    #[error("python error: {0}")]
    Python(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Positional,
    VarPositional,
    KeywordOnly,
    VarKeyword,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(name: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            label: label.into(),
            default: None,
            kind: ParamKind::Positional,
        }
    }

    pub fn with_default(mut self, default: impl Into<String>) -> Self {
        self.default = Some(default.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDescriptor {
    pub name: String,
    pub params: Vec<Param>,
    pub return_label: String,
    /// First paragraph of the documentation.
    pub description: String,
    /// `Args:` / `Returns:` sections, already indented for rendering.
    #[serde(default)]
    pub doc: String,
}

impl FunctionDescriptor {
    /// `name(a: int, b: int = 2) -> int`
    pub fn signature(&self) -> String {
        format!("{}{}", self.name, render_params(&self.params, &self.return_label))
    }
}

fn render_params(params: &[Param], ret: &str) -> String {
    let mut parts = Vec::with_capacity(params.len() + 1);
    let mut star_seen = false;
    for p in params {
        let head = match p.kind {
            ParamKind::Positional => p.name.clone(),
            ParamKind::VarPositional => {
                star_seen = true;
                format!("*{}", p.name)
            }
            ParamKind::KeywordOnly => {
                if !star_seen {
                    parts.push("*".to_string());
                    star_seen = true;
                }
                p.name.clone()
            }
            ParamKind::VarKeyword => format!("**{}", p.name),
        };
        let mut s = format!("{head}: {}", p.label);
        if let Some(d) = &p.default {
            s.push_str(" = ");
            s.push_str(d);
        }
        parts.push(s);
    }
    format!("({}) -> {ret}", parts.join(", "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableDescriptor {
    pub name: String,
    pub type_label: String,
    #[serde(default)]
    pub description: String,
}

impl VariableDescriptor {
    pub fn new(
        name: impl Into<String>,
        type_label: impl Into<String>,
        description: impl Into<String>,
    ) -> Self {
        Self {
            name: name.into(),
            type_label: type_label.into(),
            description: description.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeSchema {
    pub type_name: String,
    #[serde(default)]
    pub doc: String,
    /// Rendered as `name(params) -> label`.
    pub methods: Vec<String>,
    /// `(name, label)` pairs.
    pub fields: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub functions_block: String,
    pub variables_block: String,
    pub types_block: String,
}

/// Caller-supplied values that replace or fill in introspected ones.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionOverrides {
    pub name: Option<String>,
    pub params: Option<Vec<Param>>,
    pub return_label: Option<String>,
    pub description: Option<String>,
    pub doc: Option<String>,
}

fn py_err(py: Python<'_>, e: PyErr) -> DescriptorError {
    DescriptorError::Python(crate::runtime::describe_pyerr(py, &e))
}

pub(crate) fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c == '_' || c.is_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c == '_' || c.is_alphanumeric()) && !is_keyword(name)
}

fn is_keyword(name: &str) -> bool {
    const KEYWORDS: &[&str] = &[
        "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
        "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
        "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
        "try", "while", "with", "yield",
    ];
    KEYWORDS.contains(&name)
}

type RawParam = (String, String, Option<String>, Option<String>);

fn convert_params(raw: Vec<RawParam>) -> Vec<Param> {
    raw.into_iter()
        .map(|(name, kind, label, default)| Param {
            name,
            label: label.unwrap_or_else(|| UNKNOWN_LABEL.into()),
            default,
            kind: match kind.as_str() {
                "var_positional" => ParamKind::VarPositional,
                "keyword_only" => ParamKind::KeywordOnly,
                "var_keyword" => ParamKind::VarKeyword,
                _ => ParamKind::Positional,
            },
        })
        .collect()
}

/// Build a function descriptor by introspecting `callable`.
pub fn describe_function(
    callable: &PyValue,
    overrides: Option<FunctionOverrides>,
) -> Result<FunctionDescriptor, DescriptorError> {
    ensure_python();
    let ov = overrides.unwrap_or_default();
    type Raw = (Option<String>, Option<Vec<RawParam>>, Option<String>, Option<String>);
    let (name, params, ret, doc): Raw = Python::attach(|py| {
        let k = kernel(py).map_err(|e| py_err(py, e))?;
        k.call_method1("describe_callable", (callable.bind(py),))
            .and_then(|r| r.extract())
            .map_err(|e| py_err(py, e))
    })?;

    let name = ov
        .name
        .or(name)
        .filter(|n| is_identifier(n))
        .ok_or_else(|| DescriptorError::MetadataMissing("an unnamed callable".into()))?;
    let params = match ov.params.or(params.map(convert_params)) {
        Some(p) => p,
        None => return Err(DescriptorError::MetadataMissing(name)),
    };
    let (doc_description, doc_sections) = doc.as_deref().map(split_doc).unwrap_or_default();
    let description = ov.description.unwrap_or(doc_description);
    let doc = ov.doc.unwrap_or(doc_sections);
    if description.trim().is_empty() && doc.trim().is_empty() {
        return Err(DescriptorError::MetadataMissing(name));
    }
    let (description, doc) = cap_doc(description, doc);
    Ok(FunctionDescriptor {
        name,
        params,
        return_label: ov.return_label.or(ret).unwrap_or_else(|| UNKNOWN_LABEL.into()),
        description,
        doc,
    })
}

/// Describe a variable; the type label is the value's type name.
pub fn describe_variable(
    name: &str,
    value: &PyValue,
    description: &str,
) -> Result<VariableDescriptor, DescriptorError> {
    if !is_identifier(name) {
        return Err(DescriptorError::InvalidIdentifier(name.into()));
    }
    ensure_python();
    let type_label: String = Python::attach(|py| {
        kernel(py)
            .and_then(|k| k.call_method1("type_label", (value.bind(py),)))
            .and_then(|r| r.extract())
            .map_err(|e| py_err(py, e))
    })?;
    Ok(VariableDescriptor::new(name, type_label, description))
}

/// Public methods and fields of a class, or of an instance's class plus its
/// public instance attributes.
pub fn derive_type_schema(value_or_type: &PyValue) -> Result<TypeSchema, DescriptorError> {
    ensure_python();
    type RawMethod = (String, Option<Vec<RawParam>>, Option<String>);
    type Raw = (String, Option<String>, Vec<RawMethod>, Vec<(String, String)>);
    let (type_name, doc, methods, fields): Raw = Python::attach(|py| {
        kernel(py)
            .and_then(|k| k.call_method1("type_schema", (value_or_type.bind(py),)))
            .and_then(|r| r.extract())
            .map_err(|e| py_err(py, e))
    })?;
    let doc = doc
        .map(|d| first_paragraph(&d))
        .unwrap_or_default();
    let methods = methods
        .into_iter()
        .map(|(name, params, ret)| {
            let params = convert_params(params.unwrap_or_default());
            format!(
                "{name}{}",
                render_params(&params, ret.as_deref().unwrap_or(UNKNOWN_LABEL))
            )
        })
        .collect();
    Ok(TypeSchema {
        type_name,
        doc,
        methods,
        fields,
    })
}

fn first_paragraph(doc: &str) -> String {
    doc.lines()
        .map(str::trim)
        .take_while(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

const SECTION_HEADERS: &[&str] = &[
    "Args:",
    "Arguments:",
    "Parameters:",
    "Params:",
    "Returns:",
    "Return:",
    "Raises:",
    "Yields:",
];

fn is_kept_section(header: &str) -> bool {
    matches!(
        header,
        "Args:" | "Arguments:" | "Parameters:" | "Params:" | "Returns:" | "Return:"
    )
}

/// Split a cleaned docstring into its first paragraph and the Args/Returns
/// sections re-indented as `  Header:` / `    body`.
pub fn split_doc(doc: &str) -> (String, String) {
    let description = if SECTION_HEADERS.contains(&doc.lines().next().unwrap_or("").trim()) {
        String::new()
    } else {
        first_paragraph(doc)
    };
    let mut out: Vec<String> = Vec::new();
    let mut keep = false;
    let mut body: Vec<&str> = Vec::new();
    let flush = |body: &mut Vec<&str>, out: &mut Vec<String>| {
        let base = body
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.len() - l.trim_start().len())
            .min()
            .unwrap_or(0);
        for l in body.drain(..) {
            if l.trim().is_empty() {
                continue;
            }
            let extra = l.len() - l.trim_start().len() - base;
            out.push(format!("    {}{}", " ".repeat(extra), l.trim()));
        }
    };
    for line in doc.lines() {
        let trimmed = line.trim();
        let at_margin = !line.starts_with(char::is_whitespace);
        if at_margin && SECTION_HEADERS.contains(&trimmed) {
            if keep {
                flush(&mut body, &mut out);
            }
            body.clear();
            keep = is_kept_section(trimmed);
            if keep {
                out.push(format!("  {trimmed}"));
            }
        } else if at_margin && !trimmed.is_empty() {
            if keep {
                flush(&mut body, &mut out);
            }
            body.clear();
            keep = false;
        } else if keep {
            body.push(line);
        }
    }
    if keep {
        flush(&mut body, &mut out);
    }
    (description, out.join("\n"))
}

fn cap_doc(description: String, doc: String) -> (String, String) {
    let d_len = description.chars().count();
    if d_len >= DOC_CAP {
        let cut: String = description.chars().take(DOC_CAP - 3).collect();
        return (format!("{cut}..."), String::new());
    }
    let room = DOC_CAP - d_len;
    if doc.chars().count() <= room {
        return (description, doc);
    }
    // Drop whole lines so indentation stays intact.
    let mut kept = String::new();
    for line in doc.lines() {
        let extra = line.chars().count() + usize::from(!kept.is_empty());
        if kept.chars().count() + extra > room {
            break;
        }
        if !kept.is_empty() {
            kept.push('\n');
        }
        kept.push_str(line);
    }
    (description, kept)
}

fn check_unique<'a>(
    block: &'static str,
    names: impl Iterator<Item = &'a str>,
) -> Result<(), DescriptorError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(DescriptorError::DuplicateDescriptor {
                block,
                name: n.to_string(),
            });
        }
    }
    Ok(())
}

pub fn render_function(f: &FunctionDescriptor) -> String {
    let mut s = format!("- function: {}", f.signature());
    if !f.description.is_empty() {
        s.push_str("\n  description: ");
        s.push_str(&f.description);
    }
    if !f.doc.is_empty() {
        s.push_str("\n  doc:\n");
        s.push_str(&f.doc);
    }
    s
}

pub fn render_variable(v: &VariableDescriptor) -> String {
    let mut s = format!("- name: {}\n  type: {}", v.name, v.type_label);
    if !v.description.is_empty() {
        s.push_str("\n  description: ");
        s.push_str(&v.description);
    }
    s
}

pub fn render_type(t: &TypeSchema) -> String {
    let mut s = format!("{}:", t.type_name);
    if !t.doc.is_empty() {
        s.push_str("\n  doc: ");
        s.push_str(&t.doc);
    }
    if !t.methods.is_empty() {
        s.push_str("\n  methods:");
        for m in &t.methods {
            s.push_str("\n    - ");
            s.push_str(m);
        }
    }
    if !t.fields.is_empty() {
        s.push_str("\n  fields:");
        for (n, l) in &t.fields {
            s.push_str(&format!("\n    - {n}: {l}"));
        }
    }
    s
}

fn wrap(tag: &str, items: Vec<String>) -> String {
    format!("<{tag}>\n{}\n</{tag}>", items.join("\n\n"))
}

/// Render the three context blocks in insertion order.
pub fn render_context(
    functions: &[FunctionDescriptor],
    variables: &[VariableDescriptor],
    types: &[TypeSchema],
) -> Result<ContextBundle, DescriptorError> {
    check_unique("functions", functions.iter().map(|f| f.name.as_str()))?;
    check_unique("variables", variables.iter().map(|v| v.name.as_str()))?;
    check_unique("types", types.iter().map(|t| t.type_name.as_str()))?;
    Ok(ContextBundle {
        functions_block: wrap("functions", functions.iter().map(render_function).collect()),
        variables_block: wrap("variables", variables.iter().map(render_variable).collect()),
        types_block: wrap("types", types.iter().map(render_type).collect()),
    })
}

/// Whether `s` has the shape `name(params) -> label`.
pub fn is_method_signature(s: &str) -> bool {
    let Some(open) = s.find('(') else {
        return false;
    };
    let Some((head, label)) = s.rsplit_once(") -> ") else {
        return false;
    };
    is_identifier(&s[..open]) && head.len() >= open && !label.trim().is_empty()
}
