use pyo3::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Assertion, Comparator, PathSegment, Validator, VariablePath};
use crate::runtime::{describe_pyerr, kernel, RuntimeHandle};

const REAL_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub label: String,
    pub passed: bool,
    /// The retrieved value in plain form, when it had one.
    pub actual: Option<Value>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatorResult {
    pub passed: bool,
    pub details: Vec<AssertionOutcome>,
    /// 1-based; 0 when validated outside a case.
    pub turn_index: usize,
}

impl ValidatorResult {
    pub(crate) fn failed(turn_index: usize, reason: &str) -> Self {
        Self {
            passed: false,
            details: vec![AssertionOutcome {
                label: "turn".into(),
                passed: false,
                actual: None,
                message: reason.to_string(),
            }],
            turn_index,
        }
    }
}

fn resolve<'py>(py: Python<'py>, rt: &RuntimeHandle, path: &VariablePath) -> Result<Bound<'py, PyAny>, String> {
    let root = rt.get_variable(&path.root).map_err(|e| e.to_string())?;
    let mut cur = root.into_bound(py);
    for seg in &path.segments {
        cur = match seg {
            PathSegment::Attr(a) => cur.getattr(a.as_str()),
            PathSegment::Index(i) => cur.get_item(*i),
            PathSegment::Key(k) => cur.get_item(k.as_str()),
            PathSegment::Call => cur.call0(),
        }
        .map_err(|e| format!("{}: {}", path.text, describe_pyerr(py, &e)))?;
    }
    Ok(cur)
}

fn plain(py: Python<'_>, v: &Bound<'_, PyAny>) -> Result<Value, String> {
    let text: String = kernel(py)
        .and_then(|k| k.call_method1("to_plain", (v,)))
        .and_then(|r| r.extract())
        .map_err(|e| describe_pyerr(py, &e))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn is_integer(v: &Value) -> bool {
    v.is_i64() || v.is_u64()
}

fn numbers_match(a: &Value, b: &Value, tol: Option<f64>) -> bool {
    if is_integer(a) && is_integer(b) && tol.is_none() {
        return a.as_i64() == b.as_i64() && a.as_u64() == b.as_u64();
    }
    let (Some(x), Some(y)) = (a.as_f64(), b.as_f64()) else {
        return false;
    };
    let diff = (x - y).abs();
    match tol {
        Some(t) => diff <= t,
        None => diff <= REAL_REL_TOL * x.abs().max(y.abs()),
    }
}

/// Structural equality with numeric tolerance at the leaves.
pub(crate) fn plain_equal(actual: &Value, expected: &Value, tol: Option<f64>) -> bool {
    match (actual, expected) {
        (Value::Number(_), Value::Number(_)) => numbers_match(actual, expected, tol),
        (Value::Array(a), Value::Array(b)) => {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| plain_equal(x, y, tol))
        }
        (Value::Object(a), Value::Object(b)) => {
            a.len() == b.len() && a.iter().all(|(k, x)| b.get(k).is_some_and(|y| plain_equal(x, y, tol)))
        }
        _ => actual == expected,
    }
}

fn ordering(actual: &Value, expected: &Value, cmp: Comparator) -> Result<bool, String> {
    let (Some(x), Some(y)) = (actual.as_f64(), expected.as_f64()) else {
        return Err(format!("{actual} is not a number"));
    };
    Ok(match cmp {
        Comparator::Lt => x < y,
        Comparator::Le => x <= y,
        Comparator::Gt => x > y,
        Comparator::Ge => x >= y,
        _ => unreachable!("ordering comparator"),
    })
}

fn check_assertion(py: Python<'_>, rt: &RuntimeHandle, a: &Assertion) -> AssertionOutcome {
    let label = a.label();
    let fail = |actual: Option<Value>, message: String| AssertionOutcome {
        label: label.clone(),
        passed: false,
        actual,
        message,
    };
    let obj = match resolve(py, rt, &a.path) {
        Ok(o) => o,
        Err(e) => return fail(None, e),
    };
    let verdict: Result<(bool, Option<Value>), String> = match a.cmp {
        Comparator::Len => obj
            .len()
            .map(|n| (Some(n as u64) == a.expected.as_u64(), Some(Value::from(n))))
            .map_err(|e| describe_pyerr(py, &e)),
        Comparator::Type => {
            let name = obj
                .get_type()
                .name()
                .map(|n| n.to_string())
                .unwrap_or_default();
            Ok((a.expected.as_str() == Some(name.as_str()), Some(Value::from(name))))
        }
        _ => plain(py, &obj).and_then(|actual| {
            let ok = match a.cmp {
                Comparator::Eq => plain_equal(&actual, &a.expected, a.tolerance),
                Comparator::Ne => !plain_equal(&actual, &a.expected, a.tolerance),
                Comparator::Contains => match &actual {
                    Value::Array(items) => items.iter().any(|x| plain_equal(x, &a.expected, a.tolerance)),
                    Value::Object(map) => a.expected.as_str().is_some_and(|k| map.contains_key(k)),
                    Value::String(s) => a.expected.as_str().is_some_and(|k| s.contains(k)),
                    _ => false,
                },
                cmp => ordering(&actual, &a.expected, cmp)?,
            };
            Ok((ok, Some(actual)))
        }),
    };
    match verdict {
        Ok((true, actual)) => AssertionOutcome {
            label,
            passed: true,
            actual,
            message: String::new(),
        },
        Ok((false, actual)) => {
            let shown = actual.as_ref().map(Value::to_string).unwrap_or_default();
            fail(actual, format!("expected {:?} {}, got {shown}", a.cmp, a.expected).to_lowercase())
        }
        Err(e) => fail(None, e),
    }
}

fn run_source(rt: &RuntimeHandle, source: &str, names: Option<&[String]>) -> AssertionOutcome {
    let fail = |message: String| AssertionOutcome {
        label: "check".into(),
        passed: false,
        actual: None,
        message,
    };
    let clone = match rt.clone_isolated(names) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    match clone.execute_cell(source) {
        Ok(out) => {
            if let Some(err) = out.error {
                return fail(format!("{}: {}", err.exception, err.message));
            }
        }
        Err(e) => return fail(e.to_string()),
    }
    let read = |name: &str| {
        clone
            .get_variable(name)
            .ok()
            .map(|v| Python::attach(|py| (v.bind(py).is_truthy().unwrap_or(false), v.bind(py).to_string())))
    };
    let Some((passed, _)) = read("passed") else {
        return fail("check did not bind 'passed'".into());
    };
    let message = read("message").map(|(_, m)| m).unwrap_or_default();
    AssertionOutcome {
        label: "check".into(),
        passed,
        actual: None,
        message,
    }
}

/// Evaluate `validator` against the live namespace of `runtime`.
///
/// Retrieval problems fail the assertion; they are never harness errors.
/// Check code runs on an isolated copy, so the namespace is left as found.
pub fn validate(runtime: &RuntimeHandle, validator: &Validator) -> ValidatorResult {
    crate::runtime::ensure_python();
    let mut details: Vec<AssertionOutcome> = Python::attach(|py| {
        validator
            .assertions
            .iter()
            .map(|a| check_assertion(py, runtime, a))
            .collect()
    });
    if let Some(src) = &validator.source {
        details.push(run_source(runtime, src, validator.names.as_deref()));
    }
    ValidatorResult {
        passed: details.iter().all(|d| d.passed),
        details,
        turn_index: 0,
    }
}
