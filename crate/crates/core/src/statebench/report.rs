use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::harness::CaseResult;
use super::{BenchError, Category};
use crate::gateway::UsageCounter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub total_steps: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl From<UsageCounter> for UsageTotals {
    fn from(u: UsageCounter) -> Self {
        Self {
            total_steps: u.steps,
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
            total_tokens: u.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: Category,
    pub cases: usize,
    pub queries: usize,
    pub passed: usize,
    /// Successful queries over total queries.
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub id: String,
    pub category: Category,
    pub queries: usize,
    pub passed: usize,
    pub success_rate: f64,
    pub failed_turns: Vec<usize>,
    pub usage: UsageTotals,
    pub skipped: Option<String>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub categories: Vec<CategoryRow>,
    pub cases: Vec<CaseRow>,
    pub usage: UsageTotals,
    /// Mean of the per-category rates over categories that ran.
    pub avg_success_rate: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn category(&self, c: Category) -> Option<&CategoryRow> {
        self.categories.iter().find(|r| r.category == c)
    }
}

fn rate(passed: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        passed as f64 / total as f64
    }
}

/// Aggregate case results. Skipped cases are listed but not rated.
pub fn report(results: &[CaseResult]) -> Result<BenchReport, BenchError> {
    if results.is_empty() {
        return Err(BenchError::NoResults);
    }
    let cases: Vec<CaseRow> = results
        .iter()
        .map(|r| CaseRow {
            id: r.id.clone(),
            category: r.category,
            queries: r.queries(),
            passed: r.passed(),
            success_rate: r.success_rate(),
            failed_turns: r.turns.iter().filter(|t| !t.passed()).map(|t| t.index).collect(),
            usage: r.usage.into(),
            skipped: r.skipped.clone(),
            aborted: r.aborted.clone(),
        })
        .collect();
    let mut categories = Vec::new();
    for c in Category::ALL {
        let ran: Vec<&CaseRow> = cases
            .iter()
            .filter(|r| r.category == c && r.skipped.is_none())
            .collect();
        if ran.is_empty() {
            continue;
        }
        let queries = ran.iter().map(|r| r.queries).sum();
        let passed = ran.iter().map(|r| r.passed).sum();
        categories.push(CategoryRow {
            category: c,
            cases: ran.len(),
            queries,
            passed,
            success_rate: rate(passed, queries),
        });
    }
    let usage = results
        .iter()
        .fold(UsageCounter::default(), |acc, r| acc.merged(&r.usage))
        .into();
    let avg_success_rate = if categories.is_empty() {
        0.0
    } else {
        categories.iter().map(|c| c.success_rate).sum::<f64>() / categories.len() as f64
    };
    Ok(BenchReport {
        categories,
        cases,
        usage,
        avg_success_rate,
    })
}

/// Human-readable tables: per category, then suite totals.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>8} {:>7} {:>13}",
        "Category", "Cases", "Queries", "Passed", "Success Rate"
    );
    for c in &report.categories {
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>8} {:>7} {:>12.1}%",
            c.category.as_str(),
            c.cases,
            c.queries,
            c.passed,
            c.success_rate * 100.0
        );
    }
    for c in report.cases.iter().filter(|c| c.skipped.is_some()) {
        let _ = writeln!(out, "skipped {}: {}", c.id, c.skipped.as_deref().unwrap_or(""));
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:>11} | {:>13} | {:>17} | {:>12} | {:>17}",
        "Total Steps", "Prompt Tokens", "Completion Tokens", "Total Tokens", "Avg. Success Rate"
    );
    let u = &report.usage;
    let _ = writeln!(
        out,
        "{:>11} | {:>13} | {:>17} | {:>12} | {:>16.1}%",
        u.total_steps,
        u.prompt_tokens,
        u.completion_tokens,
        u.total_tokens,
        report.avg_success_rate * 100.0
    );
    out
}
