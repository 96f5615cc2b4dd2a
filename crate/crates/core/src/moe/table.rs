//! Plain-text rendering of a selection report.

use std::fmt::Write;

use super::select::{MethodSummary, SelectionReport};
use super::SelectionConfig;
use crate::metrics::CoreMetric;

fn row(label: &str, s: &MethodSummary) -> String {
    let mut line = format!("| {label} |");
    for m in CoreMetric::ALL {
        match s.means.get(m.key()) {
            Some(v) => write!(line, " {v:.4} |").unwrap(),
            None => line.push_str(" -- |"),
        }
    }
    write!(line, " {:.4} |", s.overall).unwrap();
    line
}

/// Markdown table of per-method means followed by the selected (MoE) row,
/// then method usage and exclusions.
pub fn render_table(report: &SelectionReport) -> String {
    let cfg = SelectionConfig { priority: report.tie_break.clone() };
    let mut out = String::new();
    out.push_str("| Method |");
    for m in CoreMetric::ALL {
        write!(out, " {} |", m.title()).unwrap();
    }
    out.push_str(" OverallScore |\n|---|");
    out.push_str(&"---:|".repeat(CoreMetric::ALL.len() + 1));
    out.push('\n');
    for method in cfg.order(report.method_means.keys()) {
        out.push_str(&row(&method, &report.method_means[&method]));
        out.push('\n');
    }
    out.push_str(&row("MoE", &report.aggregate));
    out.push('\n');

    out.push_str("\n| Method | Selected |\n|---|---:|\n");
    for method in cfg.order(report.method_means.keys()) {
        writeln!(out, "| {method} | {} |", report.method_usage.get(&method).copied().unwrap_or(0)).unwrap();
    }

    if !report.exclusions.is_empty() {
        out.push_str("\nExcluded samples:\n\n");
        for e in &report.exclusions {
            writeln!(out, "- {}: {}", e.sample_id, e.reason).unwrap();
        }
    }
    out
}
