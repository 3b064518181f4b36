//! Human-readable rendering of a single-package analysis.

use std::collections::BTreeSet;

use dsaudit_core::analysis::{AnalysisResult, FindingKind};
use dsaudit_core::summary::WarningReport;

fn join(set: &BTreeSet<String>) -> String {
    set.iter().cloned().collect::<Vec<_>>().join(", ")
}

pub fn render_analysis(result: &AnalysisResult, warning: &WarningReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("package        {}\n", result.package_name));
    out.push_str(&format!("app category   {}\n", result.app_category));
    out.push_str(&format!("kb snapshot    {}\n", result.kb_snapshot_version));
    out.push_str(&format!("verdict        {}\n", result.verdict));

    if !result.matched.is_empty() {
        out.push_str(&format!("\nmatched grants ({})\n", result.matched.len()));
        let width = result
            .matched
            .iter()
            .map(|(p, _)| p.len())
            .max()
            .unwrap_or(0);
        for (permission, category) in &result.matched {
            out.push_str(&format!("  {permission:<width$}  -> {category}\n"));
        }
    }

    for (kind, header) in [
        (FindingKind::UndeclaredCollection, "undeclared access (Case 1)"),
        (FindingKind::UnconsentedDeclaration, "declared without consent (Case 2)"),
        (FindingKind::ExcessiveCollection, "possible over-collection"),
    ] {
        let findings: Vec<_> = result.findings.iter().filter(|f| f.kind == kind).collect();
        if findings.is_empty() {
            continue;
        }
        out.push_str(&format!("\n{header}\n"));
        for finding in findings {
            let categories = join(&finding.categories);
            if finding.permissions.is_empty() {
                out.push_str(&format!("  {categories}\n"));
            } else {
                out.push_str(&format!("  {} -> {categories}\n", join(&finding.permissions)));
            }
        }
    }

    out.push_str("\nwarning\n");
    for sentence in &warning.sentences {
        out.push_str(&format!("  - {sentence}\n"));
    }

    if !result.diagnostics.is_empty() {
        out.push_str("\ndiagnostics\n");
        for diagnostic in &result.diagnostics {
            out.push_str(&format!("  - {diagnostic}\n"));
        }
    }
    out.trim_end().to_string()
}
