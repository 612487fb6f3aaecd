//! Plain-text tables for reports and matrices.

use super::documents::ReportDocument;

fn table(header: &[String], rows: &[(String, Vec<String>)]) -> String {
    let label_width = rows.iter().map(|(l, _)| l.chars().count()).max().unwrap_or(0);
    let ncols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (_, cells) in rows {
        for (j, c) in cells.iter().enumerate().take(ncols) {
            widths[j] = widths[j].max(c.chars().count());
        }
    }
    let mut out = format!("{:label_width$}", "");
    for (h, w) in header.iter().zip(&widths) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&format!("{label:<label_width$}"));
        for (c, w) in cells.iter().zip(&widths) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
    }
    out
}

fn fixed(values: &[f64], dp: usize) -> Vec<String> {
    values.iter().map(|v| format!("{v:.dp$}")).collect()
}

/// Adjusted class means, assessment, variances and resolution percentages,
/// one column per variable.
pub fn render_report(doc: &ReportDocument) -> String {
    let mut rows = Vec::new();
    for (label, means) in doc.class_labels.iter().zip(&doc.adjusted_class_means) {
        rows.push((format!("P_Zbar(mu_{label})"), fixed(means, 2)));
    }
    rows.push(("PBA P_Z(X)".to_string(), fixed(&doc.pba, 2)));
    rows.push(("Var_Z(X)".to_string(), fixed(&doc.adjusted_variance_diag(), 2)));
    rows.push(("Var(X)".to_string(), fixed(&doc.prior_variance, 2)));
    rows.push(("Var(U)".to_string(), fixed(&doc.discrepancy_variance_diag(), 2)));
    rows.push(("RU %".to_string(), fixed(&doc.resolved_pct, 1)));
    rows.push(("MRU %".to_string(), fixed(&doc.max_resolvable_pct, 1)));
    let mut out = table(&doc.variables, &rows);
    if !doc.overrides.is_empty() {
        out.push_str(&format!("what-if overrides: {}\n", doc.overrides.len()));
    }
    let failing: Vec<&str> = doc
        .dominance
        .rows
        .iter()
        .filter(|r| !r.dominated)
        .map(|r| r.model_id.as_str())
        .collect();
    if failing.is_empty() {
        out.push_str("dominance: assessment at least as close as every model in every variable\n");
    } else {
        out.push_str(&format!("dominance: FAILS for {}\n", failing.join(", ")));
    }
    out
}

/// Square matrix with row and column labels.
pub fn render_matrix(labels: &[String], rows: &[Vec<f64>], dp: usize) -> String {
    let body: Vec<(String, Vec<String>)> = labels.iter().cloned().zip(rows.iter().map(|r| fixed(r, dp))).collect();
    table(labels, &body)
}
