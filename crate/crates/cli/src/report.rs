//! Consolidated comparison table over run directories.

use std::path::Path;

use affmtl::metrics::{composite_p, EvalReport};
use affmtl::{Error, Result};

use crate::artifacts::read_text;

pub struct Row {
    pub run: String,
    pub report: EvalReport,
}

/// Loads `dir/report` and cross-checks `P` and the mean CCC against the
/// components.
pub fn load_row(dir: &Path) -> Result<Row> {
    let path = dir.join("report");
    let report = EvalReport::from_kv_text(&read_text(&path)?)?;
    report
        .verify()
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    if report.p.is_none() && composite_p(&report.components()).is_ok() {
        return Err(Error::Integrity(format!(
            "{}: P is missing although every component is present",
            path.display()
        )));
    }
    let mean = match (report.ccc_valence, report.ccc_arousal) {
        (Some(v), Some(a)) => Some((v + a) / 2.0),
        _ => None,
    };
    let consistent = match (mean, report.mean_ccc) {
        (Some(m), Some(s)) => (m - s).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    };
    if !consistent {
        return Err(Error::Integrity(format!(
            "{}: mean CCC disagrees with its components",
            path.display()
        )));
    }
    Ok(Row {
        run: dir.display().to_string(),
        report,
    })
}

/// Rows sorted by P descending; runs without P go last.
pub fn sort_rows(rows: &mut [Row]) {
    rows.sort_by(|a, b| {
        let key = |r: &Row| r.report.p.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.run.cmp(&b.run))
    });
}

pub fn render(rows: &[Row]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::from("| Run | Average CCC | CCC-V | CCC-A | F_expr | F_aus | P |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for r in rows {
        let e = &r.report;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.run,
            cell(e.mean_ccc),
            cell(e.ccc_valence),
            cell(e.ccc_arousal),
            cell(e.expr_f1_macro),
            cell(e.au_f1_macro),
            cell(e.p),
        ));
    }
    out
}
