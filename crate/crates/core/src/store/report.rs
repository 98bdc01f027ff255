//! CSV diagnostics report: one row per head and a footer of model-level means.

use std::io::Write;

use crate::diagnostics::HeadDiagnostics;
use crate::error::Result;

pub const REPORT_COLUMNS: [&str; 8] = [
    "layer",
    "head",
    "spearman_dist_dot",
    "mean_norm_diff",
    "wqwk_correlation",
    "first_token_attention_mass",
    "chosen_scale",
    "scale_objective",
];

/// A head's row; `diagnostics` is `None` for degraded heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub layer: usize,
    pub head: usize,
    pub diagnostics: Option<HeadDiagnostics>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = xs.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Write the report. Empty cells mean "not available"; footer means skip them.
pub fn write_report<W: Write>(mut out: W, rows: &[ReportRow], include_special: bool) -> Result<()> {
    writeln!(out, "# special-token pairs included in spearman_dist_dot: {include_special}")
        .map_err(csv::Error::from)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    let stats = |d: &HeadDiagnostics| -> [Option<f64>; 6] {
        [
            Some(d.spearman_dist_dot),
            Some(d.mean_norm_diff),
            d.wqwk_correlation,
            Some(d.first_token_attention_mass),
            Some(d.chosen_scale),
            Some(d.scale_objective),
        ]
    };
    for r in rows {
        let values = r.diagnostics.as_ref().map(stats).unwrap_or([None; 6]);
        let mut record = vec![r.layer.to_string(), r.head.to_string()];
        record.extend(values.iter().map(|&v| cell(v)));
        w.write_record(&record)?;
    }
    let mut footer = vec!["mean".to_string(), String::new()];
    for i in 0..6 {
        footer.push(cell(mean(rows.iter().map(|r| r.diagnostics.as_ref().and_then(|d| stats(d)[i])))));
    }
    w.write_record(&footer)?;
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
