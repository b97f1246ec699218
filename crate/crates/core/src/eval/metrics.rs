use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("{preds} predictions vs {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no predictions")]
    Empty,
}

/// Confusion counts with derailment as the positive class. Ratios with a zero
/// denominator are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub n: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Result<Self, MetricsError> {
        let n = tp + fp + fn_ + tn;
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        Ok(Self { tp, fp, fn_, tn, n, accuracy: (tp + tn) as f64 / n as f64, precision, recall, f1 })
    }
}

pub fn compute_metrics(preds: &[bool], golds: &[bool]) -> Result<MetricsReport, MetricsError> {
    if preds.len() != golds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), golds: golds.len() });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    MetricsReport::from_counts(tp, fp, fn_, tn)
}

/// Percentage with one decimal, or "n/a".
pub fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.1}", 100.0 * x))
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub metrics: MetricsReport,
    /// Rendered after the accuracy when present (e.g. a significance marker).
    pub marker: Option<String>,
}

/// Markdown table of methods × {Acc, Prec, Rec, F1}, in percent.
pub fn markdown_table(rows: &[MetricsRow]) -> String {
    let mut out = String::from("| Method | Acc | Prec | Rec | F1 |\n|---|---|---|---|---|\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "| {} | {}{} | {} | {} | {} |",
            r.method,
            fmt_pct(Some(m.accuracy)),
            r.marker.as_deref().unwrap_or(""),
            fmt_pct(m.precision),
            fmt_pct(m.recall),
            fmt_pct(m.f1)
        );
    }
    out
}
