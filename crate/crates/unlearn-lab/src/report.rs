//! JSON and CSV rendering of metrics reports and sweep results.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use unlearn_core::evalkit::{AccuracyCell, EvalScope, MetricsReport};

use crate::error::{LabError, Result};

fn cell_json(cell: &Option<AccuracyCell>) -> serde_json::Value {
    match cell {
        Some(c) => json!({ "percent": c.percent, "n_eval": c.n_eval }),
        None => serde_json::Value::Null,
    }
}

/// Serialize one report as a JSON tree.
pub fn report_json(report: &MetricsReport) -> serde_json::Value {
    json!({
        "acc_retain_train": cell_json(&report.acc_retain_train),
        "acc_forget_train": cell_json(&report.acc_forget_train),
        "acc_retain_test": cell_json(&report.acc_retain_test),
        "acc_forget_test": cell_json(&report.acc_forget_test),
        "model_digest": hex::encode(report.model_digest),
        "scope": report.scope.as_str(),
    })
}

pub fn parse_report(value: &serde_json::Value) -> Result<MetricsReport> {
    let bad = |what: &str| LabError::Config(format!("report JSON missing {what}"));
    let cell = |key: &str| -> Result<Option<AccuracyCell>> {
        match value.get(key) {
            None => Err(bad(key)),
            Some(serde_json::Value::Null) => Ok(None),
            Some(v) => Ok(Some(AccuracyCell {
                percent: v.get("percent").and_then(|p| p.as_f64()).ok_or_else(|| bad(key))?,
                n_eval: v.get("n_eval").and_then(|n| n.as_u64()).ok_or_else(|| bad(key))?
                    as usize,
            })),
        }
    };
    let digest_hex = value
        .get("model_digest")
        .and_then(|d| d.as_str())
        .ok_or_else(|| bad("model_digest"))?;
    let digest_vec =
        hex::decode(digest_hex).map_err(|e| LabError::Config(format!("model_digest: {e}")))?;
    let model_digest: [u8; 32] = digest_vec
        .try_into()
        .map_err(|_| LabError::Config("model_digest must be 32 bytes".into()))?;
    let scope = match value.get("scope").and_then(|s| s.as_str()) {
        Some("full_split") => EvalScope::FullSplit,
        Some("stored_subset") => EvalScope::StoredSubset,
        other => return Err(LabError::Config(format!("bad scope {other:?}"))),
    };
    Ok(MetricsReport {
        acc_retain_train: cell("acc_retain_train")?,
        acc_forget_train: cell("acc_forget_train")?,
        acc_retain_test: cell("acc_retain_test")?,
        acc_forget_test: cell("acc_forget_test")?,
        model_digest,
        scope,
    })
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(&report_json(report)).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| LabError::Corrupt {
        path: path.into(),
        reason: e.to_string(),
    })?;
    parse_report(&value)
}

/// Mean and sample standard deviation, rendered like `91.15 ± 0.98`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }

    pub fn render(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean, self.std)
    }
}

/// Aggregate per-cell reports from several seeds into mean ± std rows.
///
/// Returns rows aligned with the four metric names; a row is None when the
/// cell is absent in every report.
pub fn aggregate_reports(reports: &[MetricsReport]) -> [(&'static str, Option<MeanStd>); 4] {
    let names = ["acc_retain_train", "acc_forget_train", "acc_retain_test", "acc_forget_test"];
    let mut rows = [(names[0], None), (names[1], None), (names[2], None), (names[3], None)];
    for (slot, row) in rows.iter_mut().enumerate() {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.cells()[slot].2.map(|c| c.percent))
            .collect();
        row.1 = MeanStd::of(&values);
    }
    rows
}

/// Render a CSV table: one row per labeled report, four metric columns.
pub fn reports_csv(reports: &[MetricsReport], labels: &[String]) -> Result<String> {
    if reports.len() != labels.len() {
        return Err(LabError::Config(format!(
            "{} reports but {} labels",
            reports.len(),
            labels.len()
        )));
    }
    let mut out =
        String::from("label,acc_retain_train,acc_forget_train,acc_retain_test,acc_forget_test\n");
    for (report, label) in reports.iter().zip(labels) {
        out.push_str(label);
        for (_, _, cell) in report.cells() {
            out.push(',');
            match cell {
                Some(c) => out.push_str(&format!("{:.4}", c.percent)),
                None => out.push_str("absent"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
