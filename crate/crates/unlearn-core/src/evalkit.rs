//! Retain/forget accuracy metrics and paper-style comparison tables.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::classifier::ModelState;
use crate::dataset::{ClassPartition, LabeledImageDataset, Split, SubsetHandle};
use crate::error::CoreError;

/// One accuracy cell: percentage in [0, 100] and the evaluated count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyCell {
    pub percent: f64,
    pub n_eval: usize,
}

/// Which train-split population the train-side cells cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    /// The complete training split.
    FullSplit,
    /// Only the stored subset indices.
    StoredSubset,
}

impl EvalScope {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalScope::FullSplit => "full_split",
            EvalScope::StoredSubset => "stored_subset",
        }
    }
}

/// The four headline metrics: retain/forget accuracy on train and test
/// splits. Empty populations are marked absent rather than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub acc_retain_train: Option<AccuracyCell>,
    pub acc_forget_train: Option<AccuracyCell>,
    pub acc_retain_test: Option<AccuracyCell>,
    pub acc_forget_test: Option<AccuracyCell>,
    pub model_digest: [u8; 32],
    pub scope: EvalScope,
}

impl MetricsReport {
    pub fn cells(&self) -> [(&'static str, bool, Option<AccuracyCell>); 4] {
        [
            ("acc_retain_train", true, self.acc_retain_train),
            ("acc_forget_train", false, self.acc_forget_train),
            ("acc_retain_test", true, self.acc_retain_test),
            ("acc_forget_test", false, self.acc_forget_test),
        ]
    }
}

fn accuracy_over(
    model: &ModelState,
    dataset: &LabeledImageDataset,
    indices: &[usize],
) -> Result<Option<AccuracyCell>, CoreError> {
    if indices.is_empty() {
        return Ok(None);
    }
    let mut correct = 0usize;
    for &i in indices {
        if model.predict_class(dataset.image(i))? == dataset.label(i) {
            correct += 1;
        }
    }
    Ok(Some(AccuracyCell {
        percent: 100.0 * correct as f64 / indices.len() as f64,
        n_eval: indices.len(),
    }))
}

/// Top-1 accuracy split by retain/forget classes over the train and test
/// splits. `subset` restricts the train-side cells to the stored subset.
pub fn evaluate(
    model: &ModelState,
    dataset: &LabeledImageDataset,
    partition: &ClassPartition,
    subset: Option<&SubsetHandle>,
) -> Result<MetricsReport, CoreError> {
    if model.num_classes() != dataset.num_classes() {
        return Err(CoreError::Domain(format!(
            "model has {} classes but dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let train_pop: Vec<usize> = match subset {
        Some(handle) => handle.indices.clone(),
        None => dataset.split_indices(Split::Train),
    };
    let (train_f, train_r): (Vec<usize>, Vec<usize>) = train_pop
        .into_iter()
        .partition(|&i| partition.is_forget(dataset.label(i)));
    let (test_f, test_r): (Vec<usize>, Vec<usize>) = dataset
        .split_indices(Split::Test)
        .into_iter()
        .partition(|&i| partition.is_forget(dataset.label(i)));
    Ok(MetricsReport {
        acc_retain_train: accuracy_over(model, dataset, &train_r)?,
        acc_forget_train: accuracy_over(model, dataset, &train_f)?,
        acc_retain_test: accuracy_over(model, dataset, &test_r)?,
        acc_forget_test: accuracy_over(model, dataset, &test_f)?,
        model_digest: model.weight_digest(),
        scope: if subset.is_some() {
            EvalScope::StoredSubset
        } else {
            EvalScope::FullSplit
        },
    })
}

/// Render a paper-style comparison grid: one column per report, arrows on
/// the metric names (up = retain, down = forget), best value per row marked
/// `*bold*` and second best `_underlined_`. Single-column tables carry no
/// marks.
pub fn compose_comparison_table(
    reports: &[MetricsReport],
    labels: &[String],
) -> Result<String, CoreError> {
    if reports.is_empty() {
        return Err(CoreError::Domain("no reports to tabulate".into()));
    }
    if reports.len() != labels.len() {
        return Err(CoreError::Domain(format!(
            "{} reports but {} labels",
            reports.len(),
            labels.len()
        )));
    }
    let rows = [
        ("ACC_r ^", 0usize, true),
        ("ACC_f v", 1, false),
        ("ACC'_r ^", 2, true),
        ("ACC'_f v", 3, false),
    ];
    let mut cells: Vec<Vec<String>> = Vec::new();
    for &(_, idx, higher_better) in &rows {
        let values: Vec<Option<f64>> = reports
            .iter()
            .map(|r| r.cells()[idx].2.map(|c| c.percent))
            .collect();
        // Rank present values for best / second-best marks.
        let mut ranked: Vec<(f64, usize)> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (v, i)))
            .collect();
        ranked.sort_by(|a, b| {
            if higher_better {
                b.0.partial_cmp(&a.0).unwrap()
            } else {
                a.0.partial_cmp(&b.0).unwrap()
            }
        });
        let mark = |col: usize| -> Option<char> {
            if reports.len() < 2 || ranked.len() < 2 || ranked[0].0 == ranked[ranked.len() - 1].0 {
                return None;
            }
            if ranked[0].1 == col {
                Some('*')
            } else if ranked.len() > 1 && ranked[1].1 == col && ranked[1].0 != ranked[0].0 {
                Some('_')
            } else {
                None
            }
        };
        cells.push(
            values
                .iter()
                .enumerate()
                .map(|(col, v)| match v {
                    None => "-".into(),
                    Some(v) => {
                        let body = format!("{v:.2}");
                        match mark(col) {
                            Some(c) => format!("{c}{body}{c}"),
                            None => body,
                        }
                    }
                })
                .collect(),
        );
    }

    let mut widths: Vec<usize> = labels.iter().map(|l| l.len()).collect();
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let name_w = rows.iter().map(|(n, _, _)| n.len()).max().unwrap();
    let mut out = String::new();
    out.push_str(&format!("{:name_w$}", "Metric"));
    for (label, w) in labels.iter().zip(&widths) {
        out.push_str(&format!("  {label:>w$}"));
    }
    out.push('\n');
    for (ri, &(name, _, _)) in rows.iter().enumerate() {
        out.push_str(&format!("{name:name_w$}"));
        for (cell, w) in cells[ri].iter().zip(&widths) {
            out.push_str(&format!("  {cell:>w$}"));
        }
        out.push('\n');
    }
    Ok(out)
}
