//! Penultimate-feature export as comma-separated text.
//!
//! One row per sample: `sample_id,true_label,role,f0..f(d-1)`. Values are
//! printed with Rust's shortest round-trip float formatting, so reloading
//! the file reproduces the computed features exactly.

use std::fs;
use std::path::Path;

use unlearn_core::classifier::ModelState;
use unlearn_core::dataset::{ClassPartition, LabeledImageDataset};

use crate::error::{LabError, Result};

/// Render the export for the given sample indices.
pub fn features_csv(
    model: &ModelState,
    dataset: &LabeledImageDataset,
    partition: &ClassPartition,
    indices: &[usize],
) -> Result<String> {
    if model.num_classes() != dataset.num_classes() {
        return Err(LabError::Config(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            dataset.num_classes()
        )));
    }
    let d = model.feature_dim();
    let mut out = String::from("sample_id,true_label,role");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for &idx in indices {
        if idx >= dataset.len() {
            return Err(LabError::Config(format!(
                "sample index {idx} out of range for {} samples",
                dataset.len()
            )));
        }
        let label = dataset.label(idx);
        let role = if partition.is_forget(label) { "forget" } else { "retain" };
        let features = model.extract_features(dataset.image(idx))?;
        out.push_str(&format!("{idx},{label},{role}"));
        for v in features {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_features(
    model: &ModelState,
    dataset: &LabeledImageDataset,
    partition: &ClassPartition,
    indices: &[usize],
    path: &Path,
) -> Result<()> {
    let text = features_csv(model, dataset, partition, indices)?;
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_core::classifier::{build_model, ModelConfig};
    use unlearn_core::dataset::{partition_classes, Split};

    use crate::datasrc::{load_dataset, DatasetSpec};

    fn world() -> (ModelState, LabeledImageDataset, ClassPartition) {
        let spec = DatasetSpec {
            source_path: "synthetic:tenclass:3".into(),
            image_size: [16, 16],
            channels: 1,
            split_ratios: Some([0.5, 0.25, 0.25]),
            split_files: None,
            seed: 2,
        };
        let ds = load_dataset(&spec).unwrap();
        let model = build_model(&ModelConfig::desk(ds.geometry(), ds.num_classes()), 1).unwrap();
        let partition = partition_classes(ds.num_classes(), &[0usize].into_iter().collect()).unwrap();
        (model, ds, partition)
    }

    #[test]
    fn shape_and_determinism() {
        let (model, ds, partition) = world();
        let idx = ds.split_indices(Split::Test);
        let a = features_csv(&model, &ds, &partition, &idx).unwrap();
        let b = features_csv(&model, &ds, &partition, &idx).unwrap();
        assert_eq!(a, b);
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines.len(), idx.len() + 1);
        let d = model.feature_dim();
        for line in &lines {
            assert_eq!(line.split(',').count(), 3 + d);
        }
        assert!(lines[0].starts_with("sample_id,true_label,role,f0,"));
    }

    #[test]
    fn columns_reload_to_exact_feature_values() {
        let (model, ds, partition) = world();
        let idx = vec![0, 5, 25];
        let text = features_csv(&model, &ds, &partition, &idx).unwrap();
        for line in text.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let sample: usize = fields[0].parse().unwrap();
            assert_eq!(fields[1].parse::<usize>().unwrap(), ds.label(sample));
            let expected_role = if ds.label(sample) == 0 { "forget" } else { "retain" };
            assert_eq!(fields[2], expected_role);
            let reloaded: Vec<f64> = fields[3..].iter().map(|s| s.parse().unwrap()).collect();
            let computed = model.extract_features(ds.image(sample)).unwrap();
            assert_eq!(reloaded.len(), computed.len());
            for (a, b) in reloaded.iter().zip(&computed) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn export_writes_byte_identical_files() {
        let (model, ds, partition) = world();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        let idx = ds.split_indices(Split::Val);
        export_features(&model, &ds, &partition, &idx, &p1).unwrap();
        export_features(&model, &ds, &partition, &idx, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
