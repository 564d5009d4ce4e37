//! Server-side model store: a directory tree holding the original
//! checkpoint, the per-class stored-subset manifests, unlearning results,
//! and an append-only request log.
//!
//! Layout under the store root:
//!
//! ```text
//! store.json                    -- manifest + request log
//! original.ckpt                 -- trained classifier
//! subsets/class_<c>.manifest    -- stored subset indices of class c
//! results/<name>.ckpt           -- unlearned models
//! results/<name>.report.json    -- their metrics reports
//! ```
//!
//! Mutations go through `&mut Store` (single writer) and every mutation
//! rewrites `store.json` last, so a crash leaves at worst an unreferenced
//! file. Deletions are logged before any unlearning step that depends on
//! them runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use unlearn_core::classifier::ModelState;
use unlearn_core::dataset::{SelectionStrategy, SubsetHandle, SubsetRole};
use unlearn_core::evalkit::MetricsReport;

use crate::checkpoint;
use crate::error::{LabError, Result};
use crate::manifest;
use crate::report;

pub const STORE_ENV_VAR: &str = "UNLEARN_STORE";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub path: String,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LogAction {
    /// Forget-class subset files were removed from disk.
    DeleteForgetSubsets,
    /// An unlearning run completed and its result was stored.
    Unlearn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub timestamp: u64,
    pub action: LogAction,
    pub classes: Vec<usize>,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result_path: Option<String>,
    /// Per-class sample counts removed by a deletion entry, so later
    /// requests can size stand-in batches after the files are gone.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub deleted_counts: Option<BTreeMap<usize, usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dataset_id: String,
    pub original_digest: String,
    pub strategy: String,
    pub fraction: f64,
    pub selection_seed: u64,
    /// Class index -> stored subset file, absent once deleted.
    pub subsets: BTreeMap<usize, SubsetEntry>,
    pub log: Vec<LogEntry>,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    pub manifest: StoreManifest,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl Store {
    pub fn root(&self) -> &Path {
        &self.root
    }

    fn manifest_path(root: &Path) -> PathBuf {
        root.join("store.json")
    }

    pub fn original_checkpoint_path(&self) -> PathBuf {
        self.root.join("original.ckpt")
    }

    fn subset_rel_path(class: usize) -> String {
        format!("subsets/class_{class}.manifest")
    }

    /// Create a fresh store from a trained model and its per-class stored
    /// subsets. Fails if the root already holds a store.
    pub fn create(
        root: &Path,
        dataset_id: &str,
        model: &ModelState,
        subset: &SubsetHandle,
        labels: &[usize],
    ) -> Result<Store> {
        if Self::manifest_path(root).exists() {
            return Err(LabError::StoreIntegrity(format!(
                "{} already holds a store",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("subsets")).map_err(|e| LabError::io(root, e))?;
        fs::create_dir_all(root.join("results")).map_err(|e| LabError::io(root, e))?;

        checkpoint::save_classifier(&root.join("original.ckpt"), model)?;

        // Split the combined handle into one manifest per class so a
        // forget request can delete exactly the affected files.
        let mut per_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &idx in &subset.indices {
            let label = *labels.get(idx).ok_or_else(|| {
                LabError::Config(format!("subset index {idx} outside the dataset"))
            })?;
            per_class.entry(label).or_default().push(idx);
        }
        let mut subsets = BTreeMap::new();
        for (class, indices) in per_class {
            let handle = SubsetHandle {
                dataset_id: subset.dataset_id.clone(),
                indices,
                strategy: subset.strategy,
                fraction: subset.fraction,
                seed: subset.seed,
                role: SubsetRole::Mixed,
            };
            let rel = Self::subset_rel_path(class);
            manifest::write_manifest(&root.join(&rel), &handle)?;
            subsets.insert(class, SubsetEntry { path: rel, count: handle.len() });
        }

        let store = Store {
            root: root.to_path_buf(),
            manifest: StoreManifest {
                dataset_id: dataset_id.to_string(),
                original_digest: hex::encode(model.weight_digest()),
                strategy: subset.strategy.as_str().to_string(),
                fraction: subset.fraction,
                selection_seed: subset.seed,
                subsets,
                log: Vec::new(),
            },
        };
        store.save_manifest()?;
        Ok(store)
    }

    /// Open and integrity-check an existing store.
    pub fn open(root: &Path) -> Result<Store> {
        let path = Self::manifest_path(root);
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                LabError::StoreIntegrity(format!("no store at {}", root.display()))
            }
            _ => LabError::io(&path, e),
        })?;
        let manifest: StoreManifest =
            serde_json::from_str(&text).map_err(|e| LabError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        let store = Store { root: root.to_path_buf(), manifest };
        store.verify_integrity()?;
        Ok(store)
    }

    fn verify_integrity(&self) -> Result<()> {
        let original = checkpoint::load_classifier(&self.original_checkpoint_path())?;
        if hex::encode(original.weight_digest()) != self.manifest.original_digest {
            return Err(LabError::StoreIntegrity(
                "original checkpoint digest disagrees with the store manifest".into(),
            ));
        }
        for (class, entry) in &self.manifest.subsets {
            let p = self.root.join(&entry.path);
            if !p.exists() {
                return Err(LabError::StoreIntegrity(format!(
                    "subset file for class {class} is referenced but missing on disk"
                )));
            }
            let handle = manifest::read_manifest(&p, SubsetRole::Mixed)?;
            if handle.len() != entry.count {
                return Err(LabError::StoreIntegrity(format!(
                    "subset file for class {class} holds {} indices, manifest says {}",
                    handle.len(),
                    entry.count
                )));
            }
        }
        // Deletion-first ordering must hold in the recorded log: any
        // unlearn entry in a non-real mode needs an earlier deletion entry
        // covering its classes.
        for (i, entry) in self.manifest.log.iter().enumerate() {
            if entry.action == LogAction::Unlearn && entry.mode != "real" {
                let covered = self.manifest.log[..i].iter().any(|earlier| {
                    earlier.action == LogAction::DeleteForgetSubsets
                        && entry.classes.iter().all(|c| earlier.classes.contains(c))
                });
                if !covered {
                    return Err(LabError::StoreIntegrity(format!(
                        "log entry {} ran {} unlearning without a prior deletion record",
                        entry.seq, entry.mode
                    )));
                }
            }
        }
        Ok(())
    }

    fn save_manifest(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root);
        let text =
            serde_json::to_string_pretty(&self.manifest).expect("store manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| LabError::io(&path, e))
    }

    pub fn load_original(&self) -> Result<ModelState> {
        checkpoint::load_classifier(&self.original_checkpoint_path())
    }

    /// The stored subset of one class, if still present.
    pub fn load_class_subset(&self, class: usize) -> Result<Option<SubsetHandle>> {
        match self.manifest.subsets.get(&class) {
            None => Ok(None),
            Some(entry) => Ok(Some(manifest::read_manifest(
                &self.root.join(&entry.path),
                SubsetRole::Mixed,
            )?)),
        }
    }

    /// Union of every remaining per-class subset.
    pub fn load_subset_union(&self) -> Result<SubsetHandle> {
        let mut indices = Vec::new();
        let mut template: Option<SubsetHandle> = None;
        for class in self.manifest.subsets.keys() {
            let handle = self.load_class_subset(*class)?.expect("key implies presence");
            indices.extend_from_slice(&handle.indices);
            template.get_or_insert(handle);
        }
        let template = template.ok_or_else(|| {
            LabError::StoreIntegrity("store holds no subset manifests at all".into())
        })?;
        indices.sort_unstable();
        Ok(SubsetHandle {
            dataset_id: self.manifest.dataset_id.clone(),
            indices,
            strategy: template.strategy,
            fraction: template.fraction,
            seed: template.seed,
            role: SubsetRole::Mixed,
        })
    }

    pub fn strategy(&self) -> Result<SelectionStrategy> {
        SelectionStrategy::parse(&self.manifest.strategy).ok_or_else(|| {
            LabError::StoreIntegrity(format!(
                "store manifest names unknown strategy {:?}",
                self.manifest.strategy
            ))
        })
    }

    /// Remaining sample count for the classes, read from the manifest.
    pub fn stored_count(&self, classes: &[usize]) -> usize {
        classes
            .iter()
            .filter_map(|c| self.manifest.subsets.get(c))
            .map(|e| e.count)
            .sum()
    }

    /// Classes whose subset files were deleted by an earlier request.
    pub fn deleted_classes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .manifest
            .log
            .iter()
            .filter(|e| e.action == LogAction::DeleteForgetSubsets)
            .flat_map(|e| e.classes.iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// A completed unlearn log entry matching the request, for idempotent
    /// repeat handling.
    pub fn find_completed_request(
        &self,
        classes: &[usize],
        mode: &str,
        method: &str,
    ) -> Option<&LogEntry> {
        self.manifest.log.iter().rev().find(|e| {
            e.action == LogAction::Unlearn
                && e.classes == classes
                && e.mode == mode
                && e.method.as_deref() == Some(method)
        })
    }

    /// Latest result checkpoint, falling back to the original model.
    pub fn latest_checkpoint_path(&self) -> PathBuf {
        self.manifest
            .log
            .iter()
            .rev()
            .find_map(|e| e.result_path.as_ref())
            .map(|rel| self.root.join(rel))
            .unwrap_or_else(|| self.original_checkpoint_path())
    }

    fn next_seq(&self) -> u64 {
        self.manifest.log.last().map(|e| e.seq + 1).unwrap_or(0)
    }

    /// Delete the subset files of the given classes and log the deletion.
    /// Files are gone from disk before the log entry is written, and the
    /// log entry exists before this returns — unlearning may only start
    /// afterwards.
    pub fn delete_forget_subsets(&mut self, classes: &[usize], mode: &str) -> Result<()> {
        let mut deleted_counts = BTreeMap::new();
        for &class in classes {
            if let Some(entry) = self.manifest.subsets.remove(&class) {
                let p = self.root.join(&entry.path);
                fs::remove_file(&p).map_err(|e| LabError::io(&p, e))?;
                deleted_counts.insert(class, entry.count);
            }
        }
        self.manifest.log.push(LogEntry {
            seq: self.next_seq(),
            timestamp: now_unix(),
            action: LogAction::DeleteForgetSubsets,
            classes: classes.to_vec(),
            mode: mode.to_string(),
            method: None,
            parent_digest: None,
            result_digest: None,
            result_path: None,
            deleted_counts: Some(deleted_counts),
        });
        self.save_manifest()
    }

    /// Per-class counts at deletion time, read back from the log.
    pub fn deleted_counts_from_log(&self, classes: &[usize]) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for entry in &self.manifest.log {
            if entry.action != LogAction::DeleteForgetSubsets {
                continue;
            }
            if let Some(counts) = &entry.deleted_counts {
                for (&class, &count) in counts {
                    if classes.contains(&class) {
                        out.insert(class, count);
                    }
                }
            }
        }
        out
    }

    /// No stored index may belong to any of the given classes.
    pub fn audit_no_forget_samples(&self, classes: &[usize]) -> Result<()> {
        for &class in classes {
            if let Some(entry) = self.manifest.subsets.get(&class) {
                return Err(LabError::StoreIntegrity(format!(
                    "class {class} still has {} stored samples",
                    entry.count
                )));
            }
        }
        Ok(())
    }

    /// Persist an unlearning result (checkpoint + report) and log it.
    #[allow(clippy::too_many_arguments)]
    pub fn record_result(
        &mut self,
        name: &str,
        model: &ModelState,
        metrics: &MetricsReport,
        classes: &[usize],
        mode: &str,
        method: &str,
        parent_digest: [u8; 32],
    ) -> Result<PathBuf> {
        let rel = format!("results/{name}.ckpt");
        let ckpt_path = self.root.join(&rel);
        checkpoint::save_classifier(&ckpt_path, model)?;
        report::write_report_json(&self.root.join(format!("results/{name}.report.json")), metrics)?;
        self.manifest.log.push(LogEntry {
            seq: self.next_seq(),
            timestamp: now_unix(),
            action: LogAction::Unlearn,
            classes: classes.to_vec(),
            mode: mode.to_string(),
            method: Some(method.to_string()),
            parent_digest: Some(hex::encode(parent_digest)),
            result_digest: Some(hex::encode(model.weight_digest())),
            result_path: Some(rel),
            deleted_counts: None,
        });
        self.save_manifest()?;
        Ok(ckpt_path)
    }

    /// Every result entry must chain to a digest that exists as either the
    /// original or some earlier result.
    pub fn verify_provenance_chain(&self) -> Result<()> {
        let mut known = vec![self.manifest.original_digest.clone()];
        for entry in &self.manifest.log {
            if entry.action != LogAction::Unlearn {
                continue;
            }
            let parent = entry.parent_digest.as_ref().ok_or_else(|| {
                LabError::StoreIntegrity(format!("log entry {} has no parent digest", entry.seq))
            })?;
            if !known.contains(parent) {
                return Err(LabError::StoreIntegrity(format!(
                    "log entry {} chains to unknown digest {}",
                    entry.seq, parent
                )));
            }
            if let Some(result) = &entry.result_digest {
                known.push(result.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_core::classifier::{build_model, ModelConfig};
    use unlearn_core::dataset::Geometry;
    use unlearn_core::evalkit::EvalScope;

    fn tiny_model() -> ModelState {
        build_model(&ModelConfig::desk(Geometry::new(8, 8, 1), 3), 1).unwrap()
    }

    fn subset() -> (SubsetHandle, Vec<usize>) {
        // 9 samples, 3 per class, subset keeps one per class.
        let labels = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let handle = SubsetHandle {
            dataset_id: "toy".into(),
            indices: vec![0, 4, 8],
            strategy: SelectionStrategy::Top,
            fraction: 0.34,
            seed: 9,
            role: SubsetRole::Mixed,
        };
        (handle, labels)
    }

    fn empty_report(model: &ModelState) -> MetricsReport {
        MetricsReport {
            acc_retain_train: None,
            acc_forget_train: None,
            acc_retain_test: None,
            acc_forget_test: None,
            model_digest: model.weight_digest(),
            scope: EvalScope::FullSplit,
        }
    }

    #[test]
    fn create_open_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let (handle, labels) = subset();
        Store::create(dir.path(), "toy", &model, &handle, &labels).unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.manifest.subsets.len(), 3);
        assert_eq!(store.load_subset_union().unwrap().indices, vec![0, 4, 8]);
        assert_eq!(store.load_original().unwrap().weight_digest(), model.weight_digest());
        assert!(Store::create(dir.path(), "toy", &model, &handle, &labels).is_err());
    }

    #[test]
    fn deletion_removes_files_and_logs_first() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let (handle, labels) = subset();
        let mut store = Store::create(dir.path(), "toy", &model, &handle, &labels).unwrap();
        store.delete_forget_subsets(&[0], "generated").unwrap();
        assert!(!dir.path().join("subsets/class_0.manifest").exists());
        store.audit_no_forget_samples(&[0]).unwrap();
        assert!(store.audit_no_forget_samples(&[1]).is_err());
        assert_eq!(store.deleted_classes(), vec![0]);
        assert_eq!(store.stored_count(&[0]), 0);
        assert_eq!(store.stored_count(&[1, 2]), 2);
        // Reopen still passes integrity checks.
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.manifest.log.len(), 1);
    }

    #[test]
    fn unlogged_deletion_breaks_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let (handle, labels) = subset();
        Store::create(dir.path(), "toy", &model, &handle, &labels).unwrap();
        fs::remove_file(dir.path().join("subsets/class_1.manifest")).unwrap();
        let err = Store::open(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }

    #[test]
    fn results_chain_to_parents() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let (handle, labels) = subset();
        let mut store = Store::create(dir.path(), "toy", &model, &handle, &labels).unwrap();
        let child = build_model(&ModelConfig::desk(Geometry::new(8, 8, 1), 3), 2).unwrap();
        store
            .record_result(
                "rl-c0",
                &child,
                &empty_report(&child),
                &[0],
                "real",
                "rl",
                model.weight_digest(),
            )
            .unwrap();
        store.verify_provenance_chain().unwrap();
        assert_eq!(
            store.latest_checkpoint_path(),
            dir.path().join("results/rl-c0.ckpt")
        );
        assert!(store.find_completed_request(&[0], "real", "rl").is_some());
        assert!(store.find_completed_request(&[0], "real", "ft").is_none());

        // Tamper: claim a parent digest nobody has.
        store.manifest.log.last_mut().unwrap().parent_digest = Some("00".repeat(32));
        let err = store.verify_provenance_chain().unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn non_real_unlearn_without_deletion_entry_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let (handle, labels) = subset();
        let mut store = Store::create(dir.path(), "toy", &model, &handle, &labels).unwrap();
        store
            .record_result(
                "bad",
                &model,
                &empty_report(&model),
                &[0],
                "generated",
                "rl",
                model.weight_digest(),
            )
            .unwrap();
        let err = Store::open(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
    }
}
