//! End-to-end flows through the harness: train + store population, forget
//! requests in every data mode, idempotent repeats, and sweep grids.

use std::fs;
use std::path::Path;

use unlearn_core::unlearner::Method;
use unlearn_lab::datasrc::load_dataset;
use unlearn_lab::harness::{self, ExperimentConfig, ForgetDataMode};
use unlearn_lab::store::{LogAction, Store};

/// Small, fast experiment: 12 images per class, short budgets.
fn quick_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
output_dir = "unused"
seeds = [1]

[dataset]
source_path = "synthetic:tenclass:12"
image_size = [16, 16]
channels = 1
split_ratios = [0.7, 0.15, 0.15]
seed = 7

[train]
max_epochs = 4
patience = 2
batch_size = 16
learning_rate = 1e-3
seed = 1

[subset]
fraction = 0.5
strategy = "mix"

[forget]
classes = [0]
method = "rl"
mode = "real"
iters = 12
batch_size = 8
learning_rate = 1e-3

[generator]
noise_dim = 8
hidden_width = 32
steps = 40
batch = 8

[sweep]
methods = ["rl"]
strategies = ["top", "random"]
"#,
    )
    .unwrap()
}

fn subset_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(root.join("subsets"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn train_populates_store_and_reruns_bit_identically() {
    let config = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let a = harness::run_train(&config, &dir.path().join("a"), 1).unwrap();
    let b = harness::run_train(&config, &dir.path().join("b"), 1).unwrap();

    // Same seed, fresh directory: identical weights and identical manifests.
    assert_eq!(a.model.weight_digest(), b.model.weight_digest());
    assert_eq!(
        subset_bytes(&dir.path().join("a")),
        subset_bytes(&dir.path().join("b"))
    );

    // Ten per-class subset files; each class stores floor(0.5 * 8) = 4
    // samples (mix keeps 2 top + 2 bottom).
    let store = Store::open(&dir.path().join("a")).unwrap();
    assert_eq!(store.manifest.subsets.len(), 10);
    for entry in store.manifest.subsets.values() {
        assert_eq!(entry.count, 4);
    }
    assert!(dir.path().join("a/original.ckpt").exists());
    assert!(dir.path().join("a/original.report.json").exists());
    assert_eq!(
        store.load_original().unwrap().weight_digest(),
        a.model.weight_digest()
    );

    // A different seed trains a different model.
    let c = harness::run_train(&config, &dir.path().join("c"), 2).unwrap();
    assert_ne!(a.model.weight_digest(), c.model.weight_digest());
}

#[test]
fn full_fraction_stores_every_train_sample() {
    let mut config = quick_config();
    config.subset_fraction = 1.0;
    config.subset_strategy = unlearn_core::dataset::SelectionStrategy::Full;
    let dir = tempfile::tempdir().unwrap();
    let outcome = harness::run_train(&config, dir.path(), 1).unwrap();
    let dataset = load_dataset(&config.dataset).unwrap();
    let union = outcome.store.load_subset_union().unwrap();
    assert_eq!(
        union.indices,
        dataset.split_indices(unlearn_core::dataset::Split::Train)
    );
}

#[test]
fn real_forget_request_records_and_repeats_idempotently() {
    let config = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let dataset = load_dataset(&config.dataset).unwrap();
    let trained = harness::run_train(&config, dir.path(), 1).unwrap();
    let mut store = trained.store;

    let first = harness::handle_forget_request(
        &mut store,
        &dataset,
        &config,
        &[0],
        Method::RandomLabel,
        ForgetDataMode::Real,
        1,
    )
    .unwrap();
    assert!(!first.reused);
    assert_eq!(first.result.parent_digest, Some(trained.model.weight_digest()));
    assert!(dir.path().join(format!("results/{}.ckpt", first.name)).exists());
    assert!(dir.path().join(format!("results/{}.report.json", first.name)).exists());
    assert!(dir.path().join(format!("results/{}.summary.json", first.name)).exists());
    store.verify_provenance_chain().unwrap();

    // Real mode leaves the stored forget subset in place.
    assert!(store.load_class_subset(0).unwrap().is_some());

    // The identical request is served from the log without retraining.
    let again = harness::handle_forget_request(
        &mut store,
        &dataset,
        &config,
        &[0],
        Method::RandomLabel,
        ForgetDataMode::Real,
        1,
    )
    .unwrap();
    assert!(again.reused);
    assert_eq!(
        again.result.model.weight_digest(),
        first.result.model.weight_digest()
    );
    assert_eq!(again.report, first.report);

    // Reopening the store sees the logged result as the latest checkpoint.
    let reopened = Store::open(dir.path()).unwrap();
    assert_eq!(
        reopened.latest_checkpoint_path(),
        dir.path().join(format!("results/{}.ckpt", first.name))
    );
}

#[test]
fn generated_mode_deletes_forget_data_before_unlearning() {
    let config = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let dataset = load_dataset(&config.dataset).unwrap();
    let trained = harness::run_train(&config, dir.path(), 1).unwrap();
    let mut store = trained.store;
    let stored_forget = store.load_class_subset(0).unwrap().unwrap().len();

    let outcome = harness::handle_forget_request(
        &mut store,
        &dataset,
        &config,
        &[0],
        Method::RandomLabel,
        ForgetDataMode::Generated,
        1,
    )
    .unwrap();

    // The class-0 subset file is gone and audited out.
    assert!(!dir.path().join("subsets/class_0.manifest").exists());
    assert!(store.load_class_subset(0).unwrap().is_none());
    store.audit_no_forget_samples(&[0]).unwrap();
    assert_eq!(store.deleted_classes(), vec![0]);

    // The log shows the deletion strictly before the unlearn entry, with
    // the removed per-class counts recorded.
    let delete_pos = store
        .manifest
        .log
        .iter()
        .position(|e| e.action == LogAction::DeleteForgetSubsets)
        .unwrap();
    let unlearn_pos = store
        .manifest
        .log
        .iter()
        .position(|e| e.action == LogAction::Unlearn)
        .unwrap();
    assert!(delete_pos < unlearn_pos);
    assert_eq!(
        store.deleted_counts_from_log(&[0]).get(&0),
        Some(&stored_forget)
    );

    // Generated mode also persists the trained projector.
    assert!(dir
        .path()
        .join(format!("results/{}.projector.ckpt", outcome.name))
        .exists());

    // Integrity (including deletion-before-unlearning ordering) holds on
    // reopen.
    Store::open(dir.path()).unwrap();
}

#[test]
fn noise_after_deletion_sizes_batch_from_log() {
    let config = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let dataset = load_dataset(&config.dataset).unwrap();
    let trained = harness::run_train(&config, dir.path(), 1).unwrap();
    let mut store = trained.store;

    // First request deletes the files; a later request in another non-real
    // mode must still find the counts in the log.
    harness::handle_forget_request(
        &mut store,
        &dataset,
        &config,
        &[0],
        Method::RandomLabel,
        ForgetDataMode::Noise,
        1,
    )
    .unwrap();
    let second = harness::handle_forget_request(
        &mut store,
        &dataset,
        &config,
        &[0],
        Method::RandomLabel,
        ForgetDataMode::Generated,
        1,
    )
    .unwrap();
    assert!(!second.reused);
    Store::open(dir.path()).unwrap();
}

#[test]
fn non_real_modes_reject_rt_and_ft() {
    let config = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let dataset = load_dataset(&config.dataset).unwrap();
    let trained = harness::run_train(&config, dir.path(), 1).unwrap();
    let mut store = trained.store;
    for method in [Method::Retrain, Method::FineTune] {
        let err = harness::handle_forget_request(
            &mut store,
            &dataset,
            &config,
            &[0],
            method,
            ForgetDataMode::Noise,
            1,
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
    }
    // Out-of-range class is a config error too.
    let err = harness::handle_forget_request(
        &mut store,
        &dataset,
        &config,
        &[10],
        Method::RandomLabel,
        ForgetDataMode::Real,
        1,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn sweep_runs_every_cell_and_writes_summaries() {
    let mut config = quick_config();
    let dir = tempfile::tempdir().unwrap();
    config.output_dir = dir.path().join("sweep");
    let outcome = harness::run_sweep(&config).unwrap();

    // 1 method x 2 strategies x 1 seed.
    assert_eq!(outcome.cells.len(), 2);
    for cell in &outcome.cells {
        assert!(cell.outcome.is_ok(), "{:?}", cell.outcome);
    }
    assert!(config.output_dir.join("sweep_summary.txt").exists());
    assert!(config.output_dir.join("sweep_records.json").exists());
    assert!(config.output_dir.join("rl-top-s1/store.json").exists());
    assert!(config.output_dir.join("rl-random-s1/store.json").exists());
    assert!(outcome.table.contains("acc_retain_test"));

    // A sweep cell equals the same request run directly.
    let dataset = load_dataset(&config.dataset).unwrap();
    let mut cell_config = config.clone();
    cell_config.subset_strategy = unlearn_core::dataset::SelectionStrategy::Top;
    let trained = harness::run_train(&cell_config, &dir.path().join("direct"), 1).unwrap();
    let mut store = trained.store;
    let direct = harness::handle_forget_request(
        &mut store,
        &dataset,
        &cell_config,
        &[0],
        Method::RandomLabel,
        ForgetDataMode::Real,
        1,
    )
    .unwrap();
    let cell = outcome
        .cells
        .iter()
        .find(|c| c.strategy == unlearn_core::dataset::SelectionStrategy::Top)
        .unwrap();
    assert_eq!(cell.outcome.as_ref().unwrap(), &direct.report);
}
