//! Config-driven orchestration: train the original model and populate the
//! store, service forget requests against it, and run sweep grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;
use serde_json::json;
use unlearn_core::classifier::{
    build_model, train, ModelConfig, ModelState, TrainBudget, TrainData, TrainError,
};
use unlearn_core::dataset::{
    partition_classes, rank_by_confidence, select_subset, LabeledImageDataset, SelectionStrategy,
    Split,
};
use unlearn_core::evalkit::{evaluate, MetricsReport};
use unlearn_core::forge::{
    concat_batches, generate_samples, make_noise_batch, train_projector, GeneratorConfig,
};
use unlearn_core::unlearner::{unlearn, ForgetData, Method, StopRule, UnlearnRequest, UnlearnResult};

use crate::checkpoint;
use crate::datasrc::{load_dataset, DatasetSpec};
use crate::error::{LabError, Result};
use crate::report::{self, MeanStd};
use crate::store::Store;

/// Where real forget data is replaced by a stand-in batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForgetDataMode {
    Real,
    Noise,
    Generated,
}

impl ForgetDataMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ForgetDataMode::Real => "real",
            ForgetDataMode::Noise => "noise",
            ForgetDataMode::Generated => "generated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "real" => Some(ForgetDataMode::Real),
            "noise" => Some(ForgetDataMode::Noise),
            "generated" => Some(ForgetDataMode::Generated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    conv_channels: Option<Vec<usize>>,
    head_widths: Option<Vec<usize>>,
    dropout_rate: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSection {
    pub fraction: f64,
    pub strategy: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgetSection {
    pub classes: Vec<usize>,
    pub method: String,
    pub mode: String,
    /// Fixed optimizer-step budget for the unlearning run.
    pub iters: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop early once forget accuracy drops to this (percent).
    pub stop_forget_acc: Option<f64>,
    pub check_every: Option<usize>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub noise_dim: Option<usize>,
    pub hidden_width: Option<usize>,
    pub smoothing_eps: Option<f64>,
    pub steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<String>,
    pub strategies: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentConfigRepr {
    output_dir: String,
    seeds: Vec<u64>,
    dataset: DatasetSpec,
    model: Option<ModelSection>,
    train: TrainSection,
    subset: SubsetSection,
    forget: ForgetSection,
    generator: Option<GeneratorSection>,
    sweep: Option<SweepSection>,
}

/// Fully validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    model: Option<ModelSection>,
    pub train: TrainSection,
    pub subset_fraction: f64,
    pub subset_strategy: SelectionStrategy,
    pub forget_classes: Vec<usize>,
    pub forget_method: Method,
    pub forget_mode: ForgetDataMode,
    pub forget: ForgetSection,
    pub generator: GeneratorSection,
    pub sweep: Option<SweepSection>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let repr: ExperimentConfigRepr =
            toml::from_str(text).map_err(|e| LabError::Config(format!("experiment config: {e}")))?;
        // Reuse the dataset spec's own validation by bouncing it through
        // its TOML form.
        let subset_strategy = SelectionStrategy::parse(&repr.subset.strategy).ok_or_else(|| {
            LabError::Config(format!("unknown subset strategy {:?}", repr.subset.strategy))
        })?;
        let forget_method = Method::parse(&repr.forget.method).ok_or_else(|| {
            LabError::Config(format!("unknown unlearn method {:?}", repr.forget.method))
        })?;
        let forget_mode = ForgetDataMode::parse(&repr.forget.mode).ok_or_else(|| {
            LabError::Config(format!("unknown forget data mode {:?}", repr.forget.mode))
        })?;
        if !(repr.subset.fraction > 0.0 && repr.subset.fraction <= 1.0) {
            return Err(LabError::Config(format!(
                "subset fraction {} outside (0, 1]",
                repr.subset.fraction
            )));
        }
        if repr.seeds.is_empty() {
            return Err(LabError::Config("seeds list is empty".into()));
        }
        if repr.forget.classes.is_empty() {
            return Err(LabError::Config("forget class list is empty".into()));
        }
        Ok(ExperimentConfig {
            output_dir: PathBuf::from(&repr.output_dir),
            seeds: repr.seeds,
            dataset: repr.dataset,
            model: repr.model,
            train: repr.train,
            subset_fraction: repr.subset.fraction,
            subset_strategy,
            forget_classes: repr.forget.classes.clone(),
            forget_method,
            forget_mode,
            forget: repr.forget,
            generator: repr.generator.unwrap_or_default(),
            sweep: repr.sweep,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn model_config(&self, dataset: &LabeledImageDataset) -> Result<ModelConfig> {
        let mut config = ModelConfig::desk(dataset.geometry(), dataset.num_classes());
        if let Some(section) = &self.model {
            if let Some(cc) = &section.conv_channels {
                config.conv_channels = cc.clone();
            }
            if let Some(hw) = &section.head_widths {
                if hw.last() != Some(&dataset.num_classes()) {
                    return Err(LabError::Config(format!(
                        "head_widths must end with the class count {}",
                        dataset.num_classes()
                    )));
                }
                config.head_widths = hw.clone();
            }
            if let Some(d) = section.dropout_rate {
                config.dropout_rate = d;
            }
        }
        Ok(config)
    }

    pub fn generator_config(&self, seed: u64) -> GeneratorConfig {
        let mut g = GeneratorConfig::desk(seed);
        if let Some(v) = self.generator.noise_dim {
            g.noise_dim = v;
        }
        if let Some(v) = self.generator.hidden_width {
            g.hidden_width = v;
        }
        if let Some(v) = self.generator.smoothing_eps {
            g.smoothing_eps = v;
        }
        if let Some(v) = self.generator.steps {
            g.steps = v;
        }
        if let Some(v) = self.generator.learning_rate {
            g.learning_rate = v;
        }
        if let Some(v) = self.generator.batch {
            g.batch = v;
        }
        g
    }

    fn unlearn_budget(&self, seed: u64) -> TrainBudget {
        TrainBudget::fixed(
            self.forget.iters,
            self.forget.batch_size,
            self.forget.learning_rate,
            seed,
        )
    }

    fn stop_rule(&self) -> Option<StopRule> {
        self.forget.stop_forget_acc.map(|acc| StopRule {
            forget_acc_at_most: acc,
            check_every: self.forget.check_every.unwrap_or(10),
        })
    }
}

fn train_data<'a>(dataset: &'a LabeledImageDataset, split: Split) -> TrainData<'a> {
    TrainData {
        samples: dataset
            .split_indices(split)
            .into_iter()
            .map(|i| (dataset.image(i), dataset.label(i)))
            .collect(),
    }
}

fn map_train_error(e: TrainError) -> LabError {
    match e {
        TrainError::Diverged { .. } => {
            LabError::Diverged("training loss went non-finite".into())
        }
        TrainError::Core(c) => c.into(),
    }
}

/// Outcome of `run_train`: the populated store plus the original model's
/// metrics report.
pub struct TrainOutcome {
    pub store: Store,
    pub model: ModelState,
    pub report: MetricsReport,
    pub iterations_used: usize,
}

/// Train the original model, rank and select the stored subset, and
/// populate a fresh store at `store_root`.
pub fn run_train(config: &ExperimentConfig, store_root: &Path, seed: u64) -> Result<TrainOutcome> {
    let dataset = load_dataset(&config.dataset)?;
    let model_config = config.model_config(&dataset)?;
    let init = build_model(&model_config, seed)?;
    let budget = TrainBudget::epochs(
        config.train.max_epochs,
        config.train.patience,
        config.train.batch_size,
        config.train.learning_rate,
        seed,
    );
    let data = train_data(&dataset, Split::Train);
    let val = train_data(&dataset, Split::Val);
    let trained = train(&init, &data, Some(&val), &budget, None).map_err(map_train_error)?;

    let ranked = rank_by_confidence(&trained.model, &dataset, Split::Train)?;
    let subset = select_subset(&ranked, config.subset_strategy, config.subset_fraction, seed)?;

    let store = Store::create(
        store_root,
        dataset.id(),
        &trained.model,
        &subset,
        dataset.labels(),
    )?;

    // The original report has no forget classes yet; evaluate with the
    // configured request's partition so the four cells are meaningful.
    let partition = partition_classes(
        dataset.num_classes(),
        &config.forget_classes.iter().copied().collect(),
    )?;
    let metrics = evaluate(&trained.model, &dataset, &partition, None)?;
    report::write_report_json(&store.root().join("original.report.json"), &metrics)?;

    Ok(TrainOutcome {
        store,
        model: trained.model,
        report: metrics,
        iterations_used: trained.iterations_used,
    })
}

/// Outcome of a forget request.
#[derive(Debug)]
pub struct ForgetOutcome {
    pub result: UnlearnResult,
    pub report: MetricsReport,
    /// True when an identical completed request was found and reused.
    pub reused: bool,
    pub name: String,
}

fn result_name(classes: &[usize], method: Method, mode: ForgetDataMode, seed: u64) -> String {
    let cs: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
    format!("{}-{}-c{}-s{seed}", method.as_str(), mode.as_str(), cs.join("_"))
}

/// Service one forget request against an existing store.
///
/// In `noise`/`generated` mode the stored forget-class files are deleted
/// and the deletion logged before any unlearning step runs; the stand-in
/// batch has the same sample count as the deleted data.
#[allow(clippy::too_many_arguments)]
pub fn handle_forget_request(
    store: &mut Store,
    dataset: &LabeledImageDataset,
    config: &ExperimentConfig,
    classes: &[usize],
    method: Method,
    mode: ForgetDataMode,
    seed: u64,
) -> Result<ForgetOutcome> {
    let mut classes = classes.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if let Some(&bad) = classes.iter().find(|&&c| c >= dataset.num_classes()) {
        return Err(LabError::Config(format!(
            "forget class {bad} out of range for {} classes",
            dataset.num_classes()
        )));
    }
    if mode != ForgetDataMode::Real && method != Method::RandomLabel {
        return Err(LabError::Config(
            "noise/generated stand-ins only apply to the rl method".into(),
        ));
    }

    let name = result_name(&classes, method, mode, seed);

    // Idempotency: a completed identical request is returned as-is.
    if let Some(entry) = store.find_completed_request(&classes, mode.as_str(), method.as_str()) {
        let rel = entry.result_path.clone().ok_or_else(|| {
            LabError::StoreIntegrity(format!("log entry {} has no result path", entry.seq))
        })?;
        let model = checkpoint::load_classifier(&store.root().join(&rel))?;
        let stem = rel.trim_end_matches(".ckpt").to_string();
        let metrics = report::read_report_json(&store.root().join(format!("{stem}.report.json")))?;
        let parent_digest = entry
            .parent_digest
            .as_ref()
            .and_then(|h| hex::decode(h).ok())
            .and_then(|v| <[u8; 32]>::try_from(v).ok());
        return Ok(ForgetOutcome {
            result: UnlearnResult {
                model,
                method,
                iterations_used: 0,
                wall_time_secs: 0.0,
                parent_digest,
            },
            report: metrics,
            reused: true,
            name,
        });
    }

    let partition = partition_classes(dataset.num_classes(), &classes.iter().copied().collect())?;
    let parent = checkpoint::load_classifier(&store.latest_checkpoint_path())?;
    let subset = store.load_subset_union()?;
    let (retain_handle, forget_handle) = subset.split_by_partition(dataset, &partition);
    if retain_handle.is_empty() {
        return Err(LabError::Config("no retain samples left in the store".into()));
    }

    let budget = config.unlearn_budget(seed);
    let stop_rule = config.stop_rule();

    let started = Instant::now();
    let mut result = match mode {
        ForgetDataMode::Real => {
            let forget_data = match method {
                Method::RandomLabel => ForgetData::Real(&forget_handle),
                _ => ForgetData::None,
            };
            let request = UnlearnRequest {
                method,
                partition: &partition,
                retain_data: &retain_handle,
                forget_data,
                budget,
                seed,
                stop_rule,
            };
            unlearn(&parent, dataset, &request)?
        }
        ForgetDataMode::Noise | ForgetDataMode::Generated => {
            // Count the stand-in batch before files disappear, falling
            // back to the logged counts when they are already gone.
            let mut counts: BTreeMap<usize, usize> = classes
                .iter()
                .filter_map(|&c| store.load_class_subset(c).ok().flatten().map(|h| (c, h.len())))
                .collect();
            if counts.is_empty() {
                counts = store.deleted_counts_from_log(&classes);
            }
            if counts.is_empty() {
                return Err(LabError::StoreIntegrity(
                    "no stored or logged forget-class counts to size the stand-in batch".into(),
                ));
            }

            // Deletion-first: files removed and logged before any
            // optimizer step below.
            store.delete_forget_subsets(&classes, mode.as_str())?;
            store.audit_no_forget_samples(&classes)?;

            let batch = match mode {
                ForgetDataMode::Generated => {
                    let gen_config = config.generator_config(seed);
                    let projector =
                        train_projector(&parent, &classes.iter().copied().collect(), &gen_config)?;
                    let batches: Vec<_> = counts
                        .iter()
                        .map(|(&class, &count)| {
                            generate_samples(&projector, class, count, seed ^ class as u64)
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    checkpoint::save_projector(
                        &store.root().join(format!("results/{name}.projector.ckpt")),
                        &projector,
                    )?;
                    concat_batches(&batches)?
                }
                _ => {
                    let batches: Vec<_> = counts
                        .iter()
                        .map(|(&class, &count)| {
                            make_noise_batch(dataset.geometry(), class, count, seed ^ class as u64)
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    concat_batches(&batches)?
                }
            };
            let request = UnlearnRequest {
                method: Method::RandomLabel,
                partition: &partition,
                retain_data: &retain_handle,
                forget_data: ForgetData::Synthetic(&batch),
                budget,
                seed,
                stop_rule,
            };
            unlearn(&parent, dataset, &request)?
        }
    };
    result.wall_time_secs = started.elapsed().as_secs_f64();

    let metrics = evaluate(&result.model, dataset, &partition, None)?;
    store.record_result(
        &name,
        &result.model,
        &metrics,
        &classes,
        mode.as_str(),
        method.as_str(),
        parent.weight_digest(),
    )?;
    let summary = json!({
        "method": method.as_str(),
        "mode": mode.as_str(),
        "classes": classes,
        "iterations": result.iterations_used,
        "wall_time": result.wall_time_secs,
        "parent_digest": hex::encode(parent.weight_digest()),
        "result_digest": hex::encode(result.model.weight_digest()),
    });
    let summary_path = store.root().join(format!("results/{name}.summary.json"));
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )
    .map_err(|e| LabError::io(&summary_path, e))?;

    Ok(ForgetOutcome {
        result,
        report: metrics,
        reused: false,
        name,
    })
}

/// One sweep cell: a (method, strategy, seed) triple run end to end in its
/// own store directory.
#[derive(Debug)]
pub struct SweepCell {
    pub method: Method,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsReport, String>,
}

pub struct SweepOutcome {
    pub cells: Vec<SweepCell>,
    /// Rendered mean ± std summary, one row per metric.
    pub table: String,
}

/// Run the full method x strategy x seed grid. Each cell trains its own
/// original model with the cell's selection strategy, then services one
/// forget request. Failed cells are recorded and the sweep continues.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| LabError::Config("config has no [sweep] section".into()))?;
    if sweep.methods.is_empty() || sweep.strategies.is_empty() {
        return Err(LabError::Config("sweep grid is empty".into()));
    }
    let methods: Vec<Method> = sweep
        .methods
        .iter()
        .map(|m| {
            Method::parse(m).ok_or_else(|| LabError::Config(format!("unknown method {m:?}")))
        })
        .collect::<Result<_>>()?;
    let strategies: Vec<SelectionStrategy> = sweep
        .strategies
        .iter()
        .map(|s| {
            SelectionStrategy::parse(s)
                .ok_or_else(|| LabError::Config(format!("unknown strategy {s:?}")))
        })
        .collect::<Result<_>>()?;

    fs::create_dir_all(&config.output_dir).map_err(|e| LabError::io(&config.output_dir, e))?;
    let dataset = load_dataset(&config.dataset)?;

    let mut cells = Vec::new();
    for &method in &methods {
        for &strategy in &strategies {
            for &seed in &config.seeds {
                let outcome = run_cell(config, &dataset, method, strategy, seed);
                cells.push(SweepCell {
                    method,
                    strategy,
                    seed,
                    outcome: outcome.map_err(|e| e.to_string()),
                });
            }
        }
    }

    let table = render_sweep_table(&methods, &strategies, &config.seeds, &cells);
    fs::write(config.output_dir.join("sweep_summary.txt"), &table)
        .map_err(|e| LabError::io(config.output_dir.join("sweep_summary.txt"), e))?;
    let records: Vec<serde_json::Value> = cells
        .iter()
        .map(|c| {
            json!({
                "method": c.method.as_str(),
                "strategy": c.strategy.as_str(),
                "seed": c.seed,
                "ok": c.outcome.is_ok(),
                "report": c.outcome.as_ref().ok().map(report::report_json),
                "error": c.outcome.as_ref().err(),
            })
        })
        .collect();
    let records_path = config.output_dir.join("sweep_records.json");
    fs::write(
        &records_path,
        serde_json::to_string_pretty(&records).expect("records serialize") + "\n",
    )
    .map_err(|e| LabError::io(&records_path, e))?;

    Ok(SweepOutcome { cells, table })
}

fn run_cell(
    config: &ExperimentConfig,
    dataset: &LabeledImageDataset,
    method: Method,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<MetricsReport> {
    let cell_dir = config
        .output_dir
        .join(format!("{}-{}-s{seed}", method.as_str(), strategy.as_str()));
    if cell_dir.exists() {
        fs::remove_dir_all(&cell_dir).map_err(|e| LabError::io(&cell_dir, e))?;
    }
    let mut cell_config = config.clone();
    cell_config.subset_strategy = strategy;
    let trained = run_train(&cell_config, &cell_dir, seed)?;
    let mut store = trained.store;
    let outcome = handle_forget_request(
        &mut store,
        dataset,
        &cell_config,
        &config.forget_classes,
        method,
        config.forget_mode,
        seed,
    )?;
    Ok(outcome.report)
}

fn render_sweep_table(
    methods: &[Method],
    strategies: &[SelectionStrategy],
    seeds: &[u64],
    cells: &[SweepCell],
) -> String {
    let metric_names = ["acc_retain_train", "acc_forget_train", "acc_retain_test", "acc_forget_test"];
    let mut out = String::new();
    out.push_str(&format!("seeds: {seeds:?}\n\n"));
    for &method in methods {
        for &strategy in strategies {
            let reports: Vec<&MetricsReport> = cells
                .iter()
                .filter(|c| c.method == method && c.strategy == strategy)
                .filter_map(|c| c.outcome.as_ref().ok())
                .collect();
            let failed = cells
                .iter()
                .filter(|c| c.method == method && c.strategy == strategy)
                .filter(|c| c.outcome.is_err())
                .count();
            out.push_str(&format!("[{} / {}]", method.as_str(), strategy.as_str()));
            if failed > 0 {
                out.push_str(&format!("  ({failed} failed)"));
            }
            out.push('\n');
            for (slot, metric) in metric_names.iter().enumerate() {
                let values: Vec<f64> = reports
                    .iter()
                    .filter_map(|r| r.cells()[slot].2.map(|c| c.percent))
                    .collect();
                match MeanStd::of(&values) {
                    Some(agg) => out.push_str(&format!("  {metric}: {}\n", agg.render())),
                    None => out.push_str(&format!("  {metric}: absent\n")),
                }
            }
            out.push('\n');
        }
    }
    out
}
