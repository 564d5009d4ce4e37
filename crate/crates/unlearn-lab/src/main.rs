//! Command-line entry point for the class-unlearning laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unlearn_core::classifier::ModelState;
use unlearn_core::dataset::{partition_classes, Split};
use unlearn_core::evalkit::compose_comparison_table;
use unlearn_core::unlearner::Method;

use unlearn_lab::checkpoint;
use unlearn_lab::datasrc::load_dataset;
use unlearn_lab::error::{LabError, Result};
use unlearn_lab::features::export_features;
use unlearn_lab::harness::{self, ExperimentConfig, ForgetDataMode};
use unlearn_lab::report::{read_report_json, report_json};
use unlearn_lab::store::{Store, STORE_ENV_VAR};

#[derive(Parser)]
#[command(
    name = "unlearn-lab",
    about = "Train, store, and selectively forget image classes",
    version
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Store root directory; defaults to the UNLEARN_STORE environment
    /// variable.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the original model and populate the store.
    Train {
        /// Run seed; defaults to the first entry of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Service a forget request against the store.
    Forget {
        /// Comma-separated class indices, e.g. --classes 0,3.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<usize>,
        /// rt, ft, or rl.
        #[arg(long)]
        method: String,
        /// real, noise, or generated.
        #[arg(long, default_value = "real")]
        mode: String,
        /// Override the config's fixed iteration budget.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the method x strategy x seed grid from the config's [sweep]
    /// section.
    Sweep,
    /// Evaluate a checkpoint (default: the store's latest) and print its
    /// metrics report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export penultimate features of a split to CSV.
    ExportFeatures {
        #[arg(long)]
        out: PathBuf,
        /// train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a comparison table of all stored metrics reports.
    Report,
}

fn store_root(cli: &Cli) -> Result<PathBuf> {
    if let Some(p) = &cli.store {
        return Ok(p.clone());
    }
    match std::env::var_os(STORE_ENV_VAR) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(LabError::Config(format!(
            "no store root: pass --store or set {STORE_ENV_VAR}"
        ))),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| LabError::Config("this command needs --config".into()))?;
    ExperimentConfig::from_file(path)
}

fn pick_checkpoint(store: &Store, explicit: &Option<PathBuf>) -> Result<ModelState> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => store.latest_checkpoint_path(),
    };
    checkpoint::load_classifier(&path)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { seed } => {
            let config = load_config(cli)?;
            let root = store_root(cli)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let outcome = harness::run_train(&config, &root, seed)?;
            println!(
                "trained original model in {} iterations, digest {}",
                outcome.iterations_used,
                hex::encode(outcome.model.weight_digest())
            );
            println!("{}", serde_json::to_string_pretty(&report_json(&outcome.report)).unwrap());
        }
        Command::Forget { classes, method, mode, iters, seed } => {
            let config = load_config(cli)?;
            let root = store_root(cli)?;
            let method = Method::parse(method)
                .ok_or_else(|| LabError::Config(format!("unknown method {method:?}")))?;
            let mode = ForgetDataMode::parse(mode)
                .ok_or_else(|| LabError::Config(format!("unknown mode {mode:?}")))?;
            let classes = if classes.is_empty() { config.forget_classes.clone() } else { classes.clone() };
            let seed = seed.unwrap_or(config.seeds[0]);
            let mut config = config;
            if let Some(iters) = iters {
                config.forget.iters = *iters;
            }
            let dataset = load_dataset(&config.dataset)?;
            let mut store = Store::open(&root)?;
            let outcome = harness::handle_forget_request(
                &mut store, &dataset, &config, &classes, method, mode, seed,
            )?;
            if outcome.reused {
                println!("request already serviced; returning stored result {}", outcome.name);
            } else {
                println!(
                    "unlearned in {} iterations ({:.2}s), digest {}",
                    outcome.result.iterations_used,
                    outcome.result.wall_time_secs,
                    hex::encode(outcome.result.model.weight_digest())
                );
            }
            println!("{}", serde_json::to_string_pretty(&report_json(&outcome.report)).unwrap());
        }
        Command::Sweep => {
            let config = load_config(cli)?;
            let outcome = harness::run_sweep(&config)?;
            print!("{}", outcome.table);
            let failed = outcome.cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{} cells, {failed} failed", outcome.cells.len());
        }
        Command::Eval { checkpoint } => {
            let config = load_config(cli)?;
            let root = store_root(cli)?;
            let store = Store::open(&root)?;
            let model = pick_checkpoint(&store, checkpoint)?;
            let dataset = load_dataset(&config.dataset)?;
            let partition = partition_classes(
                dataset.num_classes(),
                &config.forget_classes.iter().copied().collect(),
            )?;
            let metrics = unlearn_core::evalkit::evaluate(&model, &dataset, &partition, None)?;
            println!("{}", serde_json::to_string_pretty(&report_json(&metrics)).unwrap());
        }
        Command::ExportFeatures { out, split, checkpoint } => {
            let config = load_config(cli)?;
            let root = store_root(cli)?;
            let store = Store::open(&root)?;
            let model = pick_checkpoint(&store, checkpoint)?;
            let dataset = load_dataset(&config.dataset)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(LabError::Config(format!("unknown split {other:?}"))),
            };
            let partition = partition_classes(
                dataset.num_classes(),
                &config.forget_classes.iter().copied().collect(),
            )?;
            let indices = dataset.split_indices(split);
            export_features(&model, &dataset, &partition, &indices, out)?;
            println!("wrote {} feature rows to {}", indices.len(), out.display());
        }
        Command::Report => {
            let root = store_root(cli)?;
            let store = Store::open(&root)?;
            let mut labels = vec!["original".to_string()];
            let mut reports = vec![read_report_json(&store.root().join("original.report.json"))?];
            for entry in &store.manifest.log {
                if let Some(rel) = &entry.result_path {
                    let stem = rel.trim_end_matches(".ckpt");
                    let path = store.root().join(format!("{stem}.report.json"));
                    if path.exists() {
                        labels.push(stem.trim_start_matches("results/").to_string());
                        reports.push(read_report_json(&path)?);
                    }
                }
            }
            let table = compose_comparison_table(&reports, &labels)
                .map_err(LabError::from)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
