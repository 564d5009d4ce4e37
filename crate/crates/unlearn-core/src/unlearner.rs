//! The three unlearning procedures over an explicit iteration budget.
//!
//! - Retrain (RT): fresh initialization, trained only on the retain set.
//! - Fine-tune (FT): continues the well-trained parent on the retain set,
//!   relying on catastrophic forgetting to erode the forget class.
//! - Random Label (RL): fine-tunes the parent on the retain set merged with
//!   forget samples (real or synthetic) whose labels are replaced by uniform
//!   retain-class draws.
//!
//! Every method keeps all K output classes so forget-class accuracy stays
//! measurable after unlearning.

use alloc::format;
use alloc::vec::Vec;

use crate::classifier::{
    build_model, train, ModelState, StopCheck, TrainBudget, TrainData, TrainError,
};
use crate::dataset::{relabel_random, ClassPartition, LabeledImageDataset, SubsetHandle};
use crate::error::CoreError;
use crate::forge::SyntheticBatch;
use crate::rng;

/// Unlearning method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Retrain,
    FineTune,
    RandomLabel,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Retrain => "rt",
            Method::FineTune => "ft",
            Method::RandomLabel => "rl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rt" => Some(Method::Retrain),
            "ft" => Some(Method::FineTune),
            "rl" => Some(Method::RandomLabel),
            _ => None,
        }
    }
}

/// Forget data handed to RL; RT and FT must not receive any.
pub enum ForgetData<'a> {
    None,
    Real(&'a SubsetHandle),
    Synthetic(&'a SyntheticBatch),
}

/// Optional early stop: halt once forget-set accuracy drops to `eps`,
/// checked every `check_every` optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopRule {
    pub forget_acc_at_most: f64,
    pub check_every: usize,
}

/// One unlearning job description.
pub struct UnlearnRequest<'a> {
    pub method: Method,
    pub partition: &'a ClassPartition,
    pub retain_data: &'a SubsetHandle,
    pub forget_data: ForgetData<'a>,
    pub budget: TrainBudget,
    pub seed: u64,
    pub stop_rule: Option<StopRule>,
}

/// Result of an unlearning run. `wall_time_secs` is zero here; the harness
/// layer fills it in around the call.
#[derive(Debug)]
pub struct UnlearnResult {
    pub model: ModelState,
    pub method: Method,
    pub iterations_used: usize,
    pub wall_time_secs: f64,
    pub parent_digest: Option<[u8; 32]>,
}

fn retain_samples<'a>(
    dataset: &'a LabeledImageDataset,
    retain_data: &SubsetHandle,
    partition: &ClassPartition,
) -> Result<Vec<(&'a [f64], usize)>, CoreError> {
    let mut samples = Vec::with_capacity(retain_data.len());
    for &i in &retain_data.indices {
        let label = dataset.label(i);
        if partition.is_forget(label) {
            return Err(CoreError::Domain(format!(
                "retain data contains forget-class sample {i} (class {label})"
            )));
        }
        samples.push((dataset.image(i), label));
    }
    Ok(samples)
}

/// Collect forget samples with their random retain-class labels.
fn relabeled_forget_samples<'a>(
    dataset: &'a LabeledImageDataset,
    partition: &ClassPartition,
    forget_data: &ForgetData<'a>,
    seed: u64,
) -> Result<Vec<(&'a [f64], usize)>, CoreError> {
    match forget_data {
        ForgetData::None => Err(CoreError::Domain(
            "random-label unlearning needs forget data".into(),
        )),
        ForgetData::Real(handle) => {
            let batch = relabel_random(handle, dataset, partition, seed)?;
            let samples: Vec<(&[f64], usize)> = batch
                .indices
                .iter()
                .zip(&batch.new_labels)
                .map(|(&i, &l)| (dataset.image(i), l))
                .collect();
            audit_labels(&samples, partition)?;
            Ok(samples)
        }
        ForgetData::Synthetic(batch) => {
            // Same uniform-over-retain-classes rule as real samples.
            let retain: Vec<usize> = partition.retain_classes().iter().copied().collect();
            let mut r = rng::substream(seed, 0xFA3E);
            let samples: Vec<(&[f64], usize)> = (0..batch.len())
                .map(|i| {
                    (
                        batch.image(i),
                        retain[rng::uniform_index(&mut r, retain.len())],
                    )
                })
                .collect();
            audit_labels(&samples, partition)?;
            Ok(samples)
        }
    }
}

fn audit_labels(
    samples: &[(&[f64], usize)],
    partition: &ClassPartition,
) -> Result<(), CoreError> {
    if let Some((_, bad)) = samples.iter().find(|(_, l)| partition.is_forget(*l)) {
        return Err(CoreError::ContractViolation(format!(
            "relabeled sample carries forget-class label {bad}"
        )));
    }
    Ok(())
}

fn make_stop_check<'a>(
    rule: &StopRule,
    forget_eval: &'a [(&'a [f64], usize)],
    check: &'a mut dyn FnMut(&ModelState) -> bool,
) -> StopCheck<'a> {
    let _ = forget_eval;
    StopCheck {
        interval: rule.check_every,
        check,
    }
}

fn run_budgeted(
    start: &ModelState,
    data: &TrainData<'_>,
    budget: &TrainBudget,
    stop_rule: Option<&StopRule>,
    forget_eval: &[(&[f64], usize)],
) -> Result<(ModelState, usize), CoreError> {
    let mut closure;
    let stop = match stop_rule {
        Some(rule) if !forget_eval.is_empty() => {
            closure = |m: &ModelState| {
                m.accuracy_on(forget_eval)
                    .map(|acc| acc <= rule.forget_acc_at_most)
                    .unwrap_or(false)
            };
            Some(make_stop_check(rule, forget_eval, &mut closure))
        }
        _ => None,
    };
    match train(start, data, None, budget, stop) {
        Ok(report) => Ok((report.model, report.iterations_used)),
        Err(TrainError::Diverged { .. }) => {
            Err(CoreError::Diverged("unlearning loss went non-finite".into()))
        }
        Err(TrainError::Core(e)) => Err(e),
    }
}

/// Run one unlearning request.
///
/// `parent` is the well-trained model: FT and RL start from its weights, RT
/// reuses only its architecture config (fresh seeded init). The parent is
/// never modified. The real-forget train-split samples (for the stop rule)
/// are drawn from `forget_data` when it is real, otherwise the synthetic
/// batch itself is probed with its source labels.
pub fn unlearn(
    parent: &ModelState,
    dataset: &LabeledImageDataset,
    request: &UnlearnRequest<'_>,
) -> Result<UnlearnResult, CoreError> {
    match (request.method, &request.forget_data) {
        (Method::Retrain | Method::FineTune, ForgetData::None) => {}
        (Method::Retrain | Method::FineTune, _) => {
            return Err(CoreError::Domain(
                "RT and FT rely solely on the retain set; forget data must be none".into(),
            ))
        }
        (Method::RandomLabel, ForgetData::None) => {
            return Err(CoreError::Domain(
                "random-label unlearning requires forget data".into(),
            ))
        }
        (Method::RandomLabel, _) => {}
    }

    let retain = retain_samples(dataset, request.retain_data, request.partition)?;
    if retain.is_empty() {
        return Err(CoreError::Domain("retain set is empty".into()));
    }

    // Forget-accuracy probe set for the optional stop rule.
    let forget_probe: Vec<(&[f64], usize)> = match &request.forget_data {
        ForgetData::Real(handle) => handle
            .indices
            .iter()
            .map(|&i| (dataset.image(i), dataset.label(i)))
            .collect(),
        ForgetData::Synthetic(batch) => (0..batch.len())
            .map(|i| (batch.image(i), batch.source_class(i)))
            .collect(),
        ForgetData::None => {
            // RT/FT may still stop on real train-split forget accuracy.
            (0..dataset.len())
                .filter(|&i| {
                    dataset.split(i) == crate::dataset::Split::Train
                        && request.partition.is_forget(dataset.label(i))
                })
                .map(|i| (dataset.image(i), dataset.label(i)))
                .collect()
        }
    };

    let parent_digest_before = parent.weight_digest();
    let (model, iterations_used) = match request.method {
        Method::Retrain => {
            let fresh = build_model(parent.config(), request.seed)?;
            let data = TrainData { samples: retain };
            let budget = TrainBudget {
                seed: request.seed,
                ..request.budget.clone()
            };
            run_budgeted(&fresh, &data, &budget, request.stop_rule.as_ref(), &forget_probe)?
        }
        Method::FineTune => {
            let data = TrainData { samples: retain };
            let budget = TrainBudget {
                seed: request.seed,
                ..request.budget.clone()
            };
            run_budgeted(parent, &data, &budget, request.stop_rule.as_ref(), &forget_probe)?
        }
        Method::RandomLabel => {
            let mut samples = retain;
            samples.extend(relabeled_forget_samples(
                dataset,
                request.partition,
                &request.forget_data,
                request.seed,
            )?);
            // train() reshuffles the pooled samples every epoch, which
            // interleaves both sources.
            let data = TrainData { samples };
            let budget = TrainBudget {
                seed: request.seed,
                ..request.budget.clone()
            };
            run_budgeted(parent, &data, &budget, request.stop_rule.as_ref(), &forget_probe)?
        }
    };

    debug_assert_eq!(parent.weight_digest(), parent_digest_before);

    // RT must never have seen a forget-class sample.
    if request.method == Method::Retrain {
        for record in model.train_log() {
            for &c in request.partition.forget_classes() {
                if record.class_counts.get(c).copied().unwrap_or(0) != 0 {
                    return Err(CoreError::ContractViolation(format!(
                        "retrain observed forget class {c}"
                    )));
                }
            }
        }
    }

    Ok(UnlearnResult {
        model,
        method: request.method,
        iterations_used,
        wall_time_secs: 0.0,
        parent_digest: match request.method {
            Method::Retrain => None,
            _ => Some(parent.weight_digest()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{Backbone, InitScheme, ModelConfig};
    use crate::dataset::{partition_classes, Geometry, LabeledImageDataset, SelectionStrategy, Split, SubsetRole};
    use alloc::collections::BTreeSet;
    use alloc::string::ToString;
    use alloc::vec;
    use alloc::vec::Vec;

    /// 3-class toy problem on a 4x4 canvas with distinct per-class patterns.
    fn toy_world() -> (LabeledImageDataset, ModelState, ClassPartition) {
        let geometry = Geometry::new(4, 4, 1);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        let mut r = rng::stream(1234);
        for i in 0..90 {
            let class = i % 3;
            for j in 0..16 {
                let row = j / 4;
                let col = j % 4;
                let base: f64 = match class {
                    0 => {
                        if row == 1 {
                            0.9
                        } else {
                            0.1
                        }
                    }
                    1 => {
                        if col == 2 {
                            0.9
                        } else {
                            0.1
                        }
                    }
                    _ => {
                        if row == col {
                            0.9
                        } else {
                            0.1
                        }
                    }
                };
                pixels.push((base + 0.08 * rng::uniform(&mut r)).clamp(0.0, 1.0));
            }
            labels.push(class);
            splits.push(if i < 60 { Split::Train } else { Split::Test });
        }
        let ds = LabeledImageDataset::new(
            "toy3".to_string(),
            geometry,
            pixels,
            labels,
            splits,
            3,
            None,
        )
        .unwrap();
        let cfg = ModelConfig {
            backbone: Backbone::SmallConv,
            geometry,
            conv_channels: vec![4],
            head_widths: vec![8, 3],
            dropout_rate: 0.0,
            init_scheme: InitScheme::KaimingLike,
        };
        let fresh = build_model(&cfg, 5).unwrap();
        let samples: Vec<(&[f64], usize)> = (0..60).map(|i| (ds.image(i), ds.label(i))).collect();
        let data = TrainData { samples };
        let budget = TrainBudget::fixed(150, 16, 1e-2, 7);
        let parent = train(&fresh, &data, None, &budget, None).unwrap().model;
        let forget: BTreeSet<usize> = [0].into_iter().collect();
        let partition = partition_classes(3, &forget).unwrap();
        (ds, parent, partition)
    }

    fn handles(ds: &LabeledImageDataset, partition: &ClassPartition) -> (SubsetHandle, SubsetHandle) {
        let full = SubsetHandle {
            dataset_id: ds.id().to_string(),
            indices: (0..ds.len()).filter(|&i| ds.split(i) == Split::Train).collect(),
            strategy: SelectionStrategy::Full,
            fraction: 1.0,
            seed: 0,
            role: SubsetRole::Mixed,
        };
        full.split_by_partition(ds, partition)
    }

    #[test]
    fn rt_ft_reject_forget_data() {
        let (ds, parent, partition) = toy_world();
        let (retain, forget) = handles(&ds, &partition);
        for method in [Method::Retrain, Method::FineTune] {
            let req = UnlearnRequest {
                method,
                partition: &partition,
                retain_data: &retain,
                forget_data: ForgetData::Real(&forget),
                budget: TrainBudget::fixed(1, 8, 1e-3, 0),
                seed: 0,
                stop_rule: None,
            };
            assert!(unlearn(&parent, &ds, &req).is_err());
        }
    }

    #[test]
    fn rl_requires_forget_data() {
        let (ds, parent, partition) = toy_world();
        let (retain, _) = handles(&ds, &partition);
        let req = UnlearnRequest {
            method: Method::RandomLabel,
            partition: &partition,
            retain_data: &retain,
            forget_data: ForgetData::None,
            budget: TrainBudget::fixed(1, 8, 1e-3, 0),
            seed: 0,
            stop_rule: None,
        };
        assert!(unlearn(&parent, &ds, &req).is_err());
    }

    #[test]
    fn retrain_rejects_forget_samples_in_retain_data() {
        let (ds, parent, partition) = toy_world();
        let (_, forget) = handles(&ds, &partition);
        let mut bad = forget.clone();
        bad.role = SubsetRole::Retain;
        let req = UnlearnRequest {
            method: Method::Retrain,
            partition: &partition,
            retain_data: &bad,
            forget_data: ForgetData::None,
            budget: TrainBudget::fixed(1, 8, 1e-3, 0),
            seed: 0,
            stop_rule: None,
        };
        assert!(matches!(
            unlearn(&parent, &ds, &req),
            Err(CoreError::Domain(_))
        ));
    }

    #[test]
    fn zero_budget_identities() {
        let (ds, parent, partition) = toy_world();
        let (retain, forget) = handles(&ds, &partition);
        // FT and RL at zero budget return the parent weights.
        for (method, fd) in [
            (Method::FineTune, ForgetData::None),
            (Method::RandomLabel, ForgetData::Real(&forget)),
        ] {
            let req = UnlearnRequest {
                method,
                partition: &partition,
                retain_data: &retain,
                forget_data: fd,
                budget: TrainBudget::fixed(0, 8, 1e-3, 3),
                seed: 3,
                stop_rule: None,
            };
            let res = unlearn(&parent, &ds, &req).unwrap();
            assert_eq!(res.model.weight_digest(), parent.weight_digest());
            assert_eq!(res.iterations_used, 0);
        }
        // RT at zero budget returns a fresh init, not the parent.
        let req = UnlearnRequest {
            method: Method::Retrain,
            partition: &partition,
            retain_data: &retain,
            forget_data: ForgetData::None,
            budget: TrainBudget::fixed(0, 8, 1e-3, 3),
            seed: 3,
            stop_rule: None,
        };
        let res = unlearn(&parent, &ds, &req).unwrap();
        assert_ne!(res.model.weight_digest(), parent.weight_digest());
        assert_eq!(
            res.model.weight_digest(),
            build_model(parent.config(), 3).unwrap().weight_digest()
        );
    }

    #[test]
    fn retrain_never_sees_forget_class() {
        let (ds, parent, partition) = toy_world();
        let (retain, _) = handles(&ds, &partition);
        let req = UnlearnRequest {
            method: Method::Retrain,
            partition: &partition,
            retain_data: &retain,
            forget_data: ForgetData::None,
            budget: TrainBudget::fixed(60, 8, 1e-2, 9),
            seed: 9,
            stop_rule: None,
        };
        let res = unlearn(&parent, &ds, &req).unwrap();
        for record in res.model.train_log() {
            assert_eq!(record.class_counts[0], 0);
        }
        assert!(res.iterations_used <= 60);
    }

    #[test]
    fn rl_stream_counts_retain_plus_forget() {
        let (ds, parent, partition) = toy_world();
        let (retain, forget) = handles(&ds, &partition);
        // One full epoch over the pooled data: batch 10 over 60 samples.
        let req = UnlearnRequest {
            method: Method::RandomLabel,
            partition: &partition,
            retain_data: &retain,
            forget_data: ForgetData::Real(&forget),
            budget: TrainBudget::fixed(6, 10, 1e-3, 4),
            seed: 4,
            stop_rule: None,
        };
        let res = unlearn(&parent, &ds, &req).unwrap();
        let seen: u64 = res
            .model
            .train_log()
            .iter()
            .skip(parent.train_log().len())
            .flat_map(|r| r.class_counts.iter())
            .sum();
        assert_eq!(seen as usize, retain.len() + forget.len());
        // No forget-class label ever presented during RL.
        for record in res.model.train_log().iter().skip(parent.train_log().len()) {
            assert_eq!(record.class_counts[0], 0);
        }
    }

    #[test]
    fn unlearning_is_deterministic() {
        let (ds, parent, partition) = toy_world();
        let (retain, forget) = handles(&ds, &partition);
        let run = || {
            let req = UnlearnRequest {
                method: Method::RandomLabel,
                partition: &partition,
                retain_data: &retain,
                forget_data: ForgetData::Real(&forget),
                budget: TrainBudget::fixed(20, 8, 1e-3, 6),
                seed: 6,
                stop_rule: None,
            };
            unlearn(&parent, &ds, &req).unwrap().model.weight_digest()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn desk_scale_ordering_rl_forgets_ft_retains() {
        let (ds, parent, partition) = toy_world();
        let (retain, forget) = handles(&ds, &partition);
        let budget = TrainBudget::fixed(60, 8, 1e-3, 2);
        let mut rl_forget_accs = Vec::new();
        let mut ft_forget_accs = Vec::new();
        for seed in [1, 2, 3] {
            let rl = unlearn(
                &parent,
                &ds,
                &UnlearnRequest {
                    method: Method::RandomLabel,
                    partition: &partition,
                    retain_data: &retain,
                    forget_data: ForgetData::Real(&forget),
                    budget: budget.clone(),
                    seed,
                    stop_rule: None,
                },
            )
            .unwrap();
            let ft = unlearn(
                &parent,
                &ds,
                &UnlearnRequest {
                    method: Method::FineTune,
                    partition: &partition,
                    retain_data: &retain,
                    forget_data: ForgetData::None,
                    budget: budget.clone(),
                    seed,
                    stop_rule: None,
                },
            )
            .unwrap();
            let probe: Vec<(&[f64], usize)> = forget
                .indices
                .iter()
                .map(|&i| (ds.image(i), ds.label(i)))
                .collect();
            rl_forget_accs.push(rl.model.accuracy_on(&probe).unwrap());
            ft_forget_accs.push(ft.model.accuracy_on(&probe).unwrap());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&rl_forget_accs) < mean(&ft_forget_accs) + 1e-12,
            "RL {:?} should forget at least as hard as FT {:?}",
            rl_forget_accs,
            ft_forget_accs
        );
    }
}
