//! Labeled image datasets, class partitions, and subset selection.
//!
//! A dataset holds every sample of a classification problem together with a
//! train/val/test split tag per sample. A forget request splits the class set
//! into retain and forget halves; the stored server-side data is a
//! [`SubsetHandle`] selected per class by one of four strategies over the
//! trained model's softmax confidence ranking.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::classifier::ModelState;
use crate::error::CoreError;
use crate::rng;

/// Image geometry (height, width, channels). Pixels are stored row-major,
/// channel-minor: `data[(y * w + x) * c + ch]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Geometry {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Geometry { h, w, c }
    }

    /// Flat length of one image.
    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which named split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// An immutable labeled image collection with per-sample split tags.
///
/// Intensities are normalized to [0, 1]; all images share one geometry.
#[derive(Debug, Clone)]
pub struct LabeledImageDataset {
    id: String,
    geometry: Geometry,
    pixels: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
}

impl LabeledImageDataset {
    /// Build a dataset, validating every structural invariant.
    pub fn new(
        id: String,
        geometry: Geometry,
        pixels: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
        class_names: Option<Vec<String>>,
    ) -> Result<Self, CoreError> {
        let stride = geometry.len();
        if stride == 0 {
            return Err(CoreError::Shape("image geometry has zero volume".into()));
        }
        if pixels.len() != labels.len() * stride {
            return Err(CoreError::Shape(format!(
                "pixel buffer length {} does not match {} samples of {} values",
                pixels.len(),
                labels.len(),
                stride
            )));
        }
        if splits.len() != labels.len() {
            return Err(CoreError::Shape(
                "split tags and labels have different lengths".into(),
            ));
        }
        if num_classes == 0 {
            return Err(CoreError::Domain("dataset needs at least one class".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CoreError::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CoreError::Domain(
                "pixel intensities must lie in [0, 1]".into(),
            ));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(CoreError::Domain(
                    "class_names length does not match class count".into(),
                ));
            }
        }
        Ok(LabeledImageDataset {
            id,
            geometry,
            pixels,
            labels,
            splits,
            num_classes,
            class_names,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, idx: usize) -> Split {
        self.splits[idx]
    }

    /// Pixel slice of one sample.
    pub fn image(&self, idx: usize) -> &[f64] {
        let stride = self.geometry.len();
        &self.pixels[idx * stride..(idx + 1) * stride]
    }

    /// Indices of all samples carrying the given split tag.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Per-class sample counts over one split.
    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for i in 0..self.len() {
            if self.splits[i] == split {
                hist[self.labels[i]] += 1;
            }
        }
        hist
    }
}

/// Disjoint exhaustive split of the class set into forget and retain halves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    forget: BTreeSet<usize>,
    retain: BTreeSet<usize>,
}

impl ClassPartition {
    pub fn forget_classes(&self) -> &BTreeSet<usize> {
        &self.forget
    }

    pub fn retain_classes(&self) -> &BTreeSet<usize> {
        &self.retain
    }

    pub fn is_forget(&self, class: usize) -> bool {
        self.forget.contains(&class)
    }

    pub fn num_classes(&self) -> usize {
        self.forget.len() + self.retain.len()
    }
}

/// Split `{0..K-1}` into a nonempty proper forget subset and its complement.
pub fn partition_classes(
    num_classes: usize,
    forget: &BTreeSet<usize>,
) -> Result<ClassPartition, CoreError> {
    if forget.is_empty() {
        return Err(CoreError::Domain("forget class set is empty".into()));
    }
    if let Some(&bad) = forget.iter().find(|&&c| c >= num_classes) {
        return Err(CoreError::Domain(format!(
            "forget class {bad} out of range for {num_classes} classes"
        )));
    }
    if forget.len() == num_classes {
        return Err(CoreError::Domain(
            "cannot forget every class; retain set would be empty".into(),
        ));
    }
    let retain: BTreeSet<usize> = (0..num_classes).filter(|c| !forget.contains(c)).collect();
    Ok(ClassPartition {
        forget: forget.clone(),
        retain,
    })
}

/// Per-class index lists ranked by the model's softmax confidence in the true
/// class, highest first. Ties break toward the lower sample index.
#[derive(Debug, Clone)]
pub struct RankedClasses {
    pub dataset_id: String,
    /// `per_class[c]` lists sample indices with true label `c`.
    pub per_class: Vec<Vec<usize>>,
}

/// Rank split-matching samples of each class by the probability the model
/// assigns to their true class, descending.
pub fn rank_by_confidence(
    model: &ModelState,
    dataset: &LabeledImageDataset,
    split: Split,
) -> Result<RankedClasses, CoreError> {
    let k = dataset.num_classes();
    if model.num_classes() != k {
        return Err(CoreError::Domain(format!(
            "model has {} classes but dataset has {k}",
            model.num_classes()
        )));
    }
    let mut scored: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for idx in dataset.split_indices(split) {
        let probs = model.predict_probs_one(dataset.image(idx))?;
        let label = dataset.label(idx);
        scored[label].push((probs[label], idx));
    }
    let per_class = scored
        .into_iter()
        .map(|mut class| {
            // Descending confidence, ascending index on ties.
            class.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            class.into_iter().map(|(_, idx)| idx).collect()
        })
        .collect();
    Ok(RankedClasses {
        dataset_id: dataset.id().into(),
        per_class,
    })
}

/// How the stored subset is chosen from each class's confidence ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    Random,
    Top,
    Bottom,
    Mix,
    Full,
}

impl SelectionStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionStrategy::Random => "random",
            SelectionStrategy::Top => "top",
            SelectionStrategy::Bottom => "bottom",
            SelectionStrategy::Mix => "mix",
            SelectionStrategy::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(SelectionStrategy::Random),
            "top" => Some(SelectionStrategy::Top),
            "bottom" => Some(SelectionStrategy::Bottom),
            "mix" => Some(SelectionStrategy::Mix),
            "full" => Some(SelectionStrategy::Full),
            _ => None,
        }
    }
}

/// Whether a handle views retain samples, forget samples, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetRole {
    Retain,
    Forget,
    Mixed,
}

impl SubsetRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubsetRole::Retain => "retain",
            SubsetRole::Forget => "forget",
            SubsetRole::Mixed => "mixed",
        }
    }
}

/// Index-based view of a dataset, tagged with how it was selected.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetHandle {
    pub dataset_id: String,
    /// Sorted, unique sample indices.
    pub indices: Vec<usize>,
    pub strategy: SelectionStrategy,
    pub fraction: f64,
    pub seed: u64,
    pub role: SubsetRole,
}

impl SubsetHandle {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Split this handle into (retain-view, forget-view) under a partition.
    ///
    /// The two views cover the handle exactly and never overlap.
    pub fn split_by_partition(
        &self,
        dataset: &LabeledImageDataset,
        partition: &ClassPartition,
    ) -> (SubsetHandle, SubsetHandle) {
        let (forget, retain): (Vec<usize>, Vec<usize>) = self
            .indices
            .iter()
            .copied()
            .partition(|&i| partition.is_forget(dataset.label(i)));
        let make = |indices: Vec<usize>, role| SubsetHandle {
            dataset_id: self.dataset_id.clone(),
            indices,
            strategy: self.strategy,
            fraction: self.fraction,
            seed: self.seed,
            role,
        };
        (make(retain, SubsetRole::Retain), make(forget, SubsetRole::Forget))
    }
}

/// Per-class quota: floor(fraction * n), but never below one sample.
fn quota(fraction: f64, n: usize) -> usize {
    let q = libm::floor(fraction * n as f64) as usize;
    q.max(1).min(n)
}

/// Select the stored subset from per-class confidence rankings.
///
/// Count rules per class of size `n`:
/// - `random`: floor(fraction*n) (min 1) indices drawn without replacement;
/// - `top`/`bottom`: the first/last floor(fraction*n) (min 1) of the ranking;
/// - `mix`: first floor(fraction*n/2) plus last floor(fraction*n/2) (min 1
///   each), deduplicated where they overlap on tiny classes;
/// - `full`: every index.
///
/// Deterministic for a fixed `(ranked, strategy, fraction, seed)`.
pub fn select_subset(
    ranked: &RankedClasses,
    strategy: SelectionStrategy,
    fraction: f64,
    seed: u64,
) -> Result<SubsetHandle, CoreError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::Domain(format!(
            "fraction {fraction} outside (0, 1]"
        )));
    }
    if let Some(empty) = ranked.per_class.iter().position(|c| c.is_empty()) {
        return Err(CoreError::Domain(format!(
            "class {empty} has no ranked samples"
        )));
    }
    let mut picked: Vec<usize> = Vec::new();
    for (class, order) in ranked.per_class.iter().enumerate() {
        let n = order.len();
        match strategy {
            SelectionStrategy::Full => picked.extend_from_slice(order),
            SelectionStrategy::Top => picked.extend_from_slice(&order[..quota(fraction, n)]),
            SelectionStrategy::Bottom => picked.extend_from_slice(&order[n - quota(fraction, n)..]),
            SelectionStrategy::Mix => {
                let half = quota(fraction / 2.0, n);
                let mut chosen: BTreeSet<usize> = BTreeSet::new();
                chosen.extend(order[..half].iter().copied());
                chosen.extend(order[n - half..].iter().copied());
                picked.extend(chosen);
            }
            SelectionStrategy::Random => {
                let mut rng = rng::substream(seed, class as u64 + 1);
                let take = quota(fraction, n);
                for pos in rng::sample_without_replacement(&mut rng, n, take) {
                    picked.push(order[pos]);
                }
            }
        }
    }
    picked.sort_unstable();
    picked.dedup();
    Ok(SubsetHandle {
        dataset_id: ranked.dataset_id.clone(),
        indices: picked,
        strategy,
        fraction,
        seed,
        role: SubsetRole::Mixed,
    })
}

/// Forget-set samples with fresh uniformly drawn retain-class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelabeledBatch {
    pub indices: Vec<usize>,
    pub new_labels: Vec<usize>,
    pub seed: u64,
}

/// Replace every forget-sample label with an independent uniform draw from
/// the retain classes. Forget-class labels never reappear in the output.
pub fn relabel_random(
    forget_subset: &SubsetHandle,
    dataset: &LabeledImageDataset,
    partition: &ClassPartition,
    seed: u64,
) -> Result<RelabeledBatch, CoreError> {
    if forget_subset.role != SubsetRole::Forget {
        return Err(CoreError::Domain(format!(
            "relabel_random expects a forget-role subset, got {}",
            forget_subset.role.as_str()
        )));
    }
    if partition.retain_classes().is_empty() {
        return Err(CoreError::Domain("retain class set is empty".into()));
    }
    if let Some(&bad) = forget_subset
        .indices
        .iter()
        .find(|&&i| !partition.is_forget(dataset.label(i)))
    {
        return Err(CoreError::Domain(format!(
            "sample {bad} in forget subset carries a retain-class label"
        )));
    }
    let retain: Vec<usize> = partition.retain_classes().iter().copied().collect();
    let mut rng = rng::stream(seed);
    let new_labels = forget_subset
        .indices
        .iter()
        .map(|_| retain[rng::uniform_index(&mut rng, retain.len())])
        .collect();
    Ok(RelabeledBatch {
        indices: forget_subset.indices.clone(),
        new_labels,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn toy_dataset(k: usize, per_class: usize) -> LabeledImageDataset {
        let geometry = Geometry::new(2, 2, 1);
        let n = k * per_class;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let v = (i % 17) as f64 / 16.0;
            pixels.extend_from_slice(&[v, 0.0, 1.0 - v, 0.5]);
            labels.push(i % k);
        }
        LabeledImageDataset::new(
            "toy".to_string(),
            geometry,
            pixels,
            labels,
            vec![Split::Train; n],
            k,
            None,
        )
        .unwrap()
    }

    #[test]
    fn dataset_rejects_out_of_range_labels() {
        let geometry = Geometry::new(1, 1, 1);
        let err = LabeledImageDataset::new(
            "bad".to_string(),
            geometry,
            vec![0.5],
            vec![3],
            vec![Split::Train],
            2,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Domain(_)));
    }

    #[test]
    fn dataset_rejects_unnormalized_pixels() {
        let geometry = Geometry::new(1, 1, 1);
        let err = LabeledImageDataset::new(
            "bad".to_string(),
            geometry,
            vec![1.5],
            vec![0],
            vec![Split::Train],
            1,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Domain(_)));
    }

    #[test]
    fn partition_complement_16_classes() {
        let forget: BTreeSet<usize> = [0].into_iter().collect();
        let p = partition_classes(16, &forget).unwrap();
        assert_eq!(p.retain_classes().len(), 15);
        assert!(p.retain_classes().iter().all(|&c| (1..16).contains(&c)));
    }

    #[test]
    fn partition_two_classes() {
        let forget: BTreeSet<usize> = [1].into_iter().collect();
        let p = partition_classes(2, &forget).unwrap();
        assert_eq!(p.retain_classes().iter().copied().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn partition_rejects_degenerate_sets() {
        let all: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        assert!(partition_classes(3, &all).is_err());
        assert!(partition_classes(3, &BTreeSet::new()).is_err());
        let bad: BTreeSet<usize> = [5].into_iter().collect();
        assert!(partition_classes(3, &bad).is_err());
    }

    fn ranked(per_class: &[&[usize]]) -> RankedClasses {
        RankedClasses {
            dataset_id: "toy".to_string(),
            per_class: per_class.iter().map(|s| s.to_vec()).collect(),
        }
    }

    #[test]
    fn top_selection_single_quota() {
        let r = ranked(&[&[4, 2, 9, 1, 0, 3, 5, 6, 7, 8], &[10, 11, 12, 13, 14, 15, 16, 17, 18, 19]]);
        let h = select_subset(&r, SelectionStrategy::Top, 0.1, 0).unwrap();
        assert_eq!(h.indices, vec![4, 10]);
    }

    #[test]
    fn mix_selection_two_plus_two() {
        let order: Vec<usize> = (0..40).collect();
        let r = ranked(&[&order]);
        let h = select_subset(&r, SelectionStrategy::Mix, 0.1, 0).unwrap();
        // floor(40 * 0.05) = 2 from each end.
        assert_eq!(h.indices, vec![0, 1, 38, 39]);
    }

    #[test]
    fn full_selection_covers_everything() {
        let r = ranked(&[&[3, 1, 2], &[5, 4]]);
        for strategy in [
            SelectionStrategy::Full,
            SelectionStrategy::Top,
            SelectionStrategy::Bottom,
            SelectionStrategy::Random,
        ] {
            let h = select_subset(&r, strategy, 1.0, 11).unwrap();
            assert_eq!(h.indices, vec![1, 2, 3, 4, 5], "{:?}", strategy);
        }
    }

    #[test]
    fn mix_on_tiny_class_keeps_at_least_one_without_duplicates() {
        let r = ranked(&[&[7]]);
        let h = select_subset(&r, SelectionStrategy::Mix, 0.1, 0).unwrap();
        assert_eq!(h.indices, vec![7]);
    }

    #[test]
    fn select_subset_is_deterministic() {
        let order: Vec<usize> = (0..33).collect();
        let r = ranked(&[&order]);
        let a = select_subset(&r, SelectionStrategy::Random, 0.25, 42).unwrap();
        let b = select_subset(&r, SelectionStrategy::Random, 0.25, 42).unwrap();
        assert_eq!(a, b);
        let c = select_subset(&r, SelectionStrategy::Random, 0.25, 43).unwrap();
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn select_subset_rejects_empty_class() {
        let r = ranked(&[&[1], &[]]);
        assert!(select_subset(&r, SelectionStrategy::Top, 0.5, 0).is_err());
    }

    #[test]
    fn relabel_single_retain_class() {
        let ds = toy_dataset(2, 4);
        let forget: BTreeSet<usize> = [0].into_iter().collect();
        let p = partition_classes(2, &forget).unwrap();
        let handle = SubsetHandle {
            dataset_id: "toy".to_string(),
            indices: (0..ds.len()).filter(|&i| ds.label(i) == 0).collect(),
            strategy: SelectionStrategy::Full,
            fraction: 1.0,
            seed: 0,
            role: SubsetRole::Forget,
        };
        let batch = relabel_random(&handle, &ds, &p, 9).unwrap();
        assert!(batch.new_labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn relabel_uniformity_over_fifteen_retain_classes() {
        let ds = toy_dataset(16, 1000);
        let forget: BTreeSet<usize> = [0].into_iter().collect();
        let p = partition_classes(16, &forget).unwrap();
        let indices: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == 0).collect();
        assert_eq!(indices.len(), 1000);
        // 15 batches of 1000 draws = 15000 total draws.
        let mut counts = [0usize; 16];
        for seed in 0..15 {
            let handle = SubsetHandle {
                dataset_id: "toy".to_string(),
                indices: indices.clone(),
                strategy: SelectionStrategy::Full,
                fraction: 1.0,
                seed,
                role: SubsetRole::Forget,
            };
            for &l in &relabel_random(&handle, &ds, &p, seed).unwrap().new_labels {
                counts[l] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        // Binomial(15000, 1/15): mean 1000, three sigma is about 95.
        for &c in &counts[1..] {
            assert!((850..=1150).contains(&c), "count {c} outside 1000 +- 150");
        }
    }

    #[test]
    fn relabel_empty_subset_is_empty() {
        let ds = toy_dataset(2, 2);
        let forget: BTreeSet<usize> = [0].into_iter().collect();
        let p = partition_classes(2, &forget).unwrap();
        let handle = SubsetHandle {
            dataset_id: "toy".to_string(),
            indices: vec![],
            strategy: SelectionStrategy::Full,
            fraction: 1.0,
            seed: 0,
            role: SubsetRole::Forget,
        };
        let batch = relabel_random(&handle, &ds, &p, 0).unwrap();
        assert!(batch.indices.is_empty() && batch.new_labels.is_empty());
    }

    #[test]
    fn relabel_rejects_retain_samples_in_forget_subset() {
        let ds = toy_dataset(2, 2);
        let forget: BTreeSet<usize> = [0].into_iter().collect();
        let p = partition_classes(2, &forget).unwrap();
        let handle = SubsetHandle {
            dataset_id: "toy".to_string(),
            indices: (0..ds.len()).collect(),
            strategy: SelectionStrategy::Full,
            fraction: 1.0,
            seed: 0,
            role: SubsetRole::Forget,
        };
        assert!(relabel_random(&handle, &ds, &p, 0).is_err());
    }

    #[test]
    fn partition_views_cover_handle_exactly() {
        let ds = toy_dataset(4, 6);
        let forget: BTreeSet<usize> = [1, 2].into_iter().collect();
        let p = partition_classes(4, &forget).unwrap();
        let handle = SubsetHandle {
            dataset_id: "toy".to_string(),
            indices: (0..ds.len()).step_by(3).collect(),
            strategy: SelectionStrategy::Random,
            fraction: 0.3,
            seed: 5,
            role: SubsetRole::Mixed,
        };
        let (r, f) = handle.split_by_partition(&ds, &p);
        let mut union: Vec<usize> = r.indices.iter().chain(f.indices.iter()).copied().collect();
        union.sort_unstable();
        assert_eq!(union, handle.indices);
        assert!(r.indices.iter().all(|i| !f.indices.contains(i)));
    }
}
