//! Core primitives for class-level machine unlearning of image classifiers.
//!
//! The crate is split along the lifecycle of a forget request:
//!
//! - [`dataset`] — labeled image collections, retain/forget class partitions,
//!   confidence-ranked subset selection, and random relabeling.
//! - [`classifier`] — a small convolutional classifier with deterministic
//!   seeded training, softmax inference, and penultimate feature extraction.
//! - [`unlearner`] — the three unlearning procedures: retrain from scratch,
//!   fine-tune on the retain set, and random-label fine-tuning.
//! - [`forge`] — the label-guided sample generator that synthesizes
//!   forget-class stand-ins against a frozen classifier, plus a uniform-noise
//!   baseline.
//! - [`evalkit`] — retain/forget accuracy metrics and comparison tables.
//!
//! Everything here is pure computation over owned buffers; persistence, file
//! formats, and orchestration live in the companion `unlearn-lab` crate.
//! All randomness flows from explicit seeds through ChaCha streams, so every
//! operation is bitwise reproducible.

#![no_std]

extern crate alloc;

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod forge;
pub mod nn;
pub mod rng;
pub mod unlearner;

pub use classifier::{Backbone, InitScheme, ModelConfig, ModelState, TrainBudget};
pub use dataset::{
    ClassPartition, LabeledImageDataset, Geometry, RankedClasses, RelabeledBatch,
    SelectionStrategy, Split, SubsetHandle, SubsetRole,
};
pub use error::CoreError;
pub use evalkit::{AccuracyCell, EvalScope, MetricsReport};
pub use forge::{GeneratorConfig, ProjectorState, SyntheticBatch, SyntheticOrigin};
pub use unlearner::{ForgetData, Method, StopRule, UnlearnRequest, UnlearnResult};
