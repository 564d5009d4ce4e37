//! IO and orchestration companion to `unlearn-core`: dataset loading, the
//! checkpoint and manifest file formats, the server-side model store, and
//! the experiment harness behind the CLI.

pub mod checkpoint;
pub mod datasrc;
pub mod error;
pub mod features;
pub mod harness;
pub mod manifest;
pub mod report;
pub mod store;
pub mod synthdata;

pub use harness::{ExperimentConfig, ForgetDataMode};
