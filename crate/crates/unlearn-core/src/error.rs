//! Error type shared across the core modules.

use alloc::string::String;
use core::fmt;

/// Errors produced by dataset handling, training, unlearning, and generation.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A precondition on inputs was violated (bad class set, empty data, ...).
    Domain(String),
    /// Model configuration is inconsistent (head width vs K, geometry, ...).
    Config(String),
    /// An input batch does not match the model's input geometry.
    Shape(String),
    /// Optimization produced a non-finite loss.
    Diverged(String),
    /// A frozen-model contract was violated (weights changed under training).
    ContractViolation(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Domain(m) => write!(f, "domain error: {m}"),
            CoreError::Config(m) => write!(f, "config error: {m}"),
            CoreError::Shape(m) => write!(f, "shape error: {m}"),
            CoreError::Diverged(m) => write!(f, "training diverged: {m}"),
            CoreError::ContractViolation(m) => write!(f, "contract violation: {m}"),
        }
    }
}

impl core::error::Error for CoreError {}
