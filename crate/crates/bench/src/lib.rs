//! Configuration-driven experiment runner for the multiscale
//! advection-diffusion lab: single runs, sweeps, cost tables, the 1D theory
//! checks and the table reproductions.

pub mod config;
pub mod run;
pub mod tables;
pub mod theory;

pub use config::{BackendChoice, ExperimentConfig, FineMesh, SweepAxis};
pub use run::{run, sweep, timing_report, CostTable, MethodRecord, RunError, RunRecord};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    Value { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(msfem_core::Error),
}

/// One named pass/fail outcome, as printed by the verify commands.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), passed, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}
