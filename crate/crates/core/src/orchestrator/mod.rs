//! Managing system: knowledge repository, MAPE loop and the execution of
//! pipelines, transition rules and population splits.

mod engine;
mod knowledge;
mod rules;
mod runner;
pub mod scripted;
mod system;
mod trace;

use thiserror::Error;

pub use engine::{Orchestrator, Run, RunOutcome, SplitRecord, SubPipelineRecord};
pub use knowledge::{DeploymentAction, KnowledgeInstance, KnowledgeRepository, Routing};
pub use rules::{next_element, rule_applies};
pub use runner::TestRecord;
pub use system::{ManagedSystem, Probe, SystemError, VariantPair};
pub use trace::{write_trace_jsonl, Event, TraceEntry};

use crate::pipeline::PipelineSpec;
use crate::stats::{StatsError, DEFAULT_BATCH_SIZE};

pub const BATCH_SIZE_ENV: &str = "ABPIPE_BATCH_SIZE";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("pipeline `{0}` is already running")]
    AlreadyRunning(String),
    #[error("knowledge instance `{0}` already exists")]
    InstanceCollision(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("element `{0}` is not declared")]
    UndeclaredElement(String),
    #[error("split `{inner}` reached inside split `{outer}`; nested splits are not supported")]
    NestedSplit { outer: String, inner: String },
    #[error("result of `{test}` already written in `{instance}`")]
    ResultRewritten { instance: String, test: String },
    #[error("gave up after {limit} requests without completing")]
    RequestLimit { limit: u64 },
    #[error("a sub-pipeline worker panicked")]
    WorkerPanicked,
    #[error("invalid {BATCH_SIZE_ENV}: `{0}`")]
    InvalidBatchSize(String),
}

/// An orchestrator error together with the trace recorded until it happened.
#[derive(Debug, Error)]
#[error("{source}")]
pub struct ExecutionError {
    #[source]
    pub source: OrchestratorError,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionMode {
    /// Sub-pipelines share one thread in a fixed interleaving.
    #[default]
    Serialized,
    /// One thread per sub-pipeline.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineConfig {
    pub batch_size: u64,
    pub mode: ExecutionMode,
    /// Abort after this many global requests; defaults to 100 times the sum
    /// of all experiment lengths, at least one million.
    pub request_limit: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { batch_size: DEFAULT_BATCH_SIZE, mode: ExecutionMode::Serialized, request_limit: None }
    }
}

impl EngineConfig {
    /// Default configuration with the batch size taken from the environment.
    pub fn from_env() -> Result<Self, OrchestratorError> {
        let mut config = Self::default();
        if let Ok(raw) = std::env::var(BATCH_SIZE_ENV) {
            config.batch_size = parse_batch_size(&raw)?;
        }
        Ok(config)
    }
}

fn parse_batch_size(raw: &str) -> Result<u64, OrchestratorError> {
    match raw.trim().parse::<u64>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(OrchestratorError::InvalidBatchSize(raw.to_string())),
    }
}

/// Executor: applies one planned action to the managed system.
pub fn execute_action<S: ManagedSystem + ?Sized>(
    system: &S,
    spec: &PipelineSpec,
    action: &DeploymentAction,
) -> Result<(), OrchestratorError> {
    let test = |name: &str| spec.test(name).ok_or_else(|| OrchestratorError::UndeclaredElement(name.to_string()));
    match action {
        DeploymentAction::DeployVariants { test: name, .. } => system.deploy_variants(test(name)?)?,
        DeploymentAction::ConfigureRouting { test: name, .. } => system.configure_routing(test(name)?)?,
        DeploymentAction::RestoreInitial { element } => system.restore_initial(element)?,
        DeploymentAction::DeploySplitComponent { split, .. } => {
            let split = spec.split(split).ok_or_else(|| OrchestratorError::UndeclaredElement(split.clone()))?;
            system.deploy_split_component(split)?
        }
        DeploymentAction::NotifyComplete { .. } => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_size_parsing() {
        assert_eq!(parse_batch_size("250").unwrap(), 250);
        assert!(parse_batch_size("0").is_err());
        assert!(parse_batch_size("ten").is_err());
    }
}
