use std::collections::BTreeMap;

use thiserror::Error;

use crate::classifier::{ClassifierError, SplitAssignment};
use crate::pipeline::{AbTestSpec, PopulationSplitSpec};
use crate::stats::{MetricAccumulator, StatsError};

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("variant image `{image}` of test `{test}` is not in the catalog")]
    MissingVariant { test: String, image: String },
    #[error("service `{service}` is not part of the managed system")]
    UnknownService { service: String },
    #[error("deployment conflict on `{service}`: `{active}` is active, `{requested}` requested")]
    DeploymentConflict { service: String, active: String, requested: String },
    #[error("test `{0}` is not deployed")]
    NoActiveTest(String),
    #[error("test `{0}` was never deployed")]
    UnknownTest(String),
    #[error("test `{test}` uses metric `{metric}`, which service kind `{kind}` does not produce")]
    UnknownMetric { test: String, metric: String, kind: String },
    #[error("split `{0}` has no trained model")]
    UntrainedModel(String),
    #[error("split component for `{0}` is not deployed")]
    SplitNotDeployed(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Per-variant accumulators of one metric.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VariantPair {
    pub a: MetricAccumulator,
    pub b: MetricAccumulator,
}

/// Snapshot of a test's metrics and request counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Probe {
    pub requests: u64,
    pub metrics: BTreeMap<String, VariantPair>,
}

/// The system under adaptation, as seen by the feedback loop. Methods take
/// `&self` so sub-pipelines can drive disjoint tests from several threads.
pub trait ManagedSystem: Sync {
    /// Fails with the first variant or component missing from the catalog.
    fn check_variants(&self, tests: &[&AbTestSpec], splits: &[&PopulationSplitSpec]) -> Result<(), SystemError>;

    fn deploy_variants(&self, test: &AbTestSpec) -> Result<(), SystemError>;

    /// Makes a deployed test routable with its assignment fractions.
    fn configure_routing(&self, test: &AbTestSpec) -> Result<(), SystemError>;

    /// Undeploys a test's variants and routing, or a split component.
    fn restore_initial(&self, element: &str) -> Result<(), SystemError>;

    fn deploy_split_component(&self, split: &PopulationSplitSpec) -> Result<(), SystemError>;

    /// User behind the `seq`-th request (1-based).
    fn arrival(&self, seq: u64) -> u64;

    fn dispatch(&self, split: &PopulationSplitSpec, user: u64) -> Result<SplitAssignment, SystemError>;

    /// Serves request `seq` from `user` on an active test.
    fn serve(&self, seq: u64, user: u64, test: &str) -> Result<(), SystemError>;

    fn probe(&self, test: &str) -> Result<Probe, SystemError>;
}
