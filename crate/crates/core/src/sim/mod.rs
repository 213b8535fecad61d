//! Simulated web-store: user population, deployable variants, routing and
//! metric probes.

mod draws;
mod population;
mod scenario;
mod store;

use std::path::PathBuf;

use thiserror::Error;

pub use draws::{stream_id, Draws};
pub use population::{dataset_from, generate_population, UserProfile};
pub use scenario::{Component, ComponentKind, RatePair, RecommendationRates, ScenarioConfig};
pub use store::{ActiveTest, Deployment, WebStore};

use crate::classifier::ClassifierError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}
