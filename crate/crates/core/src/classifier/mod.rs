//! SGD-trained logistic classifier and the population divider that routes
//! each user to one sub-pipeline.

mod dataset;
mod model;

pub use dataset::{read_training_csv, write_training_csv, Dataset};
pub use model::{predict_class, train, train_timed, Hyperparams, LinearModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::PopulationSplitSpec;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training set has only class {0}")]
    SingleClass(u8),
    #[error("need at least 2 training samples, got {0}")]
    TooFewSamples(usize),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature value {0} is not 0 or 1")]
    NonBinary(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
    #[error("unsupported loss `{0}`")]
    UnsupportedLoss(String),
    #[error("malformed training data at line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Routing decision for one user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub user_id: u64,
    pub predicted_class: i64,
    /// Sub-pipeline id; `None` when no condition matches (unrouted).
    pub target: Option<String>,
}

impl SplitAssignment {
    pub fn is_routed(&self) -> bool {
        self.target.is_some()
    }
}

/// Routes a user by the first condition its predicted class satisfies.
pub fn dispatch(
    split: &PopulationSplitSpec,
    model: &LinearModel,
    user_id: u64,
    features: &[u8],
) -> Result<SplitAssignment, ClassifierError> {
    let predicted_class = predict_class(model, features)?;
    Ok(route_class(split, user_id, predicted_class))
}

/// Routing for an already predicted class.
pub fn route_class(split: &PopulationSplitSpec, user_id: u64, predicted_class: i64) -> SplitAssignment {
    let target = split.route(predicted_class).map(|i| split.sub_pipelines[i].id.clone());
    SplitAssignment { user_id, predicted_class, target }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{ClassCondition, CmpOp, SplitComponent, SubPipeline, Target};

    fn listing_split() -> PopulationSplitSpec {
        let sub = |id: &str| SubPipeline { id: id.into(), start: "T".into(), tests: vec![], rules: vec![] };
        PopulationSplitSpec {
            name: "Population-split-purchases-prediction".into(),
            split_property: "purchase-likelihood".into(),
            sub_pipelines: vec![sub("Review-pipeline"), sub("Recommendation-pipeline")],
            conditions: vec![ClassCondition { op: CmpOp::Eq, value: 0 }, ClassCondition { op: CmpOp::Eq, value: 1 }],
            next: Target::End,
            component: SplitComponent { service_name: "split".into(), image_name: "model".into() },
        }
    }

    #[test]
    fn class_selects_sub_pipeline() {
        let split = listing_split();
        assert_eq!(route_class(&split, 1, 0).target.as_deref(), Some("Review-pipeline"));
        assert_eq!(route_class(&split, 1, 1).target.as_deref(), Some("Recommendation-pipeline"));
        assert_eq!(route_class(&split, 1, 2).target, None);
    }

    #[test]
    fn dispatch_uses_the_model() {
        let split = listing_split();
        let model = LinearModel::new(vec![0.0, 0.0], -10.0, 0);
        let a = dispatch(&split, &model, 9, &[1, 1]).unwrap();
        assert_eq!((a.user_id, a.predicted_class, a.target.as_deref()), (9, 0, Some("Review-pipeline")));
    }
}
