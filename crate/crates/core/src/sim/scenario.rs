use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::classifier::Hyperparams;
use crate::stats::Arm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatePair {
    pub a: f64,
    pub b: f64,
}

impl RatePair {
    pub fn get(&self, arm: Arm) -> f64 {
        match arm {
            Arm::A => self.a,
            Arm::B => self.b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendationRates {
    pub purchaser: RatePair,
    pub non_purchaser: RatePair,
}

/// Which behaviour a service of the web-store exhibits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Gui,
    Review,
    Recommendation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub kind: ComponentKind,
    /// Metric the component emits per request.
    pub metric: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub purchaser_prevalence: f64,
    /// Probability that a feature disagrees with the latent class.
    pub feature_noise: f64,
    pub features: usize,
    pub review_rates: RatePair,
    pub recommendation_rates: RecommendationRates,
    pub gui_rates: RatePair,
    pub seed: u64,
    pub population: u64,
    /// Leading share of the population used to train the split model.
    pub train_fraction: f64,
    /// Simulated time per deployment; reported, never slept.
    pub deploy_latency_ms: u64,
    pub classifier: Hyperparams,
    /// Service name to behaviour.
    pub components: BTreeMap<String, Component>,
    /// Images available for deployment.
    pub catalog: BTreeSet<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let component = |kind, metric: &str| Component { kind, metric: metric.into() };
        ScenarioConfig {
            purchaser_prevalence: 0.042,
            feature_noise: 0.25,
            features: 23,
            review_rates: RatePair { a: 0.1470, b: 0.1617 },
            recommendation_rates: RecommendationRates {
                purchaser: RatePair { a: 0.30, b: 0.45 },
                non_purchaser: RatePair { a: 0.005, b: 0.005 },
            },
            gui_rates: RatePair { a: 0.20, b: 0.26 },
            seed: 1,
            population: 100_000,
            train_fraction: 0.25,
            deploy_latency_ms: 0,
            classifier: Hyperparams::default(),
            components: BTreeMap::from([
                ("webstore-gui".to_string(), component(ComponentKind::Gui, "engagement")),
                ("review-service".to_string(), component(ComponentKind::Review, "clicks")),
                ("recommendation-service".to_string(), component(ComponentKind::Recommendation, "purchases")),
            ]),
            catalog: [
                "gui:v1",
                "gui:v2",
                "review:v1",
                "review:v2",
                "recommendation:v1",
                "recommendation:v2",
                "ml-purchase-filter",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| SimError::Invalid(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn check(&self) -> Result<(), SimError> {
        let unit = |name: &str, x: f64| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(SimError::Invalid(format!("{name} = {x} is outside [0, 1]")))
            }
        };
        unit("purchaser_prevalence", self.purchaser_prevalence)?;
        unit("feature_noise", self.feature_noise)?;
        for (name, pair) in [
            ("review_rates", self.review_rates),
            ("gui_rates", self.gui_rates),
            ("recommendation_rates.purchaser", self.recommendation_rates.purchaser),
            ("recommendation_rates.non_purchaser", self.recommendation_rates.non_purchaser),
        ] {
            unit(&format!("{name}.a"), pair.a)?;
            unit(&format!("{name}.b"), pair.b)?;
        }
        if self.features == 0 {
            return Err(SimError::Invalid("features must be at least 1".into()));
        }
        if self.population < 2 {
            return Err(SimError::Invalid("population must be at least 2".into()));
        }
        let train = self.train_users();
        if train == 0 || train >= self.population {
            return Err(SimError::Invalid(format!(
                "train_fraction {} leaves no training or no serving users",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn train_users(&self) -> u64 {
        (self.population as f64 * self.train_fraction).floor() as u64
    }

    /// Behaviour probability of a user of class `purchaser` on `kind`, variant `arm`.
    pub fn rate(&self, kind: ComponentKind, arm: Arm, purchaser: bool) -> f64 {
        match kind {
            ComponentKind::Gui => self.gui_rates.get(arm),
            ComponentKind::Review => self.review_rates.get(arm),
            ComponentKind::Recommendation if purchaser => self.recommendation_rates.purchaser.get(arm),
            ComponentKind::Recommendation => self.recommendation_rates.non_purchaser.get(arm),
        }
    }
}
