use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::draws::stream_id;
use super::{ComponentKind, ScenarioConfig};
use crate::classifier::Dataset;
use crate::stats::Arm;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: u64,
    pub features: Vec<u8>,
    /// Hidden ground truth; never shown to the classifier at predict time.
    pub purchaser: bool,
}

impl UserProfile {
    pub fn latent_class(&self) -> i64 {
        i64::from(self.purchaser)
    }

    pub fn propensity(&self, cfg: &ScenarioConfig, kind: ComponentKind, arm: Arm) -> f64 {
        cfg.rate(kind, arm, self.purchaser)
    }
}

/// Users `0..n`, deterministic in `cfg.seed`. Each user consumes a fixed
/// number of draws, so a shorter population is a prefix of a longer one.
pub fn generate_population(cfg: &ScenarioConfig, n: u64) -> impl Iterator<Item = UserProfile> + '_ {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream_id(&["population"]));
    (0..n).map(move |user_id| {
        let purchaser = rng.random::<f64>() < cfg.purchaser_prevalence;
        let features = (0..cfg.features)
            .map(|_| {
                let flip = rng.random::<f64>() < cfg.feature_noise;
                u8::from(purchaser != flip)
            })
            .collect();
        UserProfile { user_id, features, purchaser }
    })
}

/// Propensity-style training data: features plus the latent class as label.
pub fn dataset_from(users: &[UserProfile], features: usize) -> Dataset {
    Dataset { features, rows: users.iter().map(|u| (u.features.clone(), u8::from(u.purchaser))).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prevalence_band_at_seed_7() {
        let cfg = ScenarioConfig { seed: 7, ..ScenarioConfig::default() };
        let n = 100_000;
        let purchasers = generate_population(&cfg, n).filter(|u| u.purchaser).count() as f64;
        // 3 sigma binomial band around 0.042.
        assert!((0.039..=0.045).contains(&(purchasers / n as f64)), "{purchasers}");
    }

    #[test]
    fn noiseless_features_equal_class() {
        let cfg = ScenarioConfig { feature_noise: 0.0, ..ScenarioConfig::default() };
        for u in generate_population(&cfg, 500) {
            assert!(u.features.iter().all(|f| *f == u8::from(u.purchaser)));
        }
    }

    #[test]
    fn single_user_is_reproducible_prefix() {
        let cfg = ScenarioConfig::default();
        let one: Vec<_> = generate_population(&cfg, 1).collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one, generate_population(&cfg, 1).collect::<Vec<_>>());
        assert_eq!(one[0], generate_population(&cfg, 10).next().unwrap());
        assert_eq!(one[0].features.len(), 23);
    }
}
