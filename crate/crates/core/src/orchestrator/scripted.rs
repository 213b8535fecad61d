//! A managed system that replays pre-computed metric snapshots. Used to
//! check the control flow of the engine independently of the simulator.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use super::{ManagedSystem, Probe, SystemError, VariantPair};
use crate::classifier::{route_class, SplitAssignment};
use crate::pipeline::{AbTestSpec, PopulationSplitSpec};
use crate::stats::MetricAccumulator;

/// Accumulators of 0/1 samples with the given counts of ones.
pub fn binary_pair(n_a: u64, ones_a: u64, n_b: u64, ones_b: u64) -> VariantPair {
    let acc = |n: u64, ones: u64| {
        if n == 0 {
            return MetricAccumulator::new();
        }
        let p = ones as f64 / n as f64;
        MetricAccumulator::from_moments(n, p, ones as f64 * (1.0 - p))
    };
    VariantPair { a: acc(n_a, ones_a), b: acc(n_b, ones_b) }
}

#[derive(Debug, Default)]
struct State {
    /// Deployed tests: hypothesis metric and whether routing is configured.
    active: BTreeMap<String, (String, bool)>,
    counts: BTreeMap<String, u64>,
    metrics: BTreeMap<String, String>,
    splits: BTreeSet<String>,
}

#[derive(Debug)]
pub struct ScriptedSystem {
    scripts: BTreeMap<String, Vec<VariantPair>>,
    batch_size: u64,
    users: u64,
    classes: i64,
    missing_images: BTreeSet<String>,
    model_ready: bool,
    state: Mutex<State>,
}

impl ScriptedSystem {
    /// Probes of a test return snapshot `k - 1` after `k` full batches.
    pub fn new(batch_size: u64) -> Self {
        ScriptedSystem {
            scripts: BTreeMap::new(),
            batch_size,
            users: 1000,
            classes: 2,
            missing_images: BTreeSet::new(),
            model_ready: true,
            state: Mutex::new(State::default()),
        }
    }

    pub fn with_script(mut self, test: impl Into<String>, snapshots: Vec<VariantPair>) -> Self {
        self.scripts.insert(test.into(), snapshots);
        self
    }

    /// Request `seq` comes from user `seq % users`.
    pub fn with_users(mut self, users: u64) -> Self {
        self.users = users.max(1);
        self
    }

    /// User `u` is predicted as class `u % classes`.
    pub fn with_classes(mut self, classes: i64) -> Self {
        self.classes = classes.max(1);
        self
    }

    pub fn with_missing_image(mut self, image: impl Into<String>) -> Self {
        self.missing_images.insert(image.into());
        self
    }

    pub fn untrained(mut self) -> Self {
        self.model_ready = false;
        self
    }

    fn state(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Tests and split components currently deployed.
    pub fn deployed(&self) -> (Vec<String>, Vec<String>) {
        let s = self.state();
        (s.active.keys().cloned().collect(), s.splits.iter().cloned().collect())
    }

    pub fn requests(&self, test: &str) -> u64 {
        self.state().counts.get(test).copied().unwrap_or(0)
    }
}

impl ManagedSystem for ScriptedSystem {
    fn check_variants(&self, tests: &[&AbTestSpec], _splits: &[&PopulationSplitSpec]) -> Result<(), SystemError> {
        for t in tests {
            for v in [&t.variant_a, &t.variant_b] {
                if self.missing_images.contains(&v.image_name) {
                    return Err(SystemError::MissingVariant { test: t.name.clone(), image: v.image_name.clone() });
                }
            }
        }
        Ok(())
    }

    fn deploy_variants(&self, test: &AbTestSpec) -> Result<(), SystemError> {
        let mut s = self.state();
        s.active.entry(test.name.clone()).or_insert((test.hypothesis.metric.clone(), false));
        s.metrics.insert(test.name.clone(), test.hypothesis.metric.clone());
        Ok(())
    }

    fn configure_routing(&self, test: &AbTestSpec) -> Result<(), SystemError> {
        let mut s = self.state();
        let entry = s.active.get_mut(&test.name).ok_or_else(|| SystemError::NoActiveTest(test.name.clone()))?;
        entry.1 = true;
        Ok(())
    }

    fn restore_initial(&self, element: &str) -> Result<(), SystemError> {
        let mut s = self.state();
        s.active.remove(element);
        s.splits.remove(element);
        Ok(())
    }

    fn deploy_split_component(&self, split: &PopulationSplitSpec) -> Result<(), SystemError> {
        if !self.model_ready {
            return Err(SystemError::UntrainedModel(split.name.clone()));
        }
        self.state().splits.insert(split.name.clone());
        Ok(())
    }

    fn arrival(&self, seq: u64) -> u64 {
        seq % self.users
    }

    fn dispatch(&self, split: &PopulationSplitSpec, user: u64) -> Result<SplitAssignment, SystemError> {
        if !self.state().splits.contains(&split.name) {
            return Err(SystemError::SplitNotDeployed(split.name.clone()));
        }
        Ok(route_class(split, user, (user % self.classes as u64) as i64))
    }

    fn serve(&self, _seq: u64, _user: u64, test: &str) -> Result<(), SystemError> {
        let mut s = self.state();
        match s.active.get(test) {
            Some((_, true)) => {}
            _ => return Err(SystemError::NoActiveTest(test.to_string())),
        }
        *s.counts.entry(test.to_string()).or_default() += 1;
        Ok(())
    }

    fn probe(&self, test: &str) -> Result<Probe, SystemError> {
        let s = self.state();
        let metric = s.metrics.get(test).ok_or_else(|| SystemError::UnknownTest(test.to_string()))?;
        let requests = s.counts.get(test).copied().unwrap_or(0);
        let batches = requests / self.batch_size;
        let mut metrics = BTreeMap::new();
        if let (Some(script), true) = (self.scripts.get(test), batches > 0) {
            if let Some(last) = script.get((batches as usize - 1).min(script.len().saturating_sub(1))) {
                metrics.insert(metric.clone(), *last);
            }
        }
        Ok(Probe { requests, metrics })
    }
}
