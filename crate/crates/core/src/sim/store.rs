use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use super::draws::{stream_id, Draws};
use super::population::{dataset_from, generate_population, UserProfile};
use super::{ComponentKind, ScenarioConfig, SimError};
use crate::classifier::{dispatch, train_timed, LinearModel, SplitAssignment};
use crate::orchestrator::{ManagedSystem, Probe, SystemError, VariantPair};
use crate::pipeline::{AbTestSpec, PopulationSplitSpec};
use crate::stats::Arm;

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveTest {
    pub services: Vec<String>,
    pub kind: ComponentKind,
    pub variant_a: String,
    pub variant_b: String,
    pub fraction_a: f64,
    pub metrics: Vec<String>,
    pub routable: bool,
}

/// What is deployed right now. The initial state is the default value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Deployment {
    pub active: BTreeMap<String, ActiveTest>,
    /// Service to the test occupying it.
    pub owners: BTreeMap<String, String>,
    pub split_components: BTreeSet<String>,
}

impl Deployment {
    pub fn is_initial(&self) -> bool {
        *self == Deployment::default()
    }
}

#[derive(Debug, Clone, Default)]
struct TestMetrics {
    requests: u64,
    metrics: BTreeMap<String, VariantPair>,
}

/// The simulated web-store.
#[derive(Debug)]
pub struct WebStore {
    cfg: ScenarioConfig,
    users: Vec<UserProfile>,
    train_users: u64,
    draws: Draws,
    model: Option<LinearModel>,
    deployment: Mutex<Deployment>,
    metrics: Mutex<BTreeMap<String, TestMetrics>>,
    deployments: Mutex<u64>,
}

const ARRIVALS: &str = "arrivals";
const ASSIGNMENT: &str = "assignment";
const OUTCOME: &str = "outcome";

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl WebStore {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, SimError> {
        cfg.check()?;
        let users: Vec<UserProfile> = generate_population(&cfg, cfg.population).collect();
        Ok(WebStore {
            train_users: cfg.train_users(),
            draws: Draws::new(cfg.seed),
            users,
            cfg,
            model: None,
            deployment: Mutex::new(Deployment::default()),
            metrics: Mutex::new(BTreeMap::new()),
            deployments: Mutex::new(0),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn user(&self, id: u64) -> Option<&UserProfile> {
        self.users.get(id as usize)
    }

    /// Users reserved for training the split model.
    pub fn training_users(&self) -> &[UserProfile] {
        &self.users[..self.train_users as usize]
    }

    /// Users who send requests.
    pub fn serving_users(&self) -> &[UserProfile] {
        &self.users[self.train_users as usize..]
    }

    /// Trains the split model on the training users and installs it.
    pub fn train_model(&mut self) -> Result<Duration, SimError> {
        let data = dataset_from(self.training_users(), self.cfg.features);
        let hp = self.cfg.classifier.clone();
        let (model, elapsed) = train_timed(&data, &hp)?;
        self.model = Some(model);
        Ok(elapsed)
    }

    pub fn set_model(&mut self, model: LinearModel) {
        self.model = Some(model);
    }

    pub fn model(&self) -> Option<&LinearModel> {
        self.model.as_ref()
    }

    pub fn deployment(&self) -> Deployment {
        lock(&self.deployment).clone()
    }

    /// Deployments performed so far and their simulated total duration.
    pub fn deploy_stats(&self) -> (u64, u64) {
        let n = *lock(&self.deployments);
        (n, n * self.cfg.deploy_latency_ms)
    }

    /// Variant a user sees in a test; sticky for the test's lifetime.
    pub fn variant_of(&self, user: u64, test: &str, fraction_a: f64) -> Arm {
        if self.draws.unit(stream_id(&[ASSIGNMENT, test]), user) < fraction_a {
            Arm::A
        } else {
            Arm::B
        }
    }

    fn component(&self, service: &str) -> Result<&super::Component, SystemError> {
        self.cfg.components.get(service).ok_or_else(|| SystemError::UnknownService { service: service.to_string() })
    }

    fn check_test(&self, test: &AbTestSpec) -> Result<ComponentKind, SystemError> {
        for v in [&test.variant_a, &test.variant_b] {
            if !self.cfg.catalog.contains(&v.image_name) {
                return Err(SystemError::MissingVariant { test: test.name.clone(), image: v.image_name.clone() });
            }
        }
        let component = self.component(&test.variant_a.service_name)?;
        for service in test.services() {
            let other = self.component(service)?;
            if other.kind != component.kind {
                return Err(SystemError::UnknownService { service: service.to_string() });
            }
        }
        for metric in &test.ab_metrics {
            if *metric != component.metric {
                return Err(SystemError::UnknownMetric {
                    test: test.name.clone(),
                    metric: metric.clone(),
                    kind: format!("{:?}", component.kind).to_lowercase(),
                });
            }
        }
        Ok(component.kind)
    }
}

impl ManagedSystem for WebStore {
    fn check_variants(&self, tests: &[&AbTestSpec], splits: &[&PopulationSplitSpec]) -> Result<(), SystemError> {
        for t in tests {
            self.check_test(t)?;
        }
        for s in splits {
            if !self.cfg.catalog.contains(&s.component.image_name) {
                return Err(SystemError::MissingVariant {
                    test: s.name.clone(),
                    image: s.component.image_name.clone(),
                });
            }
        }
        Ok(())
    }

    fn deploy_variants(&self, test: &AbTestSpec) -> Result<(), SystemError> {
        let kind = self.check_test(test)?;
        let mut dep = lock(&self.deployment);
        if dep.active.contains_key(&test.name) {
            return Ok(());
        }
        let services: Vec<String> = test.services().map(String::from).collect();
        for s in &services {
            if let Some(owner) = dep.owners.get(s) {
                return Err(SystemError::DeploymentConflict {
                    service: s.clone(),
                    active: owner.clone(),
                    requested: test.name.clone(),
                });
            }
        }
        for s in &services {
            dep.owners.insert(s.clone(), test.name.clone());
        }
        dep.active.insert(
            test.name.clone(),
            ActiveTest {
                services,
                kind,
                variant_a: test.variant_a.image_name.clone(),
                variant_b: test.variant_b.image_name.clone(),
                fraction_a: test.ab_assignment.a,
                metrics: test.ab_metrics.clone(),
                routable: false,
            },
        );
        *lock(&self.deployments) += 1;
        let mut metrics = lock(&self.metrics);
        let entry = metrics.entry(test.name.clone()).or_default();
        for m in &test.ab_metrics {
            entry.metrics.entry(m.clone()).or_default();
        }
        Ok(())
    }

    fn configure_routing(&self, test: &AbTestSpec) -> Result<(), SystemError> {
        let mut dep = lock(&self.deployment);
        let active = dep.active.get_mut(&test.name).ok_or_else(|| SystemError::NoActiveTest(test.name.clone()))?;
        active.fraction_a = test.ab_assignment.a;
        active.routable = true;
        Ok(())
    }

    fn restore_initial(&self, element: &str) -> Result<(), SystemError> {
        let mut dep = lock(&self.deployment);
        if let Some(active) = dep.active.remove(element) {
            for s in active.services {
                dep.owners.remove(&s);
            }
        }
        dep.split_components.remove(element);
        Ok(())
    }

    fn deploy_split_component(&self, split: &PopulationSplitSpec) -> Result<(), SystemError> {
        let model = self.model.as_ref().ok_or_else(|| SystemError::UntrainedModel(split.name.clone()))?;
        if model.features != self.cfg.features {
            return Err(crate::classifier::ClassifierError::DimensionMismatch {
                expected: self.cfg.features,
                got: model.features,
            }
            .into());
        }
        if lock(&self.deployment).split_components.insert(split.name.clone()) {
            *lock(&self.deployments) += 1;
        }
        Ok(())
    }

    fn arrival(&self, seq: u64) -> u64 {
        let serving = self.users.len() as u64 - self.train_users;
        self.train_users + self.draws.below(stream_id(&[ARRIVALS]), seq, serving)
    }

    fn dispatch(&self, split: &PopulationSplitSpec, user: u64) -> Result<SplitAssignment, SystemError> {
        if !lock(&self.deployment).split_components.contains(&split.name) {
            return Err(SystemError::SplitNotDeployed(split.name.clone()));
        }
        let model = self.model.as_ref().ok_or_else(|| SystemError::UntrainedModel(split.name.clone()))?;
        let profile = &self.users[user as usize];
        Ok(dispatch(split, model, user, &profile.features)?)
    }

    fn serve(&self, seq: u64, user: u64, test: &str) -> Result<(), SystemError> {
        let (kind, fraction_a, metrics) = {
            let dep = lock(&self.deployment);
            match dep.active.get(test) {
                Some(a) if a.routable => (a.kind, a.fraction_a, a.metrics.clone()),
                _ => return Err(SystemError::NoActiveTest(test.to_string())),
            }
        };
        let arm = self.variant_of(user, test, fraction_a);
        let p = self.users[user as usize].propensity(&self.cfg, kind, arm);
        let samples: Vec<(String, f64)> = metrics
            .into_iter()
            .map(|m| {
                let hit = self.draws.unit(stream_id(&[OUTCOME, test, &m]), seq) < p;
                (m, if hit { 1.0 } else { 0.0 })
            })
            .collect();
        let mut all = lock(&self.metrics);
        let entry = all.entry(test.to_string()).or_default();
        entry.requests += 1;
        for (m, x) in samples {
            let pair = entry.metrics.entry(m).or_default();
            match arm {
                Arm::A => pair.a.push(x)?,
                Arm::B => pair.b.push(x)?,
            }
        }
        Ok(())
    }

    fn probe(&self, test: &str) -> Result<Probe, SystemError> {
        let all = lock(&self.metrics);
        let m = all.get(test).ok_or_else(|| SystemError::UnknownTest(test.to_string()))?;
        Ok(Probe { requests: m.requests, metrics: m.metrics.clone() })
    }
}
