use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard};

use serde::Serialize;

use super::{OrchestratorError, Probe};
use crate::pipeline::{ClassCondition, SplitComponent, Target, Variant};
use crate::stats::StatResult;

/// Restriction of a sub-pipeline's traffic to one class of the split property.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Routing {
    pub split: String,
    pub split_property: String,
    pub condition: ClassCondition,
}

/// Planner output consumed by the executor. Executing an action twice has
/// the same effect as executing it once.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeploymentAction {
    DeployVariants { test: String, variant_a: Variant, variant_b: Variant },
    ConfigureRouting { test: String, fraction_a: f64, restriction: Option<Routing> },
    RestoreInitial { element: String },
    DeploySplitComponent { split: String, component: SplitComponent },
    NotifyComplete { pipeline: String },
}

/// Runtime state of one (sub-)pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeInstance {
    pub instance_id: String,
    pub current: Target,
    pub routing: Option<Routing>,
    pub probes: BTreeMap<String, Probe>,
    results: BTreeMap<String, StatResult>,
    pub planned_actions: Vec<DeploymentAction>,
    pub executed_actions: Vec<DeploymentAction>,
}

impl KnowledgeInstance {
    pub fn new(instance_id: impl Into<String>, current: Target, routing: Option<Routing>) -> Self {
        KnowledgeInstance {
            instance_id: instance_id.into(),
            current,
            routing,
            probes: BTreeMap::new(),
            results: BTreeMap::new(),
            planned_actions: Vec::new(),
            executed_actions: Vec::new(),
        }
    }

    pub fn results(&self) -> &BTreeMap<String, StatResult> {
        &self.results
    }

    /// Stores a final result. Each test is written at most once.
    pub fn record_result(&mut self, key: &str, result: StatResult) -> Result<(), OrchestratorError> {
        if self.results.contains_key(key) {
            return Err(OrchestratorError::ResultRewritten { instance: self.instance_id.clone(), test: key.into() });
        }
        self.results.insert(key.to_string(), result);
        Ok(())
    }
}

/// Shared store of knowledge instances. Creation and removal are atomic;
/// each instance has a single writer.
#[derive(Debug, Default)]
pub struct KnowledgeRepository {
    instances: Mutex<BTreeMap<String, KnowledgeInstance>>,
}

impl KnowledgeRepository {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, KnowledgeInstance>> {
        self.instances.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn add_instance(&self, instance: KnowledgeInstance) -> Result<(), OrchestratorError> {
        self.add_all(vec![instance])
    }

    /// Adds every instance or none of them.
    pub fn add_all(&self, instances: Vec<KnowledgeInstance>) -> Result<(), OrchestratorError> {
        let mut map = self.lock();
        for (i, inst) in instances.iter().enumerate() {
            let dup_in_batch = instances[..i].iter().any(|o| o.instance_id == inst.instance_id);
            if dup_in_batch || map.contains_key(&inst.instance_id) {
                return Err(OrchestratorError::InstanceCollision(inst.instance_id.clone()));
            }
        }
        for inst in instances {
            map.insert(inst.instance_id.clone(), inst);
        }
        Ok(())
    }

    pub fn remove_instance(&self, id: &str) -> Option<KnowledgeInstance> {
        self.lock().remove(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lock().contains_key(id)
    }

    pub fn live(&self) -> usize {
        self.lock().len()
    }

    pub fn ids(&self) -> Vec<String> {
        self.lock().keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<KnowledgeInstance> {
        self.lock().get(id).cloned()
    }

    /// Runs `f` on one instance. Panics if the instance is gone, which would
    /// mean a runner outlived its own knowledge.
    pub fn update<R>(&self, id: &str, f: impl FnOnce(&mut KnowledgeInstance) -> R) -> R {
        let mut map = self.lock();
        let inst = map.get_mut(id).unwrap_or_else(|| panic!("knowledge instance `{id}` is not live"));
        f(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result() -> StatResult {
        StatResult {
            test_name: "T".into(),
            p_value: 0.5,
            mean_a: 0.0,
            mean_b: 0.0,
            n_a: 1,
            n_b: 1,
            significant: false,
            requests_consumed: 2,
        }
    }

    #[test]
    fn results_are_write_once() {
        let mut k = KnowledgeInstance::new("root", Target::End, None);
        k.record_result("T", result()).unwrap();
        assert!(matches!(k.record_result("T", result()), Err(OrchestratorError::ResultRewritten { .. })));
    }

    #[test]
    fn batch_add_is_atomic() {
        let repo = KnowledgeRepository::new();
        repo.add_instance(KnowledgeInstance::new("b", Target::End, None)).unwrap();
        let batch =
            vec![KnowledgeInstance::new("a", Target::End, None), KnowledgeInstance::new("b", Target::End, None)];
        assert!(matches!(repo.add_all(batch), Err(OrchestratorError::InstanceCollision(id)) if id == "b"));
        assert_eq!(repo.ids(), vec!["b".to_string()]);
        assert!(repo.remove_instance("b").is_some());
        assert_eq!(repo.live(), 0);
    }
}
