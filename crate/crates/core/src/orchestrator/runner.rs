//! Per-instance execution: deploy, monitor, transition.

use serde::Serialize;

use super::knowledge::{DeploymentAction, KnowledgeRepository, Routing};
use super::rules::next_element;
use super::trace::{Event, TraceEntry};
use super::{execute_action, ManagedSystem, OrchestratorError};
use crate::pipeline::{AbTestSpec, Element, PipelineSpec, PopulationSplitSpec, Target, TransitionRule};
use crate::stats::{SequentialMonitor, StatResult};

/// Request accounting for one finished test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestRecord {
    /// Results-map key: the test name, or `subpl_id/test_name`.
    pub key: String,
    pub instance: String,
    pub test: String,
    /// Requests routed to the test until it stopped.
    pub requests: u64,
    /// Global requests from the start of the test (root) or from split entry
    /// (sub-pipeline) until the test stopped.
    pub total_requests: u64,
    pub started_at: u64,
    pub finished_at: u64,
    pub significant: bool,
    pub p_value: f64,
}

#[allow(clippy::large_enum_variant)]
pub(crate) enum RunnerState<'a> {
    Idle,
    Testing { test: &'a AbTestSpec, monitor: SequentialMonitor, local: u64, started_at: u64 },
    AtSplit(&'a PopulationSplitSpec),
    Finished { at: u64 },
}

pub(crate) struct InstanceRunner<'a, S: ManagedSystem> {
    pub id: String,
    spec: &'a PipelineSpec,
    system: &'a S,
    knowledge: &'a KnowledgeRepository,
    rules: &'a [TransitionRule],
    routing: Option<Routing>,
    /// Set for sub-pipelines; results keys get `id/` prepended.
    split: Option<&'a str>,
    /// Global request count that `total_requests` is measured from; `None`
    /// measures from each test's own start.
    origin: Option<u64>,
    batch_size: u64,
    pub state: RunnerState<'a>,
    pub events: Vec<TraceEntry>,
    pub records: Vec<TestRecord>,
    pub histories: Vec<(String, Vec<StatResult>)>,
}

impl<'a, S: ManagedSystem> InstanceRunner<'a, S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        spec: &'a PipelineSpec,
        system: &'a S,
        knowledge: &'a KnowledgeRepository,
        rules: &'a [TransitionRule],
        routing: Option<Routing>,
        split: Option<&'a str>,
        origin: Option<u64>,
        batch_size: u64,
    ) -> Self {
        InstanceRunner {
            id,
            spec,
            system,
            knowledge,
            rules,
            routing,
            split,
            origin,
            batch_size,
            state: RunnerState::Idle,
            events: Vec::new(),
            records: Vec::new(),
            histories: Vec::new(),
        }
    }

    pub fn emit(&mut self, event: Event, at: u64) {
        let live_instances = self.knowledge.live();
        self.events.push(TraceEntry { instance: self.id.clone(), event, requests_total: at, live_instances });
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.state, RunnerState::Finished { .. })
    }

    pub fn finished_at(&self) -> Option<u64> {
        match self.state {
            RunnerState::Finished { at } => Some(at),
            _ => None,
        }
    }

    fn result_key(&self, test: &str) -> String {
        match self.split {
            Some(_) => format!("{}/{test}", self.id),
            None => test.to_string(),
        }
    }

    fn run_actions(&mut self, actions: Vec<DeploymentAction>) -> Result<(), OrchestratorError> {
        self.knowledge.update(&self.id, |k| k.planned_actions = actions.clone());
        for action in actions {
            execute_action(self.system, self.spec, &action)?;
            self.knowledge.update(&self.id, |k| {
                k.planned_actions.retain(|a| a != &action);
                k.executed_actions.push(action);
            });
        }
        Ok(())
    }

    pub fn begin(&mut self, start: Target, at: u64) -> Result<(), OrchestratorError> {
        self.emit(Event::Start { element: start.clone() }, at);
        self.advance(start, at)
    }

    /// Continues with `next` once a split has exited.
    pub fn resume(&mut self, next: Target, at: u64) -> Result<(), OrchestratorError> {
        self.advance(next, at)
    }

    fn advance(&mut self, target: Target, at: u64) -> Result<(), OrchestratorError> {
        self.knowledge.update(&self.id, |k| k.current = target.clone());
        let name = match &target {
            Target::End => {
                self.emit(Event::End, at);
                self.state = RunnerState::Finished { at };
                return Ok(());
            }
            Target::Element(name) => name,
        };
        match self.spec.element(name) {
            Some(Element::Test(test)) => {
                self.run_actions(vec![
                    DeploymentAction::DeployVariants {
                        test: test.name.clone(),
                        variant_a: test.variant_a.clone(),
                        variant_b: test.variant_b.clone(),
                    },
                    DeploymentAction::ConfigureRouting {
                        test: test.name.clone(),
                        fraction_a: test.ab_assignment.a,
                        restriction: self.routing.clone(),
                    },
                ])?;
                self.emit(Event::Deploy { test: test.name.clone() }, at);
                let monitor = SequentialMonitor::new(test, self.batch_size)?;
                self.state = RunnerState::Testing { test, monitor, local: 0, started_at: at };
                Ok(())
            }
            Some(Element::Split(split)) => match self.split {
                Some(outer) => Err(OrchestratorError::NestedSplit { outer: outer.into(), inner: split.name.clone() }),
                None => {
                    self.state = RunnerState::AtSplit(split);
                    Ok(())
                }
            },
            None => Err(OrchestratorError::UndeclaredElement(name.clone())),
        }
    }

    /// Handles one request routed to this instance. Requests arriving after
    /// the instance has finished are ignored.
    pub fn on_request(&mut self, seq: u64, user: u64) -> Result<(), OrchestratorError> {
        let RunnerState::Testing { test, monitor, local, .. } = &mut self.state else {
            return Ok(());
        };
        let test: &'a AbTestSpec = test;
        self.system.serve(seq, user, &test.name)?;
        *local += 1;
        if !monitor.is_boundary(*local) {
            return Ok(());
        }
        let probe = self.system.probe(&test.name)?;
        let pair = probe.metrics.get(&test.hypothesis.metric).copied().unwrap_or_default();
        let checkpoint = monitor.checkpoint(*local, &pair.a, &pair.b)?;
        self.knowledge.update(&self.id, |k| k.probes.insert(test.name.clone(), probe));
        self.emit(Event::BatchResult { result: checkpoint.result.clone() }, seq);
        if checkpoint.done {
            self.complete_test(checkpoint.result, seq)?;
        }
        Ok(())
    }

    fn complete_test(&mut self, result: StatResult, at: u64) -> Result<(), OrchestratorError> {
        let RunnerState::Testing { test, monitor, local, started_at } =
            std::mem::replace(&mut self.state, RunnerState::Idle)
        else {
            unreachable!("complete_test outside a test");
        };
        let key = self.result_key(&test.name);
        self.knowledge.update(&self.id, |k| k.record_result(&test.name, result.clone()))?;
        self.run_actions(vec![DeploymentAction::RestoreInitial { element: test.name.clone() }])?;
        let (rule, next) = next_element(self.rules, &result, &test.name);
        self.emit(
            Event::Transition { test: test.name.clone(), rule: rule.map(|r| r.name.clone()), next: next.clone() },
            at,
        );
        self.records.push(TestRecord {
            key: key.clone(),
            instance: self.id.clone(),
            test: test.name.clone(),
            requests: local,
            total_requests: at - self.origin.unwrap_or(started_at),
            started_at,
            finished_at: at,
            significant: result.significant,
            p_value: result.p_value,
        });
        self.histories.push((key, monitor.history().to_vec()));
        self.advance(next, at)
    }
}
