//! The feedback loop driving a whole pipeline, including population splits.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;

use serde::Serialize;

use super::knowledge::{DeploymentAction, KnowledgeInstance, KnowledgeRepository, Routing};
use super::runner::{InstanceRunner, RunnerState, TestRecord};
use super::trace::{Event, TraceEntry};
use super::{execute_action, EngineConfig, ExecutionError, ExecutionMode, ManagedSystem, OrchestratorError};
use crate::pipeline::{PipelineSpec, PopulationSplitSpec, Target};
use crate::stats::StatResult;

/// Traffic one sub-pipeline received during a split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubPipelineRecord {
    pub id: String,
    /// Requests dispatched to this sub-pipeline while the split was active.
    pub dispatched: u64,
    /// Global requests from split entry until this sub-pipeline reached End.
    pub total_requests: u64,
    #[serde(skip)]
    pub users: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRecord {
    pub split: String,
    pub entered_at: u64,
    pub exited_at: u64,
    pub sub_pipelines: Vec<SubPipelineRecord>,
    /// Requests whose predicted class matched no condition.
    pub unrouted: u64,
}

impl SplitRecord {
    pub fn requests(&self) -> u64 {
        self.exited_at - self.entered_at
    }

    /// Share of the split's requests dispatched to each sub-pipeline.
    pub fn fractions(&self) -> BTreeMap<String, f64> {
        let total = self.requests().max(1) as f64;
        self.sub_pipelines.iter().map(|s| (s.id.clone(), s.dispatched as f64 / total)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub pipeline: String,
    pub trace: Vec<TraceEntry>,
    /// Final results; sub-pipeline tests are keyed `subpl_id/test_name`.
    pub results: BTreeMap<String, StatResult>,
    /// Every batch result per test, same keys as `results`.
    pub histories: BTreeMap<String, Vec<StatResult>>,
    /// Finished tests in trace order.
    pub tests: Vec<TestRecord>,
    pub splits: Vec<SplitRecord>,
    pub total_requests: u64,
}

/// Managing system: knowledge repository plus the MAPE loop over a managed
/// system.
pub struct Orchestrator<'s, S: ManagedSystem> {
    system: &'s S,
    knowledge: KnowledgeRepository,
    config: EngineConfig,
}

impl<'s, S: ManagedSystem> Orchestrator<'s, S> {
    pub fn new(system: &'s S, config: EngineConfig) -> Self {
        Orchestrator { system, knowledge: KnowledgeRepository::new(), config }
    }

    pub fn knowledge(&self) -> &KnowledgeRepository {
        &self.knowledge
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Setup and execution in one call.
    pub fn execute_pipeline(&self, spec: &PipelineSpec) -> Result<RunOutcome, ExecutionError> {
        self.setup_and_initiate(spec)?.execute()
    }

    /// Checks the catalog, creates the root knowledge instance and deploys the
    /// first element. Nothing is deployed if a variant is missing.
    pub fn setup_and_initiate<'o>(&'o self, spec: &'o PipelineSpec) -> Result<Run<'o, 's, S>, ExecutionError> {
        let bare = |source: OrchestratorError| ExecutionError { source, trace: Vec::new() };
        if self.knowledge.contains(&spec.name) {
            return Err(bare(OrchestratorError::AlreadyRunning(spec.name.clone())));
        }
        let tests: Vec<_> = spec.tests.values().collect();
        let splits: Vec<_> = spec.splits.iter().collect();
        self.system.check_variants(&tests, &splits).map_err(|e| bare(e.into()))?;
        self.knowledge
            .add_instance(KnowledgeInstance::new(spec.name.clone(), spec.start.clone(), None))
            .map_err(|_| bare(OrchestratorError::AlreadyRunning(spec.name.clone())))?;

        let root = InstanceRunner::new(
            spec.name.clone(),
            spec,
            self.system,
            &self.knowledge,
            &spec.rules,
            None,
            None,
            None,
            self.config.batch_size,
        );
        let mut run = Run {
            orch: self,
            spec,
            root,
            seq: 0,
            limit: self.config.request_limit.unwrap_or_else(|| default_request_limit(spec)),
            trace: Vec::new(),
            tests: Vec::new(),
            histories: BTreeMap::new(),
            splits: Vec::new(),
            completed: false,
        };
        if let Err(e) = run.root.begin(spec.start.clone(), 0) {
            return Err(run.fail(e));
        }
        Ok(run)
    }

    /// Deploys the split component and adds one knowledge instance per
    /// sub-pipeline, each restricted to its class.
    pub fn execute_split_entry(
        &self,
        root: &str,
        spec: &PipelineSpec,
        split: &PopulationSplitSpec,
    ) -> Result<(), OrchestratorError> {
        let instances: Vec<KnowledgeInstance> = split
            .sub_pipelines
            .iter()
            .zip(&split.conditions)
            .map(|(sp, cond)| {
                let routing = Routing {
                    split: split.name.clone(),
                    split_property: split.split_property.clone(),
                    condition: *cond,
                };
                KnowledgeInstance::new(sp.id.clone(), Target::Element(sp.start.clone()), Some(routing))
            })
            .collect();
        if let Some(taken) = instances.iter().find(|i| self.knowledge.contains(&i.instance_id)) {
            return Err(OrchestratorError::InstanceCollision(taken.instance_id.clone()));
        }
        let action =
            DeploymentAction::DeploySplitComponent { split: split.name.clone(), component: split.component.clone() };
        execute_action(self.system, spec, &action)?;
        self.knowledge.update(root, |k| k.executed_actions.push(action));
        self.knowledge.add_all(instances)
    }

    /// Requires every sub-pipeline to have reached End. Copies their results
    /// into the root instance, removes them and undeploys the split component.
    pub fn execute_split_exit(
        &self,
        root: &str,
        spec: &PipelineSpec,
        split: &PopulationSplitSpec,
    ) -> Result<(), OrchestratorError> {
        for sp in &split.sub_pipelines {
            match self.knowledge.get(&sp.id) {
                None => {
                    return Err(OrchestratorError::ContractViolation(format!("sub-pipeline `{}` is not live", sp.id)));
                }
                Some(inst) if !inst.current.is_end() => {
                    return Err(OrchestratorError::ContractViolation(format!(
                        "split `{}` exited while sub-pipeline `{}` is at `{}`",
                        split.name, sp.id, inst.current
                    )));
                }
                Some(_) => {}
            }
        }
        for sp in &split.sub_pipelines {
            let inst = self.knowledge.remove_instance(&sp.id).expect("checked above");
            for (test, result) in inst.results() {
                self.knowledge.update(root, |k| k.record_result(&format!("{}/{test}", sp.id), result.clone()))?;
            }
        }
        let action = DeploymentAction::RestoreInitial { element: split.name.clone() };
        execute_action(self.system, spec, &action)?;
        self.knowledge.update(root, |k| k.executed_actions.push(action));
        Ok(())
    }
}

/// Generous bound on global requests so a sub-pipeline that never receives
/// traffic cannot stall the run forever.
fn default_request_limit(spec: &PipelineSpec) -> u64 {
    let caps: u64 = spec.tests.values().map(|t| t.exp_length).sum();
    caps.saturating_mul(100).max(1_000_000)
}

/// An initiated pipeline.
pub struct Run<'o, 's, S: ManagedSystem> {
    orch: &'o Orchestrator<'s, S>,
    spec: &'o PipelineSpec,
    root: InstanceRunner<'o, S>,
    seq: u64,
    limit: u64,
    trace: Vec<TraceEntry>,
    tests: Vec<TestRecord>,
    histories: BTreeMap<String, Vec<StatResult>>,
    splits: Vec<SplitRecord>,
    completed: bool,
}

impl<S: ManagedSystem> Drop for Run<'_, '_, S> {
    fn drop(&mut self) {
        if !self.completed {
            // Aborted run: drop whatever knowledge it still owns.
            for sp in self.spec.splits.iter().flat_map(|s| &s.sub_pipelines) {
                self.orch.knowledge.remove_instance(&sp.id);
            }
            self.orch.knowledge.remove_instance(&self.spec.name);
        }
    }
}

enum Dispatched {
    Unrouted,
    To(usize),
}

impl<'o, 's, S: ManagedSystem> Run<'o, 's, S> {
    /// Trace emitted so far.
    pub fn trace(&self) -> Vec<TraceEntry> {
        let mut t = self.trace.clone();
        t.extend(self.root.events.iter().cloned());
        t
    }

    fn drain_root(&mut self) {
        self.trace.append(&mut self.root.events);
        self.tests.append(&mut self.root.records);
        self.histories.extend(self.root.histories.drain(..));
    }

    fn fail(&mut self, source: OrchestratorError) -> ExecutionError {
        self.drain_root();
        ExecutionError { source, trace: std::mem::take(&mut self.trace) }
    }

    fn bump(&mut self) -> Result<u64, OrchestratorError> {
        self.seq += 1;
        if self.seq > self.limit {
            return Err(OrchestratorError::RequestLimit { limit: self.limit });
        }
        Ok(self.seq)
    }

    pub fn execute(mut self) -> Result<RunOutcome, ExecutionError> {
        loop {
            let step = match self.root.state {
                RunnerState::Testing { .. } => self.bump().and_then(|seq| {
                    let user = self.orch.system.arrival(seq);
                    self.root.on_request(seq, user)
                }),
                RunnerState::AtSplit(split) => self.run_split(split),
                RunnerState::Finished { .. } => break,
                RunnerState::Idle => unreachable!("root runner idle after begin"),
            };
            if let Err(e) = step {
                return Err(self.fail(e));
            }
        }
        self.drain_root();
        let root = self.orch.knowledge.remove_instance(&self.spec.name).expect("root instance is live");
        let notify = DeploymentAction::NotifyComplete { pipeline: self.spec.name.clone() };
        if let Err(e) = execute_action(self.orch.system, self.spec, &notify) {
            return Err(self.fail(e));
        }
        self.trace.push(TraceEntry {
            instance: self.spec.name.clone(),
            event: Event::Complete,
            requests_total: self.seq,
            live_instances: self.orch.knowledge.live(),
        });
        self.completed = true;
        Ok(RunOutcome {
            pipeline: self.spec.name.clone(),
            trace: std::mem::take(&mut self.trace),
            results: root.results().clone(),
            histories: std::mem::take(&mut self.histories),
            tests: std::mem::take(&mut self.tests),
            splits: std::mem::take(&mut self.splits),
            total_requests: self.seq,
        })
    }

    fn run_split(&mut self, split: &'o PopulationSplitSpec) -> Result<(), OrchestratorError> {
        let orch = self.orch;
        let entry = self.seq;
        orch.execute_split_entry(&self.spec.name, self.spec, split)?;
        self.root.emit(
            Event::SplitEntry {
                split: split.name.clone(),
                sub_pipelines: split.sub_pipelines.iter().map(|s| s.id.clone()).collect(),
            },
            entry,
        );
        self.drain_root();

        let mut runners = Vec::with_capacity(split.sub_pipelines.len());
        let mut started = Ok(());
        for (sp, cond) in split.sub_pipelines.iter().zip(&split.conditions) {
            let routing =
                Routing { split: split.name.clone(), split_property: split.split_property.clone(), condition: *cond };
            let mut r = InstanceRunner::new(
                sp.id.clone(),
                self.spec,
                orch.system,
                &orch.knowledge,
                &sp.rules,
                Some(routing),
                Some(split.name.as_str()),
                Some(entry),
                orch.config.batch_size,
            );
            if started.is_ok() {
                started = r.begin(Target::Element(sp.start.clone()), entry);
            }
            runners.push(r);
        }

        let mut log: Vec<(u64, u64, Dispatched)> = Vec::new();
        let outcome = started.and_then(|()| match orch.config.mode {
            ExecutionMode::Serialized => self.drive_serialized(split, &mut runners, &mut log),
            ExecutionMode::Concurrent => self.drive_concurrent(split, &mut runners, &mut log),
        });

        // Sub-pipeline events go into the trace as contiguous blocks, in
        // declaration order, whichever mode produced them.
        for r in &mut runners {
            self.trace.append(&mut r.events);
            self.tests.append(&mut r.records);
            self.histories.extend(r.histories.drain(..));
        }
        outcome?;

        let exit = runners.iter().filter_map(|r| r.finished_at()).max().unwrap_or(entry);
        self.seq = exit;
        let mut subs: Vec<SubPipelineRecord> = runners
            .iter()
            .map(|r| SubPipelineRecord {
                id: r.id.clone(),
                dispatched: 0,
                total_requests: r.finished_at().unwrap_or(exit) - entry,
                users: BTreeSet::new(),
            })
            .collect();
        let mut unrouted = 0;
        for (_, user, d) in log.into_iter().filter(|(seq, _, _)| *seq <= exit) {
            match d {
                Dispatched::Unrouted => unrouted += 1,
                Dispatched::To(i) => {
                    subs[i].dispatched += 1;
                    subs[i].users.insert(user);
                }
            }
        }
        self.splits.push(SplitRecord {
            split: split.name.clone(),
            entered_at: entry,
            exited_at: exit,
            sub_pipelines: subs,
            unrouted,
        });

        orch.execute_split_exit(&self.spec.name, self.spec, split)?;
        self.root.emit(Event::SplitExit { split: split.name.clone(), next: split.next.clone() }, exit);
        self.root.resume(split.next.clone(), exit)
    }

    fn dispatch(&self, split: &PopulationSplitSpec, seq: u64) -> Result<(u64, Dispatched), OrchestratorError> {
        let user = self.orch.system.arrival(seq);
        let assignment = self.orch.system.dispatch(split, user)?;
        let d = match assignment.target {
            Some(id) => Dispatched::To(split.sub_pipelines.iter().position(|s| s.id == id).ok_or_else(|| {
                OrchestratorError::ContractViolation(format!("dispatch chose unknown sub-pipeline `{id}`"))
            })?),
            None => Dispatched::Unrouted,
        };
        Ok((user, d))
    }

    /// Fixed interleaving: each request is handled to completion before the
    /// next one is dispatched.
    fn drive_serialized(
        &mut self,
        split: &PopulationSplitSpec,
        runners: &mut [InstanceRunner<'o, S>],
        log: &mut Vec<(u64, u64, Dispatched)>,
    ) -> Result<(), OrchestratorError> {
        while !runners.iter().all(|r| r.is_finished()) {
            let seq = self.bump()?;
            let (user, d) = self.dispatch(split, seq)?;
            if let Dispatched::To(i) = d {
                runners[i].on_request(seq, user)?;
            }
            log.push((seq, user, d));
        }
        Ok(())
    }

    /// One worker thread per sub-pipeline, fed by this thread.
    fn drive_concurrent(
        &mut self,
        split: &PopulationSplitSpec,
        runners: &mut [InstanceRunner<'o, S>],
        log: &mut Vec<(u64, u64, Dispatched)>,
    ) -> Result<(), OrchestratorError>
    where
        S: Sync,
    {
        let done: Vec<AtomicBool> = runners.iter().map(|_| AtomicBool::new(false)).collect();
        let mut dispatcher_error = None;
        let worker_errors: Vec<Option<OrchestratorError>> = std::thread::scope(|scope| {
            let mut senders = Vec::new();
            let mut handles = Vec::new();
            for (runner, flag) in runners.iter_mut().zip(&done) {
                let (tx, rx) = mpsc::sync_channel::<(u64, u64)>(1024);
                senders.push(tx);
                handles.push(scope.spawn(move || {
                    for (seq, user) in rx {
                        if runner.is_finished() {
                            continue;
                        }
                        if let Err(e) = runner.on_request(seq, user) {
                            flag.store(true, Ordering::Release);
                            return Some(e);
                        }
                        if runner.is_finished() {
                            flag.store(true, Ordering::Release);
                        }
                    }
                    None
                }));
            }
            while !done.iter().all(|d| d.load(Ordering::Acquire)) {
                let step = self.bump().and_then(|seq| self.dispatch(split, seq).map(|r| (seq, r)));
                match step {
                    Ok((seq, (user, d))) => {
                        if let Dispatched::To(i) = d {
                            if !done[i].load(Ordering::Acquire) {
                                // A closed channel means the worker already stopped.
                                let _ = senders[i].send((seq, user));
                            }
                        }
                        log.push((seq, user, d));
                    }
                    Err(e) => {
                        dispatcher_error = Some(e);
                        break;
                    }
                }
            }
            drop(senders);
            handles.into_iter().map(|h| h.join().unwrap_or(Some(OrchestratorError::WorkerPanicked))).collect()
        });
        if let Some(e) = worker_errors.into_iter().flatten().next() {
            return Err(e);
        }
        match dispatcher_error {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
