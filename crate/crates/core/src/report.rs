//! Running scenarios against the simulated web-store and comparing a
//! sequential pipeline with one that splits the population.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::thread;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::classifier::predict_class;
use crate::orchestrator::{EngineConfig, ExecutionError, Orchestrator, RunOutcome};
use crate::pipeline::PipelineSpec;
use crate::sim::{ScenarioConfig, SimError, WebStore};
use crate::stats::StatResult;

/// Sequential and parallel runs of one seed.
type SeedRuns = (u64, Result<ScenarioRun, ReportError>, Result<ScenarioRun, ReportError>);

/// Users timed when measuring prediction latency.
pub const PREDICT_SAMPLES: usize = 1001;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Execution(#[from] ExecutionError),
    #[error("no runs requested")]
    NoRuns,
}

/// Wall-clock cost of the population split component. Not written to any
/// output file, since it differs between runs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Overhead {
    pub train_ms: f64,
    pub deploy_ms: f64,
    pub predict_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub seed: u64,
    pub batch_size: u64,
    pub outcome: RunOutcome,
    pub deployments: u64,
    pub simulated_deploy_ms: u64,
    /// Present when the pipeline has a population split.
    pub overhead: Option<Overhead>,
}

fn median_duration_ms(mut samples: Vec<f64>) -> f64 {
    median(&mut samples).unwrap_or(0.0)
}

/// Median; mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Executes one pipeline on a fresh web-store built from `cfg`.
pub fn run_scenario(
    spec: &PipelineSpec,
    cfg: &ScenarioConfig,
    engine: &EngineConfig,
) -> Result<ScenarioRun, ReportError> {
    let mut store = WebStore::new(cfg.clone())?;
    let mut overhead = None;
    if !spec.splits.is_empty() {
        let train = store.train_model()?;
        let model = store.model().expect("model was just trained");
        let mut timings = Vec::with_capacity(PREDICT_SAMPLES);
        for user in store.serving_users().iter().take(PREDICT_SAMPLES) {
            let start = Instant::now();
            let class = predict_class(model, &user.features).map_err(SimError::from)?;
            timings.push(start.elapsed().as_secs_f64() * 1e3);
            std::hint::black_box(class);
        }
        overhead = Some(Overhead {
            train_ms: train.as_secs_f64() * 1e3,
            deploy_ms: 0.0,
            predict_ms: median_duration_ms(timings),
        });
    }
    let outcome = Orchestrator::new(&store, engine.clone()).execute_pipeline(spec)?;
    let (deployments, simulated_deploy_ms) = store.deploy_stats();
    if let Some(o) = overhead.as_mut() {
        o.deploy_ms = simulated_deploy_ms as f64;
    }
    Ok(ScenarioRun {
        seed: cfg.seed,
        batch_size: engine.batch_size,
        outcome,
        deployments,
        simulated_deploy_ms,
        overhead,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TestSummary {
    pub key: String,
    pub instance: String,
    pub test: String,
    /// Requests routed to the test until it stopped.
    pub requests: u64,
    /// All requests the store served from the test's start (or its split's
    /// entry) until it stopped.
    pub total_requests: u64,
    pub significant: bool,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubPipelineSummary {
    pub id: String,
    pub dispatched: u64,
    pub fraction: f64,
    pub total_requests: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SplitSummary {
    pub split: String,
    pub entered_at: u64,
    pub exited_at: u64,
    pub requests: u64,
    pub sub_pipelines: Vec<SubPipelineSummary>,
    pub unrouted: u64,
    pub unrouted_fraction: f64,
}

/// Deterministic summary of one run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub pipeline: String,
    pub seed: u64,
    pub batch_size: u64,
    pub total_requests: u64,
    pub deployments: u64,
    pub simulated_deploy_ms: u64,
    pub tests: Vec<TestSummary>,
    pub results: BTreeMap<String, StatResult>,
    pub splits: Vec<SplitSummary>,
    pub split_fractions: BTreeMap<String, f64>,
}

impl RunSummary {
    pub fn from_run(run: &ScenarioRun) -> Self {
        let o = &run.outcome;
        let tests = o
            .tests
            .iter()
            .map(|t| TestSummary {
                key: t.key.clone(),
                instance: t.instance.clone(),
                test: t.test.clone(),
                requests: t.requests,
                total_requests: t.total_requests,
                significant: t.significant,
                p_value: t.p_value,
            })
            .collect();
        let splits: Vec<SplitSummary> = o
            .splits
            .iter()
            .map(|s| {
                let total = s.requests().max(1) as f64;
                SplitSummary {
                    split: s.split.clone(),
                    entered_at: s.entered_at,
                    exited_at: s.exited_at,
                    requests: s.requests(),
                    sub_pipelines: s
                        .sub_pipelines
                        .iter()
                        .map(|sp| SubPipelineSummary {
                            id: sp.id.clone(),
                            dispatched: sp.dispatched,
                            fraction: sp.dispatched as f64 / total,
                            total_requests: sp.total_requests,
                        })
                        .collect(),
                    unrouted: s.unrouted,
                    unrouted_fraction: s.unrouted as f64 / total,
                }
            })
            .collect();
        let split_fractions = o.splits.iter().flat_map(|s| s.fractions()).collect();
        RunSummary {
            pipeline: o.pipeline.clone(),
            seed: run.seed,
            batch_size: run.batch_size,
            total_requests: o.total_requests,
            deployments: run.deployments,
            simulated_deploy_ms: run.simulated_deploy_ms,
            tests,
            results: o.results.clone(),
            splits,
            split_fractions,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Sequential,
    Parallel,
}

/// Medians over runs for one compared test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestRow {
    pub pipeline: PipelineKind,
    pub test: String,
    /// Requests routed to the test until significance or the cap.
    pub requests: f64,
    /// Requests the store served while the test (or its sub-pipeline) ran.
    pub total_requests: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub batch_size: u64,
    pub rows: Vec<TestRow>,
    /// Sum of the sequential rows' totals.
    pub sequential_total: f64,
    /// Max over sub-pipelines of their median total.
    pub parallel_total: f64,
    /// `(1 - parallel_total / sequential_total) * 100`; absent when a run failed.
    pub reduction_pct: Option<f64>,
    /// Same ratio using requests routed to each test instead of totals.
    pub reduction_pct_routed: Option<f64>,
    /// Median of the per-run reductions.
    pub median_run_reduction_pct: Option<f64>,
    /// Median share of split requests per sub-pipeline, plus `unrouted`.
    pub split_fractions: BTreeMap<String, f64>,
    pub simulated_deploy_ms: f64,
    pub failures: Vec<String>,
    /// Median overhead; timing only, so kept out of serialized output.
    #[serde(skip)]
    pub overhead: Option<Overhead>,
}

pub const UNROUTED: &str = "unrouted";

/// Per-run quantities of one pipeline, keyed by compared test name.
struct Side {
    routed: BTreeMap<String, u64>,
    total: BTreeMap<String, u64>,
}

/// Tests present in both pipelines: sequential root tests that also run in
/// a sub-pipeline of the parallel one.
fn compared_tests(seq: &PipelineSpec, par: &PipelineSpec) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for name in &seq.root_tests {
        if let Some((_, sp)) = par.sub_pipelines().find(|(_, sp)| sp.tests.contains(name)) {
            out.push((name.clone(), sp.id.clone()));
        }
    }
    out
}

fn sequential_side(run: &ScenarioRun, compared: &[(String, String)]) -> Side {
    let mut routed = BTreeMap::new();
    let mut total = BTreeMap::new();
    for (test, _) in compared {
        if let Some(r) = run.outcome.tests.iter().find(|r| &r.key == test) {
            routed.insert(test.clone(), r.requests);
            total.insert(test.clone(), r.total_requests);
        }
    }
    Side { routed, total }
}

fn parallel_side(run: &ScenarioRun, compared: &[(String, String)]) -> Side {
    let mut routed = BTreeMap::new();
    let mut total = BTreeMap::new();
    for (test, sp_id) in compared {
        if let Some(r) = run.outcome.tests.iter().find(|r| r.key == format!("{sp_id}/{test}")) {
            routed.insert(test.clone(), r.requests);
        }
        let sub = run.outcome.splits.iter().flat_map(|s| &s.sub_pipelines).find(|sp| &sp.id == sp_id);
        if let Some(sp) = sub {
            total.insert(test.clone(), sp.total_requests);
        }
    }
    Side { routed, total }
}

fn reduction(seq: f64, par: f64) -> Option<f64> {
    (seq > 0.0).then(|| (1.0 - par / seq) * 100.0)
}

/// Runs both pipelines once per seed and aggregates medians.
pub fn compare(
    seq: &PipelineSpec,
    par: &PipelineSpec,
    cfg: &ScenarioConfig,
    seeds: &[u64],
    engine: &EngineConfig,
) -> Result<ComparisonReport, ReportError> {
    if seeds.is_empty() {
        return Err(ReportError::NoRuns);
    }
    let compared = compared_tests(seq, par);
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    let runs: Vec<SeedRuns> = thread::scope(|scope| {
        let chunks: Vec<Vec<u64>> =
            (0..workers).map(|w| seeds.iter().copied().skip(w).step_by(workers).collect()).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|seed| {
                            let cfg = ScenarioConfig { seed, ..cfg.clone() };
                            (seed, run_scenario(seq, &cfg, engine), run_scenario(par, &cfg, engine))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<_> = handles.into_iter().flat_map(|h| h.join().expect("compare worker panicked")).collect();
        all.sort_by_key(|(seed, _, _)| seeds.iter().position(|s| s == seed));
        all
    });

    let mut failures = Vec::new();
    let mut seq_sides = Vec::new();
    let mut par_sides = Vec::new();
    let mut fractions: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut overheads = Vec::new();
    let mut deploy_ms = Vec::new();
    for (seed, s, p) in &runs {
        match (s, p) {
            (Ok(s), Ok(p)) => {
                seq_sides.push(sequential_side(s, &compared));
                par_sides.push(parallel_side(p, &compared));
                for split in &p.outcome.splits {
                    for (id, f) in split.fractions() {
                        fractions.entry(id).or_default().push(f);
                    }
                    let unrouted = split.unrouted as f64 / split.requests().max(1) as f64;
                    fractions.entry(UNROUTED.into()).or_default().push(unrouted);
                }
                overheads.extend(p.overhead);
                deploy_ms.push(p.simulated_deploy_ms as f64);
            }
            (s, p) => {
                for (kind, r) in [("sequential", s), ("parallel", p)] {
                    if let Err(e) = r {
                        failures.push(format!("seed {seed}, {kind}: {e}"));
                    }
                }
            }
        }
    }

    let med = |sides: &[Side], pick: fn(&Side) -> &BTreeMap<String, u64>, test: &str| {
        let mut v: Vec<f64> = sides.iter().filter_map(|s| pick(s).get(test)).map(|x| *x as f64).collect();
        median(&mut v).unwrap_or(0.0)
    };
    let mut rows = Vec::new();
    for (kind, sides) in [(PipelineKind::Sequential, &seq_sides), (PipelineKind::Parallel, &par_sides)] {
        for (test, sp) in &compared {
            let name = match kind {
                PipelineKind::Sequential => test.clone(),
                PipelineKind::Parallel => format!("{sp}/{test}"),
            };
            rows.push(TestRow {
                pipeline: kind,
                test: name,
                requests: med(sides, |s| &s.routed, test),
                total_requests: med(sides, |s| &s.total, test),
            });
        }
    }
    let of = |kind| rows.iter().filter(move |r: &&TestRow| r.pipeline == kind);
    let sequential_total: f64 = of(PipelineKind::Sequential).map(|r| r.total_requests).sum();
    let parallel_total = of(PipelineKind::Parallel).map(|r| r.total_requests).fold(0.0, f64::max);
    let seq_routed: f64 = of(PipelineKind::Sequential).map(|r| r.requests).sum();
    let par_routed = of(PipelineKind::Parallel).map(|r| r.requests).fold(0.0, f64::max);
    let complete = failures.is_empty();

    let mut per_run: Vec<f64> = seq_sides
        .iter()
        .zip(&par_sides)
        .filter_map(|(s, p)| {
            let seq: u64 = s.total.values().sum();
            let par = p.total.values().copied().max().unwrap_or(0);
            reduction(seq as f64, par as f64)
        })
        .collect();

    let overhead = (!overheads.is_empty()).then(|| {
        let pick = |f: fn(&Overhead) -> f64| median(&mut overheads.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
        Overhead {
            train_ms: pick(|o| o.train_ms),
            deploy_ms: pick(|o| o.deploy_ms),
            predict_ms: pick(|o| o.predict_ms),
        }
    });

    Ok(ComparisonReport {
        runs: seeds.len(),
        seeds: seeds.to_vec(),
        batch_size: engine.batch_size,
        rows,
        sequential_total,
        parallel_total,
        reduction_pct: reduction(sequential_total, parallel_total).filter(|_| complete),
        reduction_pct_routed: reduction(seq_routed, par_routed).filter(|_| complete),
        median_run_reduction_pct: median(&mut per_run).filter(|_| complete),
        split_fractions: fractions.into_iter().map(|(k, mut v)| (k, median(&mut v).unwrap_or(0.0))).collect(),
        simulated_deploy_ms: median(&mut deploy_ms).unwrap_or(0.0),
        failures,
        overhead,
    })
}

fn thousands(x: f64) -> String {
    let n = x.round() as i64;
    let digits = n.abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        out.insert(0, '-');
    }
    out
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.2}%"))
}

impl ComparisonReport {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn row(&self, pipeline: PipelineKind, test_suffix: &str) -> Option<&TestRow> {
        self.rows.iter().find(|r| r.pipeline == pipeline && r.test.ends_with(test_suffix))
    }

    /// Table of medians plus the published full-scale row for reference.
    pub fn render_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.test.len()).max().unwrap_or(4).max(12);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "Requests to complete the compared tests (median of {} runs, batch {})",
            self.runs, self.batch_size
        );
        let _ =
            writeln!(out, "{:<11} {:<width$} {:>16} {:>15}", "pipeline", "test", "until p<=alpha", "total requests");
        for kind in [PipelineKind::Sequential, PipelineKind::Parallel] {
            let label = match kind {
                PipelineKind::Sequential => "sequential",
                PipelineKind::Parallel => "parallel",
            };
            for r in self.rows.iter().filter(|r| r.pipeline == kind) {
                let _ = writeln!(
                    out,
                    "{label:<11} {:<width$} {:>16} {:>15}",
                    r.test,
                    thousands(r.requests),
                    thousands(r.total_requests)
                );
            }
            let (title, total) = match kind {
                PipelineKind::Sequential => ("Total (SUM)", self.sequential_total),
                PipelineKind::Parallel => ("Total (MAX)", self.parallel_total),
            };
            let _ = writeln!(out, "{:<11} {title:<width$} {:>16} {:>15}", "", "", thousands(total));
        }
        let _ = writeln!(
            out,
            "reduction: {} (routed requests only: {}; median per run: {})",
            pct(self.reduction_pct),
            pct(self.reduction_pct_routed),
            pct(self.median_run_reduction_pct)
        );
        let fractions: Vec<String> =
            self.split_fractions.iter().map(|(k, v)| format!("{k} {:.2}%", v * 100.0)).collect();
        let _ = writeln!(
            out,
            "split fractions: {}",
            if fractions.is_empty() { "none".into() } else { fractions.join(", ") }
        );
        let _ = writeln!(out, "simulated deployment time: {} ms", thousands(self.simulated_deploy_ms));
        if self.is_partial() {
            let _ = writeln!(out, "PARTIAL: {} failed run(s)", self.failures.len());
            for f in &self.failures {
                let _ = writeln!(out, "  {f}");
            }
        }
        out.push_str(
            "reference (published full-scale run): sequential 112,000 + 27,000 = 139,000; \
             parallel 1,000 / 26,000, total 27,128; reduction 80.48%; split 4.16% / 95.84%\n",
        );
        out
    }

    /// Timing lines; vary between runs so they are printed, not stored.
    pub fn render_overhead(&self) -> String {
        match &self.overhead {
            Some(o) => format!(
                "overhead (median): train {:.1} ms, deploy {:.0} ms (simulated), predict {:.4} ms\n\
                 reference (published): train 324 ms, deploy 6433 ms, predict 0.3 ms\n",
                o.train_ms, o.deploy_ms, o.predict_ms
            ),
            None => "overhead: no population split in the compared pipelines\n".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_empty() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn published_reduction() {
        let r = reduction(139_000.0, 27_128.0).unwrap();
        assert!((r - 80.48).abs() < 0.005, "{r}");
        assert_eq!(reduction(0.0, 5.0), None);
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(27128.0), "27,128");
        assert_eq!(thousands(999.0), "999");
        assert_eq!(thousands(1_000_000.0), "1,000,000");
    }
}
