//! Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if
//! any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use abpipe::orchestrator::{EngineConfig, ExecutionMode, Orchestrator};
use abpipe::pipeline::{validate, BlueprintBundle, Direction, PipelineSpec};
use abpipe::report::run_scenario;
use abpipe::sim::ScenarioConfig;
use abpipe::stats::{special::student_t_sf, two_proportion_test, welch_t_test, MetricAccumulator};
use common::{lifecycle_violations, normalize, precompute, reference_trace, scripted_system, valid_specs, BATCH};
use serde_json::Value;

const RUNS: usize = 15;
const REDUCTION_FLOOR_PCT: f64 = 50.0;
const COMPARE_BUDGET: Duration = Duration::from_secs(300);
const RECOMMENDATION_BAND: (f64, f64) = (0.03, 0.06);
const REVIEW_BAND: (f64, f64) = (0.93, 0.97);
const ORACLE_TOLERANCE: f64 = 1e-9;
const PREDICT_MS_MAX: f64 = 1.0;
const TRAIN_MS_MAX: u64 = 5000;
const DESK_ROWS: u64 = 20_000;
const CONFORMANCE_SPECS: usize = 200;
const CAP: u64 = 150_000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn abpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abpipe")).args(args).env_remove("ABPIPE_BATCH_SIZE").output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn load(name: &str) -> PipelineSpec {
    BlueprintBundle::from_dir(repo(name)).expect("bundle reads").parse().expect("bundle parses")
}

/// Shared by criteria 1, 2 and 6: the full 15-seed comparison.
struct Comparison {
    report: Value,
    stdout: String,
    elapsed: Duration,
    ok: bool,
}

fn run_compare(out: &Path) -> Comparison {
    let start = Instant::now();
    let o = abpipe(&[
        "compare",
        path(&repo("scenarios/sequential")),
        path(&repo("scenarios/parallel")),
        "--scenario",
        path(&repo("scenarios/default.json")),
        "--runs",
        &RUNS.to_string(),
        "--seeds",
        "1",
        "--out",
        path(out),
    ]);
    let elapsed = start.elapsed();
    let report = fs::read_to_string(out.join("comparison.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or(Value::Null);
    Comparison { report, stdout: String::from_utf8_lossy(&o.stdout).into_owned(), elapsed, ok: o.status.success() }
}

fn row<'a>(report: &'a Value, pipeline: &str, suffix: &str) -> Option<&'a Value> {
    report["rows"]
        .as_array()?
        .iter()
        .find(|r| r["pipeline"] == pipeline && r["test"].as_str().is_some_and(|t| t.ends_with(suffix)))
}

fn criterion_1(c: &Comparison) -> Verdict {
    let caps_ok = ["scenarios/sequential", "scenarios/parallel"]
        .iter()
        .all(|b| load(b).tests.values().all(|t| t.exp_length == CAP));
    let reduction = c.report["reduction_pct"].as_f64();
    let rec = "Recommendation-upgrade-experiment";
    let seq = row(&c.report, "sequential", rec).and_then(|r| r["requests"].as_f64());
    let par = row(&c.report, "parallel", rec).and_then(|r| r["requests"].as_f64());
    let earlier = matches!((seq, par), (Some(s), Some(p)) if p < s);
    let pass =
        c.ok && caps_ok && reduction.is_some_and(|r| r >= REDUCTION_FLOOR_PCT) && earlier && c.elapsed < COMPARE_BUDGET;
    verdict(
        pass,
        format!(
            "median reduction {} (need >= {REDUCTION_FLOOR_PCT}%), sequential total {}, parallel total {}; \
             recommendation requests sequential {} vs parallel {} (earlier: {earlier}); caps {CAP}: {caps_ok}; {:.1}s",
            reduction.map_or("n/a".into(), |r| format!("{r:.2}%")),
            c.report["sequential_total"],
            c.report["parallel_total"],
            seq.unwrap_or(f64::NAN),
            par.unwrap_or(f64::NAN),
            c.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(c: &Comparison) -> Verdict {
    let f = |k: &str| c.report["split_fractions"][k].as_f64().unwrap_or(f64::NAN);
    let (rec, rev) = (f("Recommendation-pipeline"), f("Review-pipeline"));
    let inside = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
    verdict(
        c.ok && inside(rec, RECOMMENDATION_BAND) && inside(rev, REVIEW_BAND),
        format!("recommendation {:.2}% in [3, 6], review {:.2}% in [93, 97]", rec * 100.0, rev * 100.0),
    )
}

fn direction(s: &str) -> Direction {
    match s {
        "B_greater" => Direction::BGreater,
        "B_less" => Direction::BLess,
        _ => Direction::BNotEqual,
    }
}

fn criterion_3() -> Verdict {
    let text = fs::read_to_string(repo("crates/core/tests/fixtures/welch_oracle.csv")).expect("oracle table");
    let mut cases = 0;
    let mut worst: f64 = 0.0;
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let num = |i: usize| c[i].parse::<f64>().expect("numeric oracle field");
        let acc = |n: f64, mean: f64, var: f64| MetricAccumulator::from_moments(n as u64, mean, var * (n - 1.0));
        let a = acc(num(0), num(1), num(2));
        let b = acc(num(3), num(4), num(5));
        let r = welch_t_test(&a, &b, direction(c[6])).expect("oracle cases are valid");
        worst = worst.max((r.p_value - num(9)).abs());
        cases += 1;
    }
    let oracle_ok = cases == 100 && worst <= ORACLE_TOLERANCE;

    // Equal n and variance: Welch equals Student with df = 2(n - 1).
    let mut student_ok = true;
    for (n, var, ma, mb) in [(10u64, 1.0, 0.0, 0.5), (50, 2.5, 1.0, 1.8), (333, 0.2, -0.3, -0.25)] {
        let a = MetricAccumulator::from_moments(n, ma, var * (n - 1) as f64);
        let b = MetricAccumulator::from_moments(n, mb, var * (n - 1) as f64);
        let r = welch_t_test(&a, &b, Direction::BGreater).unwrap();
        let t = (mb - ma) / (2.0 * var / n as f64).sqrt();
        let df = 2.0 * (n - 1) as f64;
        student_ok &= (r.statistic - t).abs() <= 1e-9 && (r.df - df).abs() <= 1e-9;
        student_ok &= (r.p_value - student_t_sf(t, df)).abs() <= 1e-12;
    }

    let binary =
        |ones: u64| MetricAccumulator::from_samples((0..10_000).map(|i| if i < ones { 1.0 } else { 0.0 })).unwrap();
    let z = two_proportion_test(&binary(1_470), &binary(1_617), Direction::BNotEqual).unwrap();
    let prop_ok = z.p_value < 0.05;
    verdict(
        oracle_ok && student_ok && prop_ok,
        format!(
            "{cases} Welch cases, max |dp| = {worst:.1e}; Student degeneracy {student_ok}; \
             two-proportion z = {:.4}, p = {:.5}",
            z.statistic, z.p_value
        ),
    )
}

fn criterion_4() -> Verdict {
    let corpus = valid_specs(2024, CONFORMANCE_SPECS);
    let mut mismatches = Vec::new();
    for (spec, scripts, classes) in &corpus {
        let system = scripted_system(scripts, *classes);
        let config = EngineConfig { batch_size: BATCH, mode: ExecutionMode::Serialized, request_limit: None };
        match Orchestrator::new(&system, config).execute_pipeline(spec) {
            Ok(out) if normalize(&out.trace) == reference_trace(spec, &precompute(spec, scripts)) => {}
            Ok(_) => mismatches.push(spec.name.clone()),
            Err(e) => mismatches.push(format!("{}: {e}", spec.name)),
        }
    }
    let splits = corpus.iter().filter(|(s, _, _)| !s.splits.is_empty()).count();
    verdict(
        corpus.len() == CONFORMANCE_SPECS && mismatches.is_empty(),
        format!("{} specs ({splits} with a split), {} mismatches {:?}", corpus.len(), mismatches.len(), mismatches),
    )
}

fn criterion_5() -> Verdict {
    let spec = load("scenarios/parallel");
    let mut problems = Vec::new();
    for seed in 1..=RUNS as u64 {
        let cfg = ScenarioConfig { seed, ..ScenarioConfig::default() };
        let run = |mode| run_scenario(&spec, &cfg, &EngineConfig { mode, ..EngineConfig::default() });
        let (serial, concurrent) = match (run(ExecutionMode::Serialized), run(ExecutionMode::Concurrent)) {
            (Ok(s), Ok(c)) => (s, c),
            (s, c) => {
                problems.push(format!("seed {seed}: run failed ({:?} / {:?})", s.err(), c.err()));
                continue;
            }
        };
        for out in [&serial.outcome, &concurrent.outcome] {
            problems.extend(lifecycle_violations(&spec, &out.trace).into_iter().map(|v| format!("seed {seed}: {v}")));
            for split in &out.splits {
                for (i, a) in split.sub_pipelines.iter().enumerate() {
                    for b in &split.sub_pipelines[i + 1..] {
                        if !a.users.is_disjoint(&b.users) {
                            problems.push(format!("seed {seed}: {} and {} share users", a.id, b.id));
                        }
                    }
                }
            }
        }
        let subs = |o: &abpipe::orchestrator::RunOutcome| {
            o.results
                .iter()
                .filter(|(k, _)| k.contains('/'))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect::<BTreeMap<_, _>>()
        };
        if subs(&serial.outcome) != subs(&concurrent.outcome) {
            problems.push(format!("seed {seed}: serialized and concurrent sub-pipeline results differ"));
        }
    }
    // The random corpus exercises 2- and 3-way splits too.
    for (spec, scripts, classes) in valid_specs(99, 50) {
        let system = scripted_system(&scripts, classes);
        let config = EngineConfig { batch_size: BATCH, mode: ExecutionMode::Concurrent, request_limit: None };
        match Orchestrator::new(&system, config).execute_pipeline(&spec) {
            Ok(out) => problems.extend(lifecycle_violations(&spec, &out.trace)),
            Err(e) => problems.push(format!("{}: {e}", spec.name)),
        }
    }
    verdict(problems.is_empty(), format!("{RUNS} seeds x 2 modes plus 50 random specs; problems: {problems:?}"))
}

fn parse_after(text: &str, key: &str) -> Option<f64> {
    let rest = &text[text.find(key)? + key.len()..];
    rest.trim_start().split(|c: char| !(c.is_ascii_digit() || c == '.')).next()?.parse().ok()
}

fn criterion_6(c: &Comparison, scratch: &Path) -> Verdict {
    let overhead = c.stdout.lines().find(|l| l.starts_with("overhead (median):")).unwrap_or("");
    let train = parse_after(overhead, "train");
    let deploy = parse_after(overhead, "deploy");
    let predict = parse_after(overhead, "predict");
    let triplet = train.is_some() && deploy.is_some() && predict.is_some();

    let data = scratch.join("desk.csv");
    let model = scratch.join("model.json");
    let gen = abpipe(&[
        "gen-data",
        "--scenario",
        path(&repo("scenarios/default.json")),
        "--n",
        &DESK_ROWS.to_string(),
        "--out",
        path(&data),
    ]);
    let train_out = abpipe(&["train", path(&data), "--out", path(&model)]);
    let text = String::from_utf8_lossy(&train_out.stdout);
    let train_ms =
        text.lines().find_map(|l| l.strip_prefix("training_ms: ")).and_then(|v| v.trim().parse::<u64>().ok());
    let weights = fs::read_to_string(&model)
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|m| m["weights"].as_array().map(Vec::len));
    let pass = c.ok
        && triplet
        && predict.is_some_and(|p| p <= PREDICT_MS_MAX)
        && gen.status.success()
        && train_out.status.success()
        && train_ms.is_some_and(|ms| ms <= TRAIN_MS_MAX)
        && weights == Some(23);
    verdict(
        pass,
        format!(
            "compare overhead train {:?} ms, deploy {:?} ms, predict {:?} ms; desk training on {DESK_ROWS} rows {:?} ms, {:?} weights",
            train, deploy, predict, train_ms, weights
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let Ok(entries) = fs::read_dir(dir) else { return };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if let Ok(bytes) = fs::read(&p) {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), bytes);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn criterion_7(scratch: &Path) -> Verdict {
    let scenario = repo("scenarios/default.json");
    let seq = repo("scenarios/sequential");
    let par = repo("scenarios/parallel");
    let mut differing = Vec::new();
    let mut files = 0;
    type Cmd = Box<dyn Fn(&Path) -> Vec<String>>;
    let s = |p: &Path| path(p).to_string();
    let (sc, sq, pa) = (s(&scenario), s(&seq), s(&par));
    let commands: Vec<(&str, Cmd)> = vec![
        (
            "run sequential",
            Box::new({
                let (sq, sc) = (sq.clone(), sc.clone());
                move |o| {
                    vec![
                        "run".into(),
                        sq.clone(),
                        "--scenario".into(),
                        sc.clone(),
                        "--seed".into(),
                        "3".into(),
                        "--out".into(),
                        s(o),
                    ]
                }
            }),
        ),
        (
            "run parallel",
            Box::new({
                let (pa, sc) = (pa.clone(), sc.clone());
                move |o| {
                    vec![
                        "run".into(),
                        pa.clone(),
                        "--scenario".into(),
                        sc.clone(),
                        "--seed".into(),
                        "3".into(),
                        "--out".into(),
                        s(o),
                    ]
                }
            }),
        ),
        (
            "compare",
            Box::new({
                let (sq, pa, sc) = (sq.clone(), pa.clone(), sc.clone());
                move |o| {
                    vec![
                        "compare".into(),
                        sq.clone(),
                        pa.clone(),
                        "--scenario".into(),
                        sc.clone(),
                        "--runs".into(),
                        "3".into(),
                        "--seeds".into(),
                        "4,8,15".into(),
                        "--out".into(),
                        s(o),
                    ]
                }
            }),
        ),
        (
            "gen-data",
            Box::new({
                let sc = sc.clone();
                move |o| {
                    vec![
                        "gen-data".into(),
                        "--scenario".into(),
                        sc.clone(),
                        "--n".into(),
                        "5000".into(),
                        "--out".into(),
                        s(&o.join("data.csv")),
                    ]
                }
            }),
        ),
    ];
    for (name, cmd) in &commands {
        let mut snaps = Vec::new();
        for attempt in 0..2 {
            let out = scratch.join(format!("{}-{attempt}", name.replace(' ', "-")));
            fs::create_dir_all(&out).unwrap();
            let args = cmd(&out);
            let o = abpipe(&args.iter().map(String::as_str).collect::<Vec<_>>());
            if !o.status.success() {
                differing.push(format!("{name}: exit {:?}", o.status.code()));
            }
            snaps.push(snapshot(&out));
        }
        files += snaps[0].len();
        if snaps[0].is_empty() || snaps[0] != snaps[1] {
            differing.push(name.to_string());
        }
    }
    // Training output: same data, same seed, same model file.
    let data = scratch.join("gen-data-0").join("data.csv");
    let models: Vec<Vec<u8>> = (0..2)
        .map(|i| {
            let m = scratch.join(format!("model-{i}.json"));
            abpipe(&[
                "train",
                path(&data),
                "--epochs",
                "3",
                "--eta0",
                "0.05",
                "--l2",
                "0.001",
                "--seed",
                "11",
                "--out",
                path(&m),
            ]);
            fs::read(&m).unwrap_or_default()
        })
        .collect();
    files += 1;
    if models[0].is_empty() || models[0] != models[1] {
        differing.push("train".into());
    }
    verdict(
        differing.is_empty(),
        format!("{files} output files compared across repeated runs; differing: {differing:?}"),
    )
}

fn criterion_8() -> Verdict {
    let fixtures = [
        ("dangling-reference", "dangling reference"),
        ("non-exclusive-split-conditions", "non-exclusive split conditions"),
        ("interfering-sub-pipelines", "interfering sub-pipelines"),
        ("unreachable-end", "unreachable End"),
        ("bad-assignment-fractions", "bad assignment fractions"),
    ];
    let mut problems = Vec::new();
    for (dir, kind) in fixtures {
        let o = abpipe(&["validate", path(&repo(&format!("crates/cli/tests/fixtures/invalid/{dir}")))]);
        let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
        if o.status.code() != Some(1) || !text.contains(kind) {
            problems.push(format!("{dir}: exit {:?}, output {text:?}", o.status.code()));
        }
    }
    for shipped in ["scenarios/sequential", "scenarios/parallel"] {
        let o = abpipe(&["validate", path(&repo(shipped))]);
        let report = validate(&load(shipped));
        if !o.status.success() || !report.is_ok() {
            problems.push(format!("{shipped}: {report}"));
        }
    }
    verdict(problems.is_empty(), format!("5 fixtures, 2 shipped bundles; problems: {problems:?}"))
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let comparison = run_compare(&scratch.path().join("compare"));
    let verdicts = [
        ("request reduction", criterion_1(&comparison)),
        ("split-fraction fidelity", criterion_2(&comparison)),
        ("statistics oracle suite", criterion_3()),
        ("algorithm conformance", criterion_4()),
        ("split semantics", criterion_5()),
        ("overhead report", criterion_6(&comparison, scratch.path())),
        ("determinism", criterion_7(scratch.path())),
        ("validation suite", criterion_8()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in verdicts.iter().enumerate() {
        println!("criterion {}: {} {name}: {}", i + 1, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
