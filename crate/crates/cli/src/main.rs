use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use abpipe::classifier::{read_training_csv, train_timed, write_training_csv, Hyperparams};
use abpipe::orchestrator::{write_trace_jsonl, EngineConfig, ExecutionError};
use abpipe::pipeline::{validate, BlueprintBundle, PipelineSpec};
use abpipe::report::{compare, run_scenario, ReportError, RunSummary, ScenarioRun};
use abpipe::sim::{dataset_from, generate_population, ScenarioConfig, SimError};
use abpipe::stats::write_pvalue_csv;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "abpipe", version, about = "Run pipelines of A/B tests against a simulated web-store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a blueprint bundle.
    Validate { dir: PathBuf },
    /// Execute one pipeline and write its trace, p-value CSVs and summary.
    Run {
        dir: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sequential and a population-split pipeline over several seeds.
    Compare {
        seq_dir: PathBuf,
        par_dir: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        runs: usize,
        /// Comma-separated seeds, or a single base seed expanded to `runs` consecutive seeds.
        #[arg(long, default_value = "1")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the population split model from a CSV dataset.
    Train {
        csv: PathBuf,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        eta0: Option<f64>,
        #[arg(long)]
        l2: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic propensity dataset.
    GenData {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        n: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    /// Exit 1: invalid input or a failed pipeline.
    Domain(String),
    /// Exit 2: I/O or usage.
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Domain(m) | Failure::Io(m) => m,
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn parse_spec(dir: &Path) -> Result<PipelineSpec, Failure> {
    let bundle = BlueprintBundle::from_dir(dir).map_err(|e| Failure::Io(e.to_string()))?;
    bundle.parse().map_err(|e| if e.is_io() { Failure::Io(e.to_string()) } else { Failure::Domain(e.to_string()) })
}

fn load_spec(dir: &Path) -> Result<PipelineSpec, Failure> {
    let spec = parse_spec(dir)?;
    let report = validate(&spec);
    if !report.is_ok() {
        return Err(Failure::Domain(format!("{}: invalid pipeline\n{report}", dir.display()).trim_end().to_string()));
    }
    Ok(spec)
}

fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig, Failure> {
    match path {
        None => Ok(ScenarioConfig::default()),
        Some(p) => ScenarioConfig::load(p).map_err(|e| match e {
            SimError::Io { .. } => Failure::Io(e.to_string()),
            other => Failure::Domain(other.to_string()),
        }),
    }
}

fn engine() -> Result<EngineConfig, Failure> {
    EngineConfig::from_env().map_err(|e| Failure::Io(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(io_failure(dir))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(io_failure(path))
}

fn write_trace(path: &Path, trace: &[abpipe::orchestrator::TraceEntry]) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(io_failure(path))?;
    let mut w = BufWriter::new(file);
    write_trace_jsonl(&mut w, trace).map_err(io_failure(path))?;
    w.flush().map_err(io_failure(path))
}

fn pvalue_file_name(key: &str) -> String {
    format!("{}.csv", key.replace('/', "__"))
}

fn write_run(out: &Path, run: &ScenarioRun) -> Result<(), Failure> {
    write_trace(&out.join("trace.jsonl"), &run.outcome.trace)?;
    let pvalues = out.join("pvalues");
    create_dir(&pvalues)?;
    for (key, history) in &run.outcome.histories {
        let path = pvalues.join(pvalue_file_name(key));
        let file = fs::File::create(&path).map_err(io_failure(&path))?;
        write_pvalue_csv(BufWriter::new(file), history).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    }
    write_file(&out.join("summary.json"), &RunSummary::from_run(run).to_json())
}

fn cmd_validate(dir: &Path) -> Result<String, Failure> {
    let spec = parse_spec(dir)?;
    let report = validate(&spec);
    if report.is_ok() {
        return Ok(format!("ok: {} ({} tests, {} splits)\n", spec.name, spec.tests.len(), spec.splits.len()));
    }
    print!("{report}");
    Err(Failure::Domain(format!("{}: {} violation(s)", dir.display(), report.violations.len())))
}

fn cmd_run(dir: &Path, scenario: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), Failure> {
    let spec = load_spec(dir)?;
    let mut cfg = load_scenario(scenario)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let engine = engine()?;
    create_dir(out)?;
    let run = match run_scenario(&spec, &cfg, &engine) {
        Ok(run) => run,
        Err(ReportError::Execution(ExecutionError { source, trace })) => {
            write_trace(&out.join("trace.jsonl"), &trace)?;
            return Err(Failure::Domain(format!("pipeline failed: {source} (partial trace written)")));
        }
        Err(e) => return Err(Failure::Domain(e.to_string())),
    };
    write_run(out, &run)?;
    for t in &run.outcome.tests {
        println!(
            "{}: {} requests ({} total), p = {:.6}, {}",
            t.key,
            t.requests,
            t.total_requests,
            t.p_value,
            if t.significant { "significant" } else { "not significant" }
        );
    }
    for s in &run.outcome.splits {
        for (id, f) in s.fractions() {
            println!("{}: {id} received {:.2}% of requests", s.split, f * 100.0);
        }
    }
    if let Some(o) = run.overhead {
        println!(
            "overhead: train {:.1} ms, deploy {:.0} ms (simulated), predict {:.4} ms",
            o.train_ms, o.deploy_ms, o.predict_ms
        );
    }
    println!("total requests: {}", run.outcome.total_requests);
    Ok(())
}

fn parse_seeds(raw: &str, runs: usize) -> Result<Vec<u64>, Failure> {
    let parts: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let parsed: Result<Vec<u64>, _> = parts.iter().map(|s| s.parse::<u64>()).collect();
    let values = parsed.map_err(|e| Failure::Io(format!("--seeds: {e}")))?;
    if runs == 0 {
        return Err(Failure::Io("--runs must be at least 1".into()));
    }
    match values.as_slice() {
        [] => Err(Failure::Io("--seeds: no seeds given".into())),
        [base] => Ok((0..runs as u64).map(|i| base + i).collect()),
        list if list.len() == runs => Ok(list.to_vec()),
        list => Err(Failure::Io(format!("--seeds lists {} seeds but --runs is {runs}", list.len()))),
    }
}

fn cmd_compare(
    seq_dir: &Path,
    par_dir: &Path,
    scenario: Option<&Path>,
    runs: usize,
    seeds: &str,
    out: &Path,
) -> Result<(), Failure> {
    let seeds = parse_seeds(seeds, runs)?;
    let seq = load_spec(seq_dir)?;
    let par = load_spec(par_dir)?;
    let cfg = load_scenario(scenario)?;
    let engine = engine()?;
    create_dir(out)?;
    let report = compare(&seq, &par, &cfg, &seeds, &engine).map_err(|e| Failure::Domain(e.to_string()))?;
    let table = report.render_table();
    write_file(&out.join("comparison.json"), &report.to_json())?;
    write_file(&out.join("comparison.txt"), &table)?;
    print!("{table}");
    print!("{}", report.render_overhead());
    if report.is_partial() {
        return Err(Failure::Domain(format!("{} run(s) failed; report is partial", report.failures.len())));
    }
    Ok(())
}

fn cmd_train(csv: &Path, hp: Hyperparams, out: &Path) -> Result<(), Failure> {
    let file = fs::File::open(csv).map_err(io_failure(csv))?;
    let data =
        read_training_csv(io::BufReader::new(file)).map_err(|e| Failure::Domain(format!("{}: {e}", csv.display())))?;
    let (model, elapsed) = train_timed(&data, &hp).map_err(|e| Failure::Domain(e.to_string()))?;
    write_file(out, &model.to_json())?;
    let ms = (elapsed.as_secs_f64() * 1e3).ceil().max(1.0) as u64;
    println!("trained on {} rows, {} features", data.rows.len(), model.features);
    println!("training_ms: {ms}");
    Ok(())
}

fn cmd_gen_data(scenario: Option<&Path>, n: u64, out: &Path) -> Result<(), Failure> {
    if n < 2 {
        return Err(Failure::Io("--n must be at least 2".into()));
    }
    let cfg = load_scenario(scenario)?;
    let users: Vec<_> = generate_population(&cfg, n).collect();
    let data = dataset_from(&users, cfg.features);
    let file = fs::File::create(out).map_err(io_failure(out))?;
    let mut w = BufWriter::new(file);
    write_training_csv(&mut w, &data).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    w.flush().map_err(io_failure(out))?;
    let positives = data.rows.iter().filter(|(_, y)| *y == 1).count();
    println!("wrote {n} rows ({positives} positive) to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { dir } => cmd_validate(dir).map(|text| print!("{text}")),
        Command::Run { dir, scenario, seed, out } => cmd_run(dir, scenario.as_deref(), *seed, out),
        Command::Compare { seq_dir, par_dir, scenario, runs, seeds, out } => {
            cmd_compare(seq_dir, par_dir, scenario.as_deref(), *runs, seeds, out)
        }
        Command::Train { csv, epochs, eta0, l2, seed, out } => {
            let d = Hyperparams::default();
            let hp = Hyperparams {
                epochs: epochs.unwrap_or(d.epochs),
                eta0: eta0.unwrap_or(d.eta0),
                l2: l2.unwrap_or(d.l2),
                seed: seed.unwrap_or(d.seed),
                ..d
            };
            cmd_train(csv, hp, out)
        }
        Command::GenData { scenario, n, out } => cmd_gen_data(scenario.as_deref(), *n, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
