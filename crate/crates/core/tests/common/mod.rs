//! Shared by the conformance tests and the acceptance harness: a seeded
//! generator of small pipelines, scripted outcomes for them, and a reference
//! interpreter that walks the execution algorithms directly.
#![allow(dead_code)]

use std::collections::BTreeMap;

use abpipe::orchestrator::scripted::{binary_pair, ScriptedSystem};
use abpipe::orchestrator::{Event, TraceEntry, VariantPair};
use abpipe::pipeline::{
    validate, AbTestSpec, Assignment, ClassCondition, CmpOp, Condition, Direction, Hypothesis, PipelineSpec,
    PopulationSplitSpec, SplitComponent, StatTestKind, SubPipeline, Target, TransitionRule, Variant,
};
use abpipe::sim::{stream_id, Draws};
use abpipe::stats::{evaluate_hypothesis, StatResult};

pub const BATCH: u64 = 1000;

/// Sequential draws on top of the counter-based generator.
pub struct Gen {
    draws: Draws,
    stream: u64,
    next: u64,
}

impl Gen {
    pub fn new(seed: u64, label: &str) -> Self {
        Gen { draws: Draws::new(seed), stream: stream_id(&["test-gen", label]), next: 0 }
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next += 1;
        self.draws.below(self.stream, self.next, n)
    }

    pub fn range(&mut self, lo: u64, hi_inclusive: u64) -> u64 {
        lo + self.below(hi_inclusive - lo + 1)
    }

    pub fn coin(&mut self) -> bool {
        self.below(2) == 1
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }
}

/// Complementary condition pairs; using one or both never overlaps.
const CONDITION_PAIRS: [(&str, &str); 4] = [
    ("p_value <= 0.05", "p_value > 0.05"),
    ("effect > 0", "effect <= 0"),
    ("p_value <= 0.05 and effect > 0", "p_value > 0.05 or effect <= 0"),
    ("mean_b >= 0.3", "mean_b < 0.3"),
];

pub fn test_spec(name: &str, service: &str, exp_length: u64, direction: Direction) -> AbTestSpec {
    AbTestSpec {
        name: name.into(),
        exp_length,
        ab_assignment: Assignment::default(),
        hypothesis: Hypothesis { metric: "m".into(), direction, alpha: 0.05 },
        ab_metrics: vec!["m".into()],
        stat_test: StatTestKind::WelchT,
        variant_a: Variant { service_name: service.into(), image_name: format!("{service}:a") },
        variant_b: Variant { service_name: service.into(), image_name: format!("{service}:b") },
    }
}

fn rules_for(g: &mut Gen, test: &str, targets: &[Target], counter: &mut usize) -> Vec<TransitionRule> {
    let (yes, no) = *g.pick(&CONDITION_PAIRS);
    let chosen: Vec<&str> = match g.below(3) {
        0 => vec![yes],
        1 => vec![no],
        _ => vec![yes, no],
    };
    chosen
        .into_iter()
        .map(|c| {
            *counter += 1;
            TransitionRule {
                name: format!("r{counter}"),
                assoc: test.into(),
                condition: Condition::parse(c).expect("pool conditions parse"),
                next: g.pick(targets).clone(),
            }
        })
        .collect()
}

/// A spec with 1 to 4 tests and at most one split, acyclic by construction.
pub fn random_spec(g: &mut Gen, index: usize) -> PipelineSpec {
    let n = g.range(1, 4) as usize;
    let names: Vec<String> = (0..n).map(|i| format!("T{i}")).collect();
    let directions = [Direction::BGreater, Direction::BLess, Direction::BNotEqual];
    let lengths = [1000, 2000, 2500, 3000, 4000];
    let mut tests = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        let t = test_spec(name, &format!("svc-{i}"), *g.pick(&lengths), *g.pick(&directions));
        tests.insert(name.clone(), t);
    }
    let mut counter = 0;
    let with_split = n >= 2 && g.below(3) != 0;
    if !with_split {
        let mut rules = Vec::new();
        for (i, name) in names.iter().enumerate() {
            let mut targets: Vec<Target> = names[i + 1..].iter().map(|s| Target::Element(s.clone())).collect();
            targets.push(Target::End);
            rules.extend(rules_for(g, name, &targets, &mut counter));
        }
        return PipelineSpec {
            name: format!("P{index}"),
            tests,
            root_tests: names.clone(),
            rules,
            splits: Vec::new(),
            start: Target::Element(names[0].clone()),
        };
    }

    let k = g.range(2, n.min(3) as u64) as usize;
    let pre = g.range(0, (n - k) as u64) as usize;
    let sub_total = g.range(k as u64, (n - pre) as u64) as usize;
    let post: Vec<String> = names[pre + sub_total..].to_vec();
    let split_name = "S".to_string();

    // Sizes of the k groups: each at least one test.
    let mut sizes = vec![1usize; k];
    for _ in 0..sub_total - k {
        let i = g.below(k as u64) as usize;
        sizes[i] += 1;
    }
    let mut sub_pipelines = Vec::new();
    let mut offset = pre;
    for (j, size) in sizes.iter().enumerate() {
        let group: Vec<String> = names[offset..offset + size].to_vec();
        offset += size;
        let mut rules = Vec::new();
        for (i, name) in group.iter().enumerate() {
            let mut targets: Vec<Target> = group[i + 1..].iter().map(|s| Target::Element(s.clone())).collect();
            targets.push(Target::End);
            rules.extend(rules_for(g, name, &targets, &mut counter));
        }
        sub_pipelines.push(SubPipeline { id: format!("SP{j}"), start: group[0].clone(), tests: group, rules });
    }

    let mut root_order: Vec<String> = names[..pre].to_vec();
    root_order.push(split_name.clone());
    root_order.extend(post.iter().cloned());
    let mut rules = Vec::new();
    for (i, name) in root_order.iter().enumerate() {
        if *name == split_name {
            continue;
        }
        let mut targets: Vec<Target> = root_order[i + 1..].iter().map(|s| Target::Element(s.clone())).collect();
        targets.push(Target::End);
        rules.extend(rules_for(g, name, &targets, &mut counter));
    }
    let mut next_choices: Vec<Target> = post.iter().map(|s| Target::Element(s.clone())).collect();
    next_choices.push(Target::End);
    let split = PopulationSplitSpec {
        name: split_name,
        split_property: "class".into(),
        conditions: (0..k as i64).map(|c| ClassCondition { op: CmpOp::Eq, value: c }).collect(),
        sub_pipelines,
        next: g.pick(&next_choices).clone(),
        component: SplitComponent { service_name: "splitter".into(), image_name: "splitter:v1".into() },
    };
    let mut root_tests: Vec<String> = names[..pre].to_vec();
    root_tests.extend(post);
    PipelineSpec {
        name: format!("P{index}"),
        tests,
        root_tests,
        rules,
        splits: vec![split],
        start: Target::Element(root_order[0].clone()),
    }
}

/// Per-test metric snapshots: strong effect either way, or none.
pub fn random_scripts(g: &mut Gen, spec: &PipelineSpec) -> BTreeMap<String, Vec<VariantPair>> {
    let shapes = [(100, 200), (200, 100), (150, 150), (150, 165)];
    spec.tests
        .keys()
        .map(|name| {
            let len = g.range(1, 4) as usize;
            let snaps = (0..len)
                .map(|i| {
                    let (a, b) = *g.pick(&shapes);
                    let n = 500 * (i as u64 + 1);
                    binary_pair(n, a * (i as u64 + 1), n, b * (i as u64 + 1))
                })
                .collect();
            (name.clone(), snaps)
        })
        .collect()
}

/// 200-style corpus: only specs that pass validation are kept.
pub fn valid_specs(seed: u64, count: usize) -> Vec<(PipelineSpec, BTreeMap<String, Vec<VariantPair>>, i64)> {
    let mut g = Gen::new(seed, "specs");
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < count {
        let spec = random_spec(&mut g, i);
        i += 1;
        if !validate(&spec).is_ok() {
            continue;
        }
        let scripts = random_scripts(&mut g, &spec);
        let k = spec.splits.first().map_or(2, |s| s.sub_pipelines.len() as i64);
        // Sometimes leave one class unrouted.
        let classes = if g.below(4) == 0 { k + 1 } else { k };
        out.push((spec, scripts, classes));
    }
    out
}

pub fn scripted_system(scripts: &BTreeMap<String, Vec<VariantPair>>, classes: i64) -> ScriptedSystem {
    let mut sys = ScriptedSystem::new(BATCH).with_users(1000).with_classes(classes);
    for (name, snaps) in scripts {
        sys = sys.with_script(name.clone(), snaps.clone());
    }
    sys
}

/// Results at each batch boundary, computed ahead of the run.
pub fn precompute(
    spec: &PipelineSpec,
    scripts: &BTreeMap<String, Vec<VariantPair>>,
) -> BTreeMap<String, Vec<StatResult>> {
    spec.tests
        .values()
        .map(|t| {
            let batches = t.exp_length.div_ceil(BATCH);
            let snaps = &scripts[&t.name];
            let results = (1..=batches)
                .map(|k| {
                    let snap = snaps[(k as usize - 1).min(snaps.len() - 1)];
                    evaluate_hypothesis(t, &snap.a, &snap.b, k * BATCH).expect("binary snapshots evaluate")
                })
                .collect();
            (t.name.clone(), results)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefEvent {
    Start(String),
    Deploy(String),
    Batch { test: String, requests: u64, p_value: f64, significant: bool },
    Transition { test: String, rule: Option<String>, next: String },
    SplitEntry { split: String, subs: Vec<String> },
    SplitExit { split: String, next: String },
    End,
    Complete,
}

pub fn normalize(trace: &[TraceEntry]) -> Vec<(String, RefEvent)> {
    trace
        .iter()
        .map(|e| {
            let ev = match &e.event {
                Event::Start { element } => RefEvent::Start(element.to_string()),
                Event::Deploy { test } => RefEvent::Deploy(test.clone()),
                Event::BatchResult { result } => RefEvent::Batch {
                    test: result.test_name.clone(),
                    requests: result.requests_consumed,
                    p_value: result.p_value,
                    significant: result.significant,
                },
                Event::Transition { test, rule, next } => {
                    RefEvent::Transition { test: test.clone(), rule: rule.clone(), next: next.to_string() }
                }
                Event::SplitEntry { split, sub_pipelines } => {
                    RefEvent::SplitEntry { split: split.clone(), subs: sub_pipelines.clone() }
                }
                Event::SplitExit { split, next } => {
                    RefEvent::SplitExit { split: split.clone(), next: next.to_string() }
                }
                Event::End => RefEvent::End,
                Event::Complete => RefEvent::Complete,
            };
            (e.instance.clone(), ev)
        })
        .collect()
}

fn field(name: &str, r: &StatResult) -> f64 {
    match name {
        "p_value" => r.p_value,
        "mean_a" => r.mean_a,
        "mean_b" => r.mean_b,
        "effect" => r.mean_b - r.mean_a,
        other => panic!("unknown field {other}"),
    }
}

/// Direct evaluation of a condition tree.
fn holds(c: &Condition, r: &StatResult) -> bool {
    match c {
        Condition::Cmp { field: f, op, value } => {
            let x = field(f.name(), r);
            match op.symbol() {
                "<" => x < *value,
                "<=" => x <= *value,
                ">" => x > *value,
                ">=" => x >= *value,
                "==" => x == *value,
                "!=" => x != *value,
                s => panic!("unknown operator {s}"),
            }
        }
        Condition::And(a, b) => holds(a, r) && holds(b, r),
        Condition::Or(a, b) => holds(a, r) || holds(b, r),
    }
}

fn walk(
    spec: &PipelineSpec,
    results: &BTreeMap<String, Vec<StatResult>>,
    instance: &str,
    start: Target,
    rules: &[TransitionRule],
    out: &mut Vec<(String, RefEvent)>,
) {
    let push = |out: &mut Vec<(String, RefEvent)>, e| out.push((instance.to_string(), e));
    push(out, RefEvent::Start(start.to_string()));
    let mut current = start;
    loop {
        let name = match &current {
            Target::End => {
                push(out, RefEvent::End);
                return;
            }
            Target::Element(name) => name.clone(),
        };
        if let Some(split) = spec.split(&name) {
            push(
                out,
                RefEvent::SplitEntry {
                    split: name.clone(),
                    subs: split.sub_pipelines.iter().map(|s| s.id.clone()).collect(),
                },
            );
            for sp in &split.sub_pipelines {
                walk(spec, results, &sp.id, Target::Element(sp.start.clone()), &sp.rules, out);
            }
            push(out, RefEvent::SplitExit { split: name.clone(), next: split.next.to_string() });
            current = split.next.clone();
            continue;
        }
        let test = &spec.tests[&name];
        push(out, RefEvent::Deploy(name.clone()));
        let mut last = None;
        for r in &results[&name] {
            push(
                out,
                RefEvent::Batch {
                    test: name.clone(),
                    requests: r.requests_consumed,
                    p_value: r.p_value,
                    significant: r.significant,
                },
            );
            last = Some(r);
            if r.significant || r.requests_consumed >= test.exp_length {
                break;
            }
        }
        let result = last.expect("at least one batch");
        // First applying rule in declaration order; End when none applies.
        let mut next = Target::End;
        let mut chosen = None;
        for rule in rules {
            if rule.assoc == name && holds(&rule.condition, result) {
                next = rule.next.clone();
                chosen = Some(rule.name.clone());
                break;
            }
        }
        push(out, RefEvent::Transition { test: name.clone(), rule: chosen, next: next.to_string() });
        current = next;
    }
}

/// Trace the engine must produce for `spec` on the precomputed results.
pub fn reference_trace(spec: &PipelineSpec, results: &BTreeMap<String, Vec<StatResult>>) -> Vec<(String, RefEvent)> {
    let mut out = Vec::new();
    walk(spec, results, &spec.name, spec.start.clone(), &spec.rules, &mut out);
    out.push((spec.name.clone(), RefEvent::Complete));
    out
}

/// Expected live instance count after each event: the root alone, plus the
/// sub-pipelines of an entered split until its exit, and zero once complete.
pub fn lifecycle_violations(spec: &PipelineSpec, trace: &[TraceEntry]) -> Vec<String> {
    let mut inside = 0usize;
    let mut bad = Vec::new();
    for (i, e) in trace.iter().enumerate() {
        let expected = match &e.event {
            Event::SplitEntry { split, .. } => {
                inside = spec.split(split).map_or(0, |s| s.sub_pipelines.len());
                1 + inside
            }
            Event::SplitExit { .. } => {
                inside = 0;
                1
            }
            Event::Complete => 0,
            _ => 1 + inside,
        };
        if e.live_instances != expected {
            bad.push(format!(
                "event {i} ({}, {}): live {} != {expected}",
                e.instance,
                e.event.name(),
                e.live_instances
            ));
        }
    }
    bad
}
