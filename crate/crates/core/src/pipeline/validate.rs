//! Static checks run before a pipeline is executed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use super::graph::{transition_graph, END_NODE, START_NODE};
use super::{overlaps, AbTestSpec, PipelineSpec, Target, TransitionRule};

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DanglingReference { from: String, name: String },
    UnreachableEnd,
    Cycle { path: Vec<String> },
    NonExclusiveSplitConditions { split: String, class: i64, sub_pipelines: Vec<String> },
    InterferingSubPipelines { split: String, first: String, second: String, shared: Vec<String> },
    BadAssignment { test: String, a: f64, b: f64 },
    BadTestParameters { test: String, message: String },
    OverlappingRules { test: String, first: String, second: String },
    SplitArity { split: String, sub_pipelines: usize, conditions: usize },
    NestedSplit { split: String, sub_pipeline: String, inner: String },
    ScopeViolation { scope: String, message: String },
    DuplicateMembership { test: String, scopes: Vec<String> },
    ReservedName { name: String },
}

impl Violation {
    /// Short class name, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Violation::DanglingReference { .. } => "dangling reference",
            Violation::UnreachableEnd => "unreachable End",
            Violation::Cycle { .. } => "cycle",
            Violation::NonExclusiveSplitConditions { .. } => "non-exclusive split conditions",
            Violation::InterferingSubPipelines { .. } => "interfering sub-pipelines",
            Violation::BadAssignment { .. } => "bad assignment fractions",
            Violation::BadTestParameters { .. } => "bad test parameters",
            Violation::OverlappingRules { .. } => "overlapping rules",
            Violation::SplitArity { .. } => "split arity",
            Violation::NestedSplit { .. } => "nested split",
            Violation::ScopeViolation { .. } => "scope violation",
            Violation::DuplicateMembership { .. } => "duplicate membership",
            Violation::ReservedName { .. } => "reserved name",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.kind())?;
        match self {
            Violation::DanglingReference { from, name } => write!(f, "{from} references undeclared element `{name}`"),
            Violation::UnreachableEnd => f.write_str("End is not reachable from Start"),
            Violation::Cycle { path } => write!(f, "{}", path.join(" -> ")),
            Violation::NonExclusiveSplitConditions { split, class, sub_pipelines } => {
                write!(f, "split `{split}`: class {class} matches {}", sub_pipelines.join(", "))
            }
            Violation::InterferingSubPipelines { split, first, second, shared } => {
                write!(f, "split `{split}`: `{first}` and `{second}` share {}", shared.join(", "))
            }
            Violation::BadAssignment { test, a, b } => {
                write!(f, "test `{test}`: fractions {a} and {b} must lie in [0,1] and sum to 1")
            }
            Violation::BadTestParameters { test, message } => write!(f, "test `{test}`: {message}"),
            Violation::OverlappingRules { test, first, second } => {
                write!(f, "rules `{first}` and `{second}` of test `{test}` can both apply")
            }
            Violation::SplitArity { split, sub_pipelines, conditions } => write!(
                f,
                "split `{split}` has {sub_pipelines} sub-pipelines and {conditions} conditions (need equal, at least 2)"
            ),
            Violation::NestedSplit { split, sub_pipeline, inner } => {
                write!(f, "sub-pipeline `{sub_pipeline}` of split `{split}` leads to split `{inner}`")
            }
            Violation::ScopeViolation { scope, message } => write!(f, "{scope}: {message}"),
            Violation::DuplicateMembership { test, scopes } => {
                write!(f, "test `{test}` belongs to {}", scopes.join(", "))
            }
            Violation::ReservedName { name } => write!(f, "`{name}` is reserved"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: &str) -> bool {
        self.violations.iter().any(|v| v.kind() == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

const ASSIGNMENT_TOLERANCE: f64 = 1e-9;

fn check_test(t: &AbTestSpec, out: &mut Vec<Violation>) {
    let (a, b) = (t.ab_assignment.a, t.ab_assignment.b);
    let in_unit = |x: f64| (0.0..=1.0).contains(&x);
    if !(in_unit(a) && in_unit(b) && (a + b - 1.0).abs() <= ASSIGNMENT_TOLERANCE) {
        out.push(Violation::BadAssignment { test: t.name.clone(), a, b });
    }
    let bad = |message: String| Violation::BadTestParameters { test: t.name.clone(), message };
    if t.name.is_empty() {
        out.push(bad("name is empty".into()));
    }
    if t.exp_length == 0 {
        out.push(bad("expLength must be at least 1".into()));
    }
    let alpha = t.hypothesis.alpha;
    if !(alpha > 0.0 && alpha < 1.0) {
        out.push(bad(format!("alpha {alpha} outside (0, 1)")));
    }
    if !t.ab_metrics.contains(&t.hypothesis.metric) {
        out.push(bad(format!("hypothesis metric `{}` is not among abMetrics", t.hypothesis.metric)));
    }
}

/// One execution scope: the root pipeline or a sub-pipeline.
struct Scope<'a> {
    label: String,
    tests: &'a [String],
    rules: &'a [TransitionRule],
    in_split: Option<&'a str>,
}

fn is_reserved(name: &str) -> bool {
    name.eq_ignore_ascii_case(START_NODE) || name.eq_ignore_ascii_case(END_NODE)
}

pub fn validate(spec: &PipelineSpec) -> ValidationReport {
    let mut out = Vec::new();
    let split_names: BTreeSet<&str> = spec.splits.iter().map(|s| s.name.as_str()).collect();
    let declared = |n: &str| spec.tests.contains_key(n) || split_names.contains(n);

    for name in spec.tests.keys().map(String::as_str).chain(split_names.iter().copied()) {
        if is_reserved(name) {
            out.push(Violation::ReservedName { name: name.to_string() });
        }
    }
    for t in spec.tests.values() {
        check_test(t, &mut out);
    }

    let mut dangling = |from: String, name: &str, out: &mut Vec<Violation>| {
        if !declared(name) {
            out.push(Violation::DanglingReference { from, name: name.to_string() });
            false
        } else {
            true
        }
    };

    if let Target::Element(s) = &spec.start {
        if dangling("pipeline start".into(), s, &mut out)
            && !spec.root_tests.contains(s)
            && !split_names.contains(s.as_str())
        {
            out.push(Violation::ScopeViolation {
                scope: spec.name.clone(),
                message: format!("start `{s}` is not a root element"),
            });
        }
    }
    for t in &spec.root_tests {
        dangling(format!("pipeline `{}`", spec.name), t, &mut out);
    }

    let mut scopes =
        vec![Scope { label: spec.name.clone(), tests: &spec.root_tests, rules: &spec.rules, in_split: None }];
    for split in &spec.splits {
        if split.sub_pipelines.len() != split.conditions.len() || split.sub_pipelines.len() < 2 {
            out.push(Violation::SplitArity {
                split: split.name.clone(),
                sub_pipelines: split.sub_pipelines.len(),
                conditions: split.conditions.len(),
            });
        }
        if let Target::Element(n) = &split.next {
            if dangling(format!("split `{}`", split.name), n, &mut out)
                && !spec.root_tests.contains(n)
                && !split_names.contains(n.as_str())
            {
                out.push(Violation::ScopeViolation {
                    scope: spec.name.clone(),
                    message: format!("split `{}` continues with `{n}`, which is not a root element", split.name),
                });
            }
        }
        for sp in &split.sub_pipelines {
            let label = format!("{}/{}", split.name, sp.id);
            for t in &sp.tests {
                dangling(format!("sub-pipeline `{label}`"), t, &mut out);
            }
            if dangling(format!("sub-pipeline `{label}` start"), &sp.start, &mut out) && !sp.tests.contains(&sp.start) {
                out.push(Violation::ScopeViolation {
                    scope: label.clone(),
                    message: format!("start `{}` is not one of its tests", sp.start),
                });
            }
            scopes.push(Scope { label, tests: &sp.tests, rules: &sp.rules, in_split: Some(&split.name) });
        }

        check_exclusive(split, &mut out);
        check_interference(spec, split, &mut out);
    }

    let mut membership: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for scope in &scopes {
        for t in scope.tests.iter() {
            membership.entry(t).or_default().push(scope.label.clone());
        }
        check_scope_rules(scope, &split_names, &mut dangling, &mut out);
        check_overlaps(scope, &mut out);
    }
    // Siblings sharing a test are reported as interference; everything else
    // (root plus a sub-pipeline, or two different splits) lands here.
    for (test, mut labels) in membership {
        labels.dedup();
        if labels.len() > 1 {
            let sibling_only = {
                let splits: BTreeSet<&str> = labels.iter().map(|l| l.split('/').next().unwrap_or("")).collect();
                splits.len() == 1 && labels.iter().all(|l| l.contains('/'))
            };
            if !sibling_only {
                out.push(Violation::DuplicateMembership { test: test.to_string(), scopes: labels });
            }
        }
    }

    let graph = transition_graph(spec);
    if let Some(path) = graph.find_cycle() {
        out.push(Violation::Cycle { path });
    }
    if !graph.reachable_from(START_NODE).contains(END_NODE) {
        out.push(Violation::UnreachableEnd);
    }

    ValidationReport { violations: out }
}

fn check_scope_rules(
    scope: &Scope<'_>,
    split_names: &BTreeSet<&str>,
    dangling: &mut impl FnMut(String, &str, &mut Vec<Violation>) -> bool,
    out: &mut Vec<Violation>,
) {
    for rule in scope.rules {
        let from = format!("rule `{}`", rule.name);
        if dangling(from.clone(), &rule.assoc, out) && !scope.tests.contains(&rule.assoc) {
            out.push(Violation::ScopeViolation {
                scope: scope.label.clone(),
                message: format!("rule `{}` is attached to `{}`, which is outside this scope", rule.name, rule.assoc),
            });
        }
        let Target::Element(next) = &rule.next else { continue };
        if !dangling(from, next, out) {
            continue;
        }
        match scope.in_split {
            Some(split) if split_names.contains(next.as_str()) => out.push(Violation::NestedSplit {
                split: split.to_string(),
                sub_pipeline: scope.label.split('/').nth(1).unwrap_or_default().to_string(),
                inner: next.clone(),
            }),
            _ if scope.tests.contains(next) => {}
            None if split_names.contains(next.as_str()) => {}
            _ => out.push(Violation::ScopeViolation {
                scope: scope.label.clone(),
                message: format!("rule `{}` leads to `{next}`, which is outside this scope", rule.name),
            }),
        }
    }
}

fn check_overlaps(scope: &Scope<'_>, out: &mut Vec<Violation>) {
    for (i, r1) in scope.rules.iter().enumerate() {
        for r2 in &scope.rules[i + 1..] {
            if r1.assoc == r2.assoc && overlaps(&r1.condition, &r2.condition) {
                out.push(Violation::OverlappingRules {
                    test: r1.assoc.clone(),
                    first: r1.name.clone(),
                    second: r2.name.clone(),
                });
            }
        }
    }
}

fn check_exclusive(split: &super::PopulationSplitSpec, out: &mut Vec<Violation>) {
    if split.conditions.is_empty() {
        return;
    }
    // Every condition is constant on each side of its value, so probing one
    // integer beyond the extremes covers the whole class domain.
    let lo = split.conditions.iter().map(|c| c.value).min().unwrap_or(0).saturating_sub(1);
    let hi = split.conditions.iter().map(|c| c.value).max().unwrap_or(0).saturating_add(1);
    for class in lo..=hi {
        let hits: Vec<String> = split
            .conditions
            .iter()
            .enumerate()
            .filter(|(_, c)| c.matches(class))
            .map(|(i, _)| split.sub_pipelines.get(i).map(|sp| sp.id.clone()).unwrap_or_else(|| format!("#{i}")))
            .collect();
        if hits.len() > 1 {
            out.push(Violation::NonExclusiveSplitConditions { split: split.name.clone(), class, sub_pipelines: hits });
            return;
        }
    }
}

fn check_interference(spec: &PipelineSpec, split: &super::PopulationSplitSpec, out: &mut Vec<Violation>) {
    let footprint = |tests: &[String]| -> (BTreeSet<String>, BTreeSet<String>) {
        let names = tests.iter().cloned().collect();
        let services = tests
            .iter()
            .filter_map(|t| spec.tests.get(t))
            .flat_map(|t| t.services().map(str::to_string).collect::<Vec<_>>())
            .collect();
        (names, services)
    };
    let prints: Vec<_> = split.sub_pipelines.iter().map(|sp| footprint(&sp.tests)).collect();
    for i in 0..prints.len() {
        for j in i + 1..prints.len() {
            let mut shared: Vec<String> =
                prints[i].0.intersection(&prints[j].0).map(|t| format!("test `{t}`")).collect();
            shared.extend(prints[i].1.intersection(&prints[j].1).map(|s| format!("service `{s}`")));
            if !shared.is_empty() {
                out.push(Violation::InterferingSubPipelines {
                    split: split.name.clone(),
                    first: split.sub_pipelines[i].id.clone(),
                    second: split.sub_pipelines[j].id.clone(),
                    shared,
                });
            }
        }
    }
}
