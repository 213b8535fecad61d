use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use super::{covers_everything, Condition, PipelineSpec, Target, TransitionRule};

pub const START_NODE: &str = "Start";
pub const END_NODE: &str = "End";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Start,
    End,
    Test,
    Split,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GraphNode {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    /// From the Start marker to the first element.
    Start,
    Rule {
        rule: String,
        condition: String,
    },
    /// Taken when none of the test's rules applies.
    Default,
    /// From a split to the first test of one of its sub-pipelines.
    SplitBranch {
        sub_pipeline: String,
        condition: String,
    },
}

impl EdgeKind {
    pub fn is_labeled(&self) -> bool {
        matches!(self, EdgeKind::Rule { .. } | EdgeKind::SplitBranch { .. })
    }

    pub fn label(&self) -> String {
        match self {
            EdgeKind::Start => String::new(),
            EdgeKind::Rule { rule, condition } => format!("{rule}: {condition}"),
            EdgeKind::Default => "no rule applies".into(),
            EdgeKind::SplitBranch { sub_pipeline, condition } => format!("{sub_pipeline}: {condition}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
}

/// Control-flow graph of a pipeline. Nodes are sorted by name, edges by
/// `(from, to, kind)`, so the rendering is reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl TransitionGraph {
    pub fn node(&self, name: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn out_degree(&self, name: &str) -> usize {
        self.edges.iter().filter(|e| e.from == name).count()
    }

    pub fn labeled_edges(&self) -> impl Iterator<Item = &GraphEdge> {
        self.edges.iter().filter(|e| e.kind.is_labeled())
    }

    pub fn successors<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |e| e.from == name).map(|e| e.to.as_str())
    }

    pub fn reachable_from(&self, name: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([name.to_string()]);
        while let Some(n) = queue.pop_front() {
            if !seen.insert(n.clone()) {
                continue;
            }
            for s in self.successors(&n) {
                if !seen.contains(s) {
                    queue.push_back(s.to_string());
                }
            }
        }
        seen
    }

    /// Some cycle as a list of node names, first node repeated at the end.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Open,
            Done,
        }
        let mut marks: BTreeMap<&str, Mark> = BTreeMap::new();
        let mut stack: Vec<&str> = Vec::new();

        fn visit<'a>(
            g: &'a TransitionGraph,
            n: &'a str,
            marks: &mut BTreeMap<&'a str, Mark>,
            stack: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match marks.get(n) {
                Some(Mark::Done) => return None,
                Some(Mark::Open) => {
                    let pos = stack.iter().position(|s| *s == n).unwrap_or(0);
                    let mut cycle: Vec<String> = stack[pos..].iter().map(|s| s.to_string()).collect();
                    cycle.push(n.to_string());
                    return Some(cycle);
                }
                None => {}
            }
            marks.insert(n, Mark::Open);
            stack.push(n);
            for e in g.edges.iter().filter(|e| e.from == n) {
                if let Some(c) = visit(g, &e.to, marks, stack) {
                    return Some(c);
                }
            }
            stack.pop();
            marks.insert(n, Mark::Done);
            None
        }

        for node in &self.nodes {
            if let Some(c) = visit(self, &node.name, &mut marks, &mut stack) {
                return Some(c);
            }
        }
        None
    }

    /// Graphviz rendering.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph pipeline {\n");
        for n in &self.nodes {
            let shape = match n.kind {
                NodeKind::Start | NodeKind::End => "circle",
                NodeKind::Test => "box",
                NodeKind::Split => "diamond",
            };
            let _ = writeln!(out, "  \"{}\" [shape={shape}];", n.name);
        }
        for e in &self.edges {
            let label = e.kind.label();
            if label.is_empty() {
                let _ = writeln!(out, "  \"{}\" -> \"{}\";", e.from, e.to);
            } else {
                let _ = writeln!(out, "  \"{}\" -> \"{}\" [label=\"{}\"];", e.from, e.to, label.replace('"', "'"));
            }
        }
        out.push_str("}\n");
        out
    }
}

fn target_name(t: &Target) -> String {
    match t {
        Target::End => END_NODE.to_string(),
        Target::Element(n) => n.clone(),
    }
}

/// Rule and default edges of one (sub-)pipeline scope. `end` is where a rule
/// targeting End leads from inside that scope.
fn scope_edges(tests: &[String], rules: &[TransitionRule], end: &str, edges: &mut Vec<GraphEdge>) {
    for rule in rules {
        let to = match &rule.next {
            Target::End => end.to_string(),
            Target::Element(n) => n.clone(),
        };
        edges.push(GraphEdge {
            from: rule.assoc.clone(),
            to,
            kind: EdgeKind::Rule { rule: rule.name.clone(), condition: rule.condition.to_string() },
        });
    }
    for test in tests {
        let conds: Vec<&Condition> = rules.iter().filter(|r| &r.assoc == test).map(|r| &r.condition).collect();
        if !covers_everything(&conds) {
            edges.push(GraphEdge { from: test.clone(), to: end.to_string(), kind: EdgeKind::Default });
        }
    }
}

pub fn transition_graph(spec: &PipelineSpec) -> TransitionGraph {
    let mut nodes = vec![
        GraphNode { name: START_NODE.into(), kind: NodeKind::Start },
        GraphNode { name: END_NODE.into(), kind: NodeKind::End },
    ];
    nodes.extend(spec.tests.keys().map(|n| GraphNode { name: n.clone(), kind: NodeKind::Test }));
    nodes.extend(spec.splits.iter().map(|s| GraphNode { name: s.name.clone(), kind: NodeKind::Split }));
    nodes.sort();
    nodes.dedup_by(|a, b| a.name == b.name);

    let mut edges = vec![GraphEdge { from: START_NODE.into(), to: target_name(&spec.start), kind: EdgeKind::Start }];
    scope_edges(&spec.root_tests, &spec.rules, END_NODE, &mut edges);
    for split in &spec.splits {
        let exit = target_name(&split.next);
        for (i, sp) in split.sub_pipelines.iter().enumerate() {
            let condition = split
                .conditions
                .get(i)
                .map(|c| format!("{} {c}", split.split_property))
                .unwrap_or_else(|| "(no condition)".into());
            edges.push(GraphEdge {
                from: split.name.clone(),
                to: sp.start.clone(),
                kind: EdgeKind::SplitBranch { sub_pipeline: sp.id.clone(), condition },
            });
            scope_edges(&sp.tests, &sp.rules, &exit, &mut edges);
        }
    }
    edges.sort();
    edges.dedup();
    TransitionGraph { nodes, edges }
}
