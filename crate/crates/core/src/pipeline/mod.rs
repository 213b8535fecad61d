//! Pipelines of A/B tests: tests, transition rules, population splits and
//! the blueprint bundle they are loaded from.

mod blueprint;
mod condition;
mod graph;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use blueprint::{parse_blueprints, BlueprintBundle, BlueprintError};
pub use condition::{covers_everything, overlaps, satisfiable, CmpOp, Condition, ConditionError, Field};
pub use graph::{transition_graph, EdgeKind, GraphEdge, GraphNode, NodeKind, TransitionGraph};
pub use validate::{validate, ValidationReport, Violation};

/// Where control goes next: a named element (test or split) or the end marker.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    End,
    Element(String),
}

impl Target {
    pub fn parse(name: &str) -> Target {
        if name.eq_ignore_ascii_case("end") {
            Target::End
        } else {
            Target::Element(name.to_string())
        }
    }

    pub fn is_end(&self) -> bool {
        matches!(self, Target::End)
    }

    pub fn element(&self) -> Option<&str> {
        match self {
            Target::End => None,
            Target::Element(name) => Some(name),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::End => f.write_str("End"),
            Target::Element(name) => f.write_str(name),
        }
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Target::End => s.serialize_str("end"),
            Target::Element(name) => s.serialize_str(name),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Target::parse(&String::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "B_greater")]
    BGreater,
    #[serde(rename = "B_less")]
    BLess,
    #[serde(rename = "B_not_equal")]
    BNotEqual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatTestKind {
    #[default]
    WelchT,
    TwoProportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hypothesis {
    pub metric: String,
    pub direction: Direction,
    pub alpha: f64,
}

/// Fractions of the population routed to variant A and variant B.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub a: f64,
    pub b: f64,
}

impl Default for Assignment {
    fn default() -> Self {
        Assignment { a: 0.5, b: 0.5 }
    }
}

/// A deployable artifact: a service of the managed system and the image that
/// implements one variant of it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Variant {
    pub service_name: String,
    pub image_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AbTestSpec {
    pub name: String,
    /// Maximum number of requests routed to the test.
    pub exp_length: u64,
    #[serde(default)]
    pub ab_assignment: Assignment,
    pub hypothesis: Hypothesis,
    pub ab_metrics: Vec<String>,
    #[serde(default)]
    pub stat_test: StatTestKind,
    pub variant_a: Variant,
    pub variant_b: Variant,
}

impl AbTestSpec {
    /// The managed-system service both variants belong to.
    pub fn services(&self) -> impl Iterator<Item = &str> {
        let a = self.variant_a.service_name.as_str();
        let b = self.variant_b.service_name.as_str();
        std::iter::once(a).chain((a != b).then_some(b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TransitionRule {
    pub name: String,
    /// The associated A/B test.
    #[serde(rename = "experiment")]
    pub assoc: String,
    pub condition: Condition,
    #[serde(rename = "nextComponent")]
    pub next: Target,
}

/// Class-match condition of a population split, e.g. `== 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassCondition {
    pub op: CmpOp,
    pub value: i64,
}

impl ClassCondition {
    pub fn matches(&self, class: i64) -> bool {
        self.op.holds(class, self.value)
    }
}

impl fmt::Display for ClassCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.op, self.value)
    }
}

impl Serialize for ClassCondition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("ClassCondition", 2)?;
        st.serialize_field("op", self.op.symbol())?;
        st.serialize_field("value", &self.value)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for ClassCondition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Record { op: String, value: i64 },
            Pair(String, i64),
        }
        let (op, value) = match Raw::deserialize(d)? {
            Raw::Record { op, value } => (op, value),
            Raw::Pair(op, value) => (op, value),
        };
        let op = CmpOp::from_symbol(&op).ok_or_else(|| serde::de::Error::custom(format!("unknown operator `{op}`")))?;
        Ok(ClassCondition { op, value })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SplitComponent {
    pub service_name: String,
    pub image_name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubPipeline {
    pub id: String,
    pub start: String,
    pub tests: Vec<String>,
    /// Rules in declaration order.
    pub rules: Vec<TransitionRule>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSplitSpec {
    pub name: String,
    pub split_property: String,
    pub sub_pipelines: Vec<SubPipeline>,
    /// One condition per sub-pipeline, same order.
    pub conditions: Vec<ClassCondition>,
    /// Executed once every sub-pipeline has completed.
    pub next: Target,
    pub component: SplitComponent,
}

impl PopulationSplitSpec {
    /// Rules whose completion closes the split: each sub-pipeline's rules
    /// that lead to End.
    pub fn exit_rules(&self) -> impl Iterator<Item = (&str, &TransitionRule)> {
        self.sub_pipelines
            .iter()
            .flat_map(|sp| sp.rules.iter().filter(|r| r.next.is_end()).map(move |r| (sp.id.as_str(), r)))
    }

    /// Index of the sub-pipeline whose condition `class` satisfies first.
    pub fn route(&self, class: i64) -> Option<usize> {
        self.conditions.iter().position(|c| c.matches(class))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Element<'a> {
    Test(&'a AbTestSpec),
    Split(&'a PopulationSplitSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSpec {
    pub name: String,
    /// Every declared test, including the ones that belong to sub-pipelines.
    pub tests: BTreeMap<String, AbTestSpec>,
    /// Tests executed by the root pipeline.
    pub root_tests: Vec<String>,
    /// Root-level rules in declaration order.
    pub rules: Vec<TransitionRule>,
    pub splits: Vec<PopulationSplitSpec>,
    pub start: Target,
}

impl PipelineSpec {
    pub fn element(&self, name: &str) -> Option<Element<'_>> {
        if let Some(split) = self.split(name) {
            return Some(Element::Split(split));
        }
        self.tests.get(name).map(Element::Test)
    }

    pub fn test(&self, name: &str) -> Option<&AbTestSpec> {
        self.tests.get(name)
    }

    pub fn split(&self, name: &str) -> Option<&PopulationSplitSpec> {
        self.splits.iter().find(|s| s.name == name)
    }

    /// All rules, root first, then each sub-pipeline's.
    pub fn all_rules(&self) -> impl Iterator<Item = &TransitionRule> {
        self.rules.iter().chain(self.splits.iter().flat_map(|s| s.sub_pipelines.iter().flat_map(|sp| sp.rules.iter())))
    }

    pub fn sub_pipelines(&self) -> impl Iterator<Item = (&PopulationSplitSpec, &SubPipeline)> {
        self.splits.iter().flat_map(|s| s.sub_pipelines.iter().map(move |sp| (s, sp)))
    }
}
