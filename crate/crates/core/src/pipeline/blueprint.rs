//! Blueprint bundles: a directory of JSON documents describing a pipeline.
//!
//! ```text
//! pipeline.json          root pipeline
//! experiments/*.json     one A/B test each
//! rules/*.json           one transition rule each
//! pipelines/*.json       sub-pipelines started by population splits
//! splits/*.json          population splits
//! ```
//!
//! Split condition lists may use the compact `{"==", 0}` notation, which is
//! rewritten to `["==", 0]` before JSON parsing.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    AbTestSpec, ClassCondition, PipelineSpec, PopulationSplitSpec, SplitComponent, SubPipeline, Target, TransitionRule,
};

const PIPELINE_FILE: &str = "pipeline.json";
const DIRS: [&str; 4] = ["experiments", "rules", "pipelines", "splits"];

#[derive(Debug, Error)]
pub enum BlueprintError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{file}:{line}:{column}: {message}")]
    Syntax { file: String, line: usize, column: usize, message: String },
    #[error("bundle has no {0}")]
    MissingPipeline(&'static str),
    #[error("dangling reference: {file} references undeclared {kind} `{name}`")]
    UnresolvedReference { file: String, kind: &'static str, name: String },
    #[error("duplicate name `{name}` declared in {first} and {second}")]
    DuplicateName { name: String, first: String, second: String },
    #[error("{file}: {message}")]
    Invalid { file: String, message: String },
}

impl BlueprintError {
    pub fn is_io(&self) -> bool {
        matches!(self, BlueprintError::Io { .. })
    }
}

/// The raw documents of a bundle, keyed by path relative to the bundle root
/// (always `/`-separated).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlueprintBundle {
    pub files: BTreeMap<String, String>,
}

impl BlueprintBundle {
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, BlueprintError> {
        let dir = dir.as_ref();
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| BlueprintError::Io { path, source }
        };
        let meta = fs::metadata(dir).map_err(io_err(dir))?;
        if !meta.is_dir() {
            return Err(BlueprintError::Io {
                path: dir.to_path_buf(),
                source: io::Error::new(io::ErrorKind::InvalidInput, "not a directory"),
            });
        }
        let mut files = BTreeMap::new();
        let root = dir.join(PIPELINE_FILE);
        if root.is_file() {
            files.insert(PIPELINE_FILE.to_string(), fs::read_to_string(&root).map_err(io_err(&root))?);
        }
        for sub in DIRS {
            let path = dir.join(sub);
            if !path.is_dir() {
                continue;
            }
            let mut entries = Vec::new();
            for entry in fs::read_dir(&path).map_err(io_err(&path))? {
                let entry = entry.map_err(io_err(&path))?;
                let p = entry.path();
                if p.extension().is_some_and(|e| e == "json") && p.is_file() {
                    entries.push(p);
                }
            }
            entries.sort();
            for p in entries {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                files.insert(format!("{sub}/{name}"), fs::read_to_string(&p).map_err(io_err(&p))?);
            }
        }
        Ok(BlueprintBundle { files })
    }

    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<(), BlueprintError> {
        let dir = dir.as_ref();
        for (rel, text) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)
                    .map_err(|source| BlueprintError::Io { path: parent.to_path_buf(), source })?;
            }
            fs::write(&path, text).map_err(|source| BlueprintError::Io { path: path.clone(), source })?;
        }
        Ok(())
    }

    /// Serialize a spec into one document per element.
    pub fn from_spec(spec: &PipelineSpec) -> Self {
        let mut files = BTreeMap::new();
        let mut put = |dir: &str, name: &str, value: serde_json::Value| {
            let mut text = serde_json::to_string_pretty(&value).expect("blueprint values serialize");
            text.push('\n');
            files.insert(format!("{dir}/{}.json", file_stem(name)), text);
        };
        for test in spec.tests.values() {
            put("experiments", &test.name, serde_json::to_value(test).unwrap());
        }
        for rule in spec.all_rules() {
            put("rules", &rule.name, serde_json::to_value(rule).unwrap());
        }
        for split in &spec.splits {
            for sp in &split.sub_pipelines {
                let file = SubPipelineFile {
                    name: sp.id.clone(),
                    starting_component: sp.start.clone(),
                    experiments: sp.tests.clone(),
                    transition_rules: sp.rules.iter().map(|r| r.name.clone()).collect(),
                };
                put("pipelines", &sp.id, serde_json::to_value(file).unwrap());
            }
            let file = SplitFile {
                name: split.name.clone(),
                split_property: split.split_property.clone(),
                pipelines: split.sub_pipelines.iter().map(|sp| sp.id.clone()).collect(),
                conditional_statements: split.conditions.clone(),
                next_component: split.next.clone(),
                split_component: split.component.clone(),
            };
            put("splits", &split.name, serde_json::to_value(file).unwrap());
        }
        let root = PipelineFile {
            name: spec.name.clone(),
            starting_component: spec.start.clone(),
            experiments: spec.root_tests.clone(),
            transition_rules: spec.rules.iter().map(|r| r.name.clone()).collect(),
            population_splits: spec.splits.iter().map(|s| s.name.clone()).collect(),
        };
        let mut text = serde_json::to_string_pretty(&root).unwrap();
        text.push('\n');
        files.insert(PIPELINE_FILE.to_string(), text);
        BlueprintBundle { files }
    }

    pub fn parse(&self) -> Result<PipelineSpec, BlueprintError> {
        parse_blueprints(self)
    }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PipelineFile {
    name: String,
    starting_component: Target,
    #[serde(default)]
    experiments: Vec<String>,
    #[serde(default)]
    transition_rules: Vec<String>,
    #[serde(default)]
    population_splits: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SubPipelineFile {
    name: String,
    starting_component: String,
    experiments: Vec<String>,
    #[serde(default)]
    transition_rules: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SplitFile {
    name: String,
    split_property: String,
    pipelines: Vec<String>,
    conditional_statements: Vec<ClassCondition>,
    next_component: Target,
    split_component: SplitComponent,
}

fn compact_conditions() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"\{\s*("(?:==|!=|<=|>=|<|>)")\s*,\s*(-?\d+)\s*\}"#).unwrap())
}

fn decode<T: for<'de> Deserialize<'de>>(file: &str, text: &str) -> Result<T, BlueprintError> {
    let normalized = compact_conditions().replace_all(text, "[$1, $2]");
    serde_json::from_str(&normalized).map_err(|e| BlueprintError::Syntax {
        file: file.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Declarations of one kind, keyed by name, remembering the declaring file.
struct Declared<T> {
    items: BTreeMap<String, (String, T)>,
}

impl<T> Declared<T> {
    fn new() -> Self {
        Declared { items: BTreeMap::new() }
    }

    fn insert(&mut self, name: String, file: &str, item: T) -> Result<(), BlueprintError> {
        if let Some((first, _)) = self.items.get(&name) {
            return Err(BlueprintError::DuplicateName { name, first: first.clone(), second: file.to_string() });
        }
        self.items.insert(name, (file.to_string(), item));
        Ok(())
    }

    fn file(&self, name: &str) -> String {
        self.items.get(name).map(|(f, _)| f.clone()).unwrap_or_default()
    }

    fn get(&self, name: &str, from: &str, kind: &'static str) -> Result<&T, BlueprintError> {
        self.items.get(name).map(|(_, t)| t).ok_or_else(|| BlueprintError::UnresolvedReference {
            file: from.to_string(),
            kind,
            name: name.to_string(),
        })
    }
}

fn require_name(file: &str, name: &str) -> Result<(), BlueprintError> {
    if name.trim().is_empty() {
        return Err(BlueprintError::Invalid { file: file.to_string(), message: "empty name".into() });
    }
    Ok(())
}

/// Load, link and resolve every document of a bundle.
pub fn parse_blueprints(bundle: &BlueprintBundle) -> Result<PipelineSpec, BlueprintError> {
    let mut tests = Declared::<AbTestSpec>::new();
    let mut rules = Declared::<TransitionRule>::new();
    let mut subs = Declared::<SubPipelineFile>::new();
    let mut splits = Declared::<SplitFile>::new();
    let mut root = None;

    for (path, text) in &bundle.files {
        match path.split_once('/') {
            None if path == PIPELINE_FILE => root = Some(decode::<PipelineFile>(path, text)?),
            Some(("experiments", _)) => {
                let t: AbTestSpec = decode(path, text)?;
                require_name(path, &t.name)?;
                tests.insert(t.name.clone(), path, t)?;
            }
            Some(("rules", _)) => {
                let r: TransitionRule = decode(path, text)?;
                require_name(path, &r.name)?;
                rules.insert(r.name.clone(), path, r)?;
            }
            Some(("pipelines", _)) => {
                let s: SubPipelineFile = decode(path, text)?;
                require_name(path, &s.name)?;
                subs.insert(s.name.clone(), path, s)?;
            }
            Some(("splits", _)) => {
                let s: SplitFile = decode(path, text)?;
                require_name(path, &s.name)?;
                splits.insert(s.name.clone(), path, s)?;
            }
            _ => {}
        }
    }
    let root = root.ok_or(BlueprintError::MissingPipeline(PIPELINE_FILE))?;

    // Tests and splits share one namespace as rule targets.
    for (name, (file, _)) in &splits.items {
        if let Some((first, _)) = tests.items.get(name) {
            return Err(BlueprintError::DuplicateName {
                name: name.clone(),
                first: first.clone(),
                second: file.clone(),
            });
        }
    }

    // Every rule must point at declared elements.
    for (file, rule) in rules.items.values() {
        tests.get(&rule.assoc, file, "experiment")?;
        if let Target::Element(next) = &rule.next {
            if !tests.items.contains_key(next) && !splits.items.contains_key(next) {
                return Err(BlueprintError::UnresolvedReference {
                    file: file.clone(),
                    kind: "element",
                    name: next.clone(),
                });
            }
        }
    }

    let resolve_rules = |names: &[String], from: &str| -> Result<Vec<TransitionRule>, BlueprintError> {
        names.iter().map(|n| rules.get(n, from, "transition rule").cloned()).collect()
    };
    let check_tests = |names: &[String], from: &str| -> Result<(), BlueprintError> {
        for n in names {
            tests.get(n, from, "experiment")?;
        }
        Ok(())
    };

    let mut resolved_splits = Vec::new();
    for split_name in &root.population_splits {
        let split = splits.get(split_name, PIPELINE_FILE, "population split")?;
        let split_file = splits.file(split_name);
        let mut sub_pipelines = Vec::new();
        for id in &split.pipelines {
            let sub = subs.get(id, &split_file, "pipeline")?;
            let sub_file = subs.file(id);
            check_tests(&sub.experiments, &sub_file)?;
            tests.get(&sub.starting_component, &sub_file, "experiment")?;
            sub_pipelines.push(SubPipeline {
                id: sub.name.clone(),
                start: sub.starting_component.clone(),
                tests: sub.experiments.clone(),
                rules: resolve_rules(&sub.transition_rules, &sub_file)?,
            });
        }
        if let Target::Element(next) = &split.next_component {
            if !tests.items.contains_key(next) && !splits.items.contains_key(next) {
                return Err(BlueprintError::UnresolvedReference {
                    file: split_file,
                    kind: "element",
                    name: next.clone(),
                });
            }
        }
        resolved_splits.push(PopulationSplitSpec {
            name: split.name.clone(),
            split_property: split.split_property.clone(),
            sub_pipelines,
            conditions: split.conditional_statements.clone(),
            next: split.next_component.clone(),
            component: split.split_component.clone(),
        });
    }

    check_tests(&root.experiments, PIPELINE_FILE)?;
    let root_rules = resolve_rules(&root.transition_rules, PIPELINE_FILE)?;
    if let Target::Element(start) = &root.starting_component {
        if !tests.items.contains_key(start) && !splits.items.contains_key(start) {
            return Err(BlueprintError::UnresolvedReference {
                file: PIPELINE_FILE.into(),
                kind: "element",
                name: start.clone(),
            });
        }
    }

    Ok(PipelineSpec {
        name: root.name,
        tests: tests.items.into_iter().map(|(k, (_, t))| (k, t)).collect(),
        root_tests: root.experiments,
        rules: root_rules,
        splits: resolved_splits,
        start: root.starting_component,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CmpOp;

    const LISTING_SPLIT: &str = r#"{
  "name": "Population-split-purchases-prediction",
  "splitProperty": "purchase-likelihood",
  "pipelines": ["Review-pipeline", "Recommendation-pipeline"],
  "conditionalStatements": [{"==", 0}, {"==", 1}],
  "nextComponent": "end",
  "splitComponent": {
    "serviceName": "purchase-prediction-component",
    "imageName": "ml-purchase-filter"
  }
}"#;

    fn experiment(name: &str, service: &str) -> String {
        format!(
            r#"{{"name": "{name}", "expLength": 1000, "abAssignment": {{"a": 0.5, "b": 0.5}},
                "hypothesis": {{"metric": "clicks", "direction": "B_greater", "alpha": 0.05}},
                "abMetrics": ["clicks"], "statTest": "welch_t",
                "variantA": {{"serviceName": "{service}", "imageName": "{service}:a"}},
                "variantB": {{"serviceName": "{service}", "imageName": "{service}:b"}}}}"#
        )
    }

    fn listing_bundle() -> BlueprintBundle {
        let mut files = BTreeMap::new();
        files.insert("splits/split.json".into(), LISTING_SPLIT.into());
        files.insert("experiments/review.json".into(), experiment("Review", "review-service"));
        files.insert("experiments/rec.json".into(), experiment("Recommendation", "recommendation-service"));
        files.insert(
            "pipelines/review.json".into(),
            r#"{"name": "Review-pipeline", "startingComponent": "Review", "experiments": ["Review"]}"#.into(),
        );
        files.insert(
            "pipelines/rec.json".into(),
            r#"{"name": "Recommendation-pipeline", "startingComponent": "Recommendation", "experiments": ["Recommendation"]}"#.into(),
        );
        files.insert(
            "pipeline.json".into(),
            r#"{"name": "P", "startingComponent": "Population-split-purchases-prediction",
                "populationSplits": ["Population-split-purchases-prediction"]}"#
                .into(),
        );
        BlueprintBundle { files }
    }

    #[test]
    fn listing_split_parses() {
        let spec = listing_bundle().parse().unwrap();
        let split = &spec.splits[0];
        assert_eq!(split.name, "Population-split-purchases-prediction");
        assert_eq!(split.split_property, "purchase-likelihood");
        let ids: Vec<_> = split.sub_pipelines.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["Review-pipeline", "Recommendation-pipeline"]);
        assert_eq!(
            split.conditions,
            vec![ClassCondition { op: CmpOp::Eq, value: 0 }, ClassCondition { op: CmpOp::Eq, value: 1 }]
        );
        assert_eq!(split.next, Target::End);
        assert_eq!(split.component.image_name, "ml-purchase-filter");
    }

    #[test]
    fn empty_pipeline_parses() {
        let mut files = BTreeMap::new();
        files.insert("pipeline.json".into(), r#"{"name": "Empty", "startingComponent": "End"}"#.into());
        let spec = BlueprintBundle { files }.parse().unwrap();
        assert_eq!(spec.start, Target::End);
        assert!(spec.tests.is_empty());
    }

    #[test]
    fn unresolved_reference_names_the_element() {
        let mut files = BTreeMap::new();
        files.insert("pipeline.json".into(), r#"{"name": "P", "startingComponent": "X", "experiments": ["X"]}"#.into());
        let err = BlueprintBundle { files }.parse().unwrap_err();
        match err {
            BlueprintError::UnresolvedReference { name, .. } => assert_eq!(name, "X"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn dangling_rule_target() {
        let mut b = listing_bundle();
        b.files.insert(
            "rules/r.json".into(),
            r#"{"name": "r", "experiment": "Review", "condition": "p_value <= 0.05", "nextComponent": "Nowhere"}"#
                .into(),
        );
        let err = b.parse().unwrap_err();
        assert!(err.to_string().contains("Nowhere"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut b = listing_bundle();
        b.files.insert("experiments/review2.json".into(), experiment("Review", "other"));
        assert!(matches!(b.parse().unwrap_err(), BlueprintError::DuplicateName { .. }));
    }

    #[test]
    fn syntax_errors_are_positioned() {
        let mut b = listing_bundle();
        b.files.insert("experiments/bad.json".into(), "{\n  \"name\": \n}".into());
        match b.parse().unwrap_err() {
            BlueprintError::Syntax { file, line, .. } => {
                assert_eq!(file, "experiments/bad.json");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_condition_is_a_syntax_error() {
        let mut b = listing_bundle();
        b.files.insert(
            "rules/r.json".into(),
            r#"{"name": "r", "experiment": "Review", "condition": "p_value <=", "nextComponent": "end"}"#.into(),
        );
        assert!(matches!(b.parse().unwrap_err(), BlueprintError::Syntax { .. }));
    }

    #[test]
    fn missing_pipeline_file() {
        let mut b = listing_bundle();
        b.files.remove("pipeline.json");
        assert!(matches!(b.parse().unwrap_err(), BlueprintError::MissingPipeline(_)));
    }

    #[test]
    fn reserialized_bundle_parses_to_same_spec() {
        let spec = listing_bundle().parse().unwrap();
        let again = BlueprintBundle::from_spec(&spec).parse().unwrap();
        assert_eq!(spec, again);
    }
}
