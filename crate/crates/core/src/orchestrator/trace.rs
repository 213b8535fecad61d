use std::io;

use serde_json::{json, Value};

use crate::pipeline::Target;
use crate::stats::StatResult;

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Start {
        element: Target,
    },
    Deploy {
        test: String,
    },
    BatchResult {
        result: StatResult,
    },
    /// `rule` is `None` when no rule applied and control falls to End.
    Transition {
        test: String,
        rule: Option<String>,
        next: Target,
    },
    SplitEntry {
        split: String,
        sub_pipelines: Vec<String>,
    },
    SplitExit {
        split: String,
        next: Target,
    },
    End,
    Complete,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::Start { .. } => "start",
            Event::Deploy { .. } => "deploy",
            Event::BatchResult { .. } => "batch_result",
            Event::Transition { .. } => "transition",
            Event::SplitEntry { .. } => "split_entry",
            Event::SplitExit { .. } => "split_exit",
            Event::End => "end",
            Event::Complete => "complete",
        }
    }

    pub fn detail(&self) -> Value {
        match self {
            Event::Start { element } => json!({ "element": element }),
            Event::Deploy { test } => json!({ "test": test }),
            Event::BatchResult { result } => serde_json::to_value(result).expect("results serialize"),
            Event::Transition { test, rule, next } => json!({ "test": test, "rule": rule, "next": next }),
            Event::SplitEntry { split, sub_pipelines } => json!({ "split": split, "sub_pipelines": sub_pipelines }),
            Event::SplitExit { split, next } => json!({ "split": split, "next": next }),
            Event::End | Event::Complete => Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub instance: String,
    pub event: Event,
    /// Global requests served when the event happened.
    pub requests_total: u64,
    /// Live knowledge instances right after the event.
    pub live_instances: usize,
}

impl TraceEntry {
    pub fn to_json(&self) -> Value {
        json!({
            "instance": self.instance,
            "event": self.event.name(),
            "detail": self.event.detail(),
            "requests_total": self.requests_total,
        })
    }
}

/// One JSON object per line.
pub fn write_trace_jsonl<W: io::Write>(mut w: W, trace: &[TraceEntry]) -> io::Result<()> {
    for entry in trace {
        serde_json::to_writer(&mut w, &entry.to_json())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_shape() {
        let trace = vec![
            TraceEntry {
                instance: "p".into(),
                event: Event::Start { element: Target::End },
                requests_total: 0,
                live_instances: 1,
            },
            TraceEntry { instance: "p".into(), event: Event::Complete, requests_total: 0, live_instances: 0 },
        ];
        let mut buf = Vec::new();
        write_trace_jsonl(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"detail":{"element":"end"},"event":"start","instance":"p","requests_total":0}"#);
        assert_eq!(lines[1], r#"{"detail":null,"event":"complete","instance":"p","requests_total":0}"#);
    }
}
