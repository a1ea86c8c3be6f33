//! Machine-readable certificates.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Outcome of one numerical check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub name: String,
    /// Hypothesis the check certifies.
    pub anchor: String,
    pub passed: bool,
    /// Largest residual (or the smallest margin, for rank checks).
    pub value: f64,
    pub tolerance: f64,
    pub samples: usize,
    pub details: BTreeMap<String, Value>,
}

impl CheckRecord {
    pub fn new(name: &str, anchor: &str, passed: bool, value: f64, tolerance: f64, samples: usize) -> Self {
        CheckRecord {
            name: name.to_string(),
            anchor: anchor.to_string(),
            passed,
            value,
            tolerance,
            samples,
            details: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.details.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn failure_message(&self) -> String {
        format!(
            "{} failed [{}]: value {:.3e} vs tolerance {:.1e}",
            self.name, self.anchor, self.value, self.tolerance
        )
    }
}

/// A set of check records plus the hypotheses that were assumed rather than checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResidualReport {
    pub checks: Vec<CheckRecord>,
    pub assumptions: Vec<String>,
    pub validity: BTreeMap<String, Value>,
    pub summary: BTreeMap<String, Value>,
}

impl ResidualReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: CheckRecord) {
        self.checks.push(rec);
    }

    pub fn merge(&mut self, other: ResidualReport) {
        self.checks.extend(other.checks);
        for a in other.assumptions {
            self.assume(&a);
        }
        self.validity.extend(other.validity);
        self.summary.extend(other.summary);
    }

    pub fn assume(&mut self, hypothesis: &str) {
        if !self.assumptions.iter().any(|a| a == hypothesis) {
            self.assumptions.push(hypothesis.to_string());
        }
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn bound(&mut self, key: &str, value: impl Serialize) {
        self.validity.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// JSON document with sorted keys and a schema version.
    pub fn to_json(&self, command: &str, extra: BTreeMap<String, Value>) -> Value {
        let mut doc = json!({
            "schema": SCHEMA_VERSION,
            "command": command,
            "passed": self.passed(),
            "checks": self.checks,
            "assumptions": self.assumptions,
            "validity": self.validity,
            "summary": self.summary,
        });
        if let Value::Object(map) = &mut doc {
            map.extend(extra);
        }
        // round-trip through Value sorts every object's keys
        serde_json::from_str(&doc.to_string()).unwrap_or(doc)
    }
}

/// Serialized text for a report document; stable across runs.
pub fn render(doc: &Value) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("JSON values always serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_pass_is_conjunction() {
        let mut r = ResidualReport::new();
        assert!(r.passed());
        r.push(CheckRecord::new("a", "x", true, 0.0, 1.0, 1));
        assert!(r.passed());
        r.push(CheckRecord::new("b", "y", false, 2.0, 1.0, 1));
        assert!(!r.passed());
        assert_eq!(r.failures().count(), 1);
    }

    #[test]
    fn keys_are_sorted_and_schema_present() {
        let mut r = ResidualReport::new();
        r.push(CheckRecord::new("z", "anchor", true, 1e-12, 1e-8, 3).with("zeta", 1).with("alpha", 2));
        r.assume("connected fibers");
        let doc = r.to_json("validate", BTreeMap::new());
        assert_eq!(doc["schema"], 1);
        let text = render(&doc);
        assert!(text.find("\"alpha\"").unwrap() < text.find("\"zeta\"").unwrap());
        assert!(text.find("\"assumptions\"").unwrap() < text.find("\"checks\"").unwrap());
        assert_eq!(text, render(&r.to_json("validate", BTreeMap::new())));
    }
}
