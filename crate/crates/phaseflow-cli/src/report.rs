use std::fs;
use std::path::Path;

use phaseflow::{Error, ErrorClass};
use serde::Serialize;
use serde_json::{json, Value};

/// One thresholded measurement.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub tolerance: f64,
    pub measured: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `measured <= tolerance`.
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Check { name: name.to_string(), tolerance, measured, pass: measured <= tolerance }
    }

    /// Passes when `measured >= tolerance`.
    pub fn at_least(name: &str, measured: f64, tolerance: f64) -> Self {
        Check { name: name.to_string(), tolerance, measured, pass: measured >= tolerance }
    }
}

/// Machine-readable outcome of one command; contains no timestamps.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub command: String,
    pub seed: u64,
    pub verdict: String,
    pub checks: Vec<Check>,
    pub details: Value,
}

impl Report {
    pub fn new(command: &str, seed: u64) -> Self {
        Report { command: command.to_string(), seed, verdict: String::new(), checks: Vec::new(), details: json!({}) }
    }

    pub fn push(&mut self, check: Check) {
        self.checks.push(check);
    }

    pub fn detail(&mut self, key: &str, value: Value) {
        if let Value::Object(m) = &mut self.details {
            m.insert(key.to_string(), value);
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Sets the verdict from the checks unless one was already given.
    pub fn finish(mut self) -> Self {
        if self.verdict.is_empty() {
            self.verdict = if self.passed() { "pass" } else { "fail" }.to_string();
        }
        self
    }

    pub fn failed(command: &str, seed: u64, err: &Error) -> Self {
        let class = match err.class() {
            ErrorClass::Input => "input",
            ErrorClass::Precondition => "precondition",
            ErrorClass::Numeric => "numeric",
        };
        let mut r = Report::new(command, seed);
        r.verdict = match err {
            Error::NotEquivalent(_) => "not-equivalent".to_string(),
            _ => "error".to_string(),
        };
        r.detail("error", json!({"class": class, "message": err.to_string()}));
        r
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out: Option<&Path>) -> std::io::Result<()> {
        match out {
            Some(dir) => fs::write(dir.join("report.json"), self.to_json()),
            None => {
                print!("{}", self.to_json());
                Ok(())
            }
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Input => 2,
        ErrorClass::Precondition => 3,
        ErrorClass::Numeric => 4,
    }
}
