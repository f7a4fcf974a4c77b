//! Reporting for the acceptance suite in `tests/acceptance.rs`.

use std::io::Write;
use std::time::{Duration, Instant};

/// Collects one verdict per criterion and prints it straight to stdout, so
/// the lines show up even when the test harness captures output.
#[derive(Default)]
pub struct Report {
    failed: Vec<String>,
    passed: usize,
}

impl Report {
    pub fn new() -> Self {
        // Starts a fresh line after the harness's "test acceptance ..." prefix.
        emit("");
        Self::default()
    }

    /// Run `check`, which returns (pass, details), and print its line.
    pub fn criterion(&mut self, name: &str, limit: Option<Duration>, check: impl FnOnce() -> (bool, String)) {
        let started = Instant::now();
        let (mut pass, details) = check();
        let took = started.elapsed();
        let mut timing = format!("{:.1}s", took.as_secs_f64());
        if let Some(limit) = limit {
            timing.push_str(&format!(" of {:.0}s allowed", limit.as_secs_f64()));
            pass &= took <= limit;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        emit(&format!("{verdict} {name}: {details} [{timing}]"));
        if pass {
            self.passed += 1;
        } else {
            self.failed.push(name.to_string());
        }
    }

    pub fn failed(&self) -> &[String] {
        &self.failed
    }

    pub fn summary(&self) -> String {
        format!("{} passed, {} failed", self.passed, self.failed.len())
    }
}

/// An indented detail line under the current criterion.
pub fn note(text: &str) {
    emit(&format!("     {text}"));
}

fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
