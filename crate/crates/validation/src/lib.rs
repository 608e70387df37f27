//! Pass/fail bookkeeping for the acceptance target.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Check {
    pub id: String,
    pub title: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

/// Collects sub-checks for a single criterion.
#[derive(Debug, Default)]
pub struct Findings {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Findings {
    /// Records `label` with its measured value and bound; fails unless `ok`.
    pub fn expect(&mut self, ok: bool, label: impl Into<String>) {
        let label = label.into();
        if !ok {
            self.failures.push(label.clone());
        }
        self.notes.push(label);
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        if self.passed() {
            self.notes.join("; ")
        } else {
            format!("failed: {}", self.failures.join("; "))
        }
    }
}

/// Runs `f`, timing it.
pub fn run(id: &str, title: &str, f: impl FnOnce(&mut Findings)) -> Check {
    let start = Instant::now();
    let mut findings = Findings::default();
    f(&mut findings);
    Check {
        id: id.to_string(),
        title: title.to_string(),
        passed: findings.passed(),
        detail: findings.summary(),
        elapsed: start.elapsed(),
    }
}

impl Check {
    pub fn line(&self) -> String {
        let mut s = String::new();
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = write!(
            s,
            "criterion {:<3} {:<38} {verdict}  [{:.1}s] {}",
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.detail
        );
        s
    }
}
