use std::time::{Duration, Instant};

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn pass(detail: impl Into<String>) -> Self {
        Self {
            passed: true,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            detail: detail.into(),
        }
    }

    pub fn check(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Run one criterion, enforce its wall-clock budget and print a single
/// PASS/FAIL line.
pub fn criterion(id: u32, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
        .unwrap_or_else(|_| Outcome::fail("panicked"));
    let elapsed = start.elapsed();
    let in_budget = elapsed <= budget;
    let passed = outcome.passed && in_budget;
    println!(
        "criterion {id} [{}] {title}: {} ({:.1}s of {}s budget{})",
        if passed { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_budget { "" } else { ", over budget" }
    );
    passed
}

/// A supporting check with no budget of its own, printed like a criterion.
pub fn example(name: &str, outcome: Outcome) -> bool {
    println!(
        "example {name} [{}]: {}",
        if outcome.passed { "PASS" } else { "FAIL" },
        outcome.detail
    );
    outcome.passed
}
