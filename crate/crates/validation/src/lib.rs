//! Acceptance criteria for the flow-policy SAC crates, run at desk scale.
//!
//! Every criterion is a function returning a [`Verdict`]: whether it held,
//! the measured numbers and the wall-clock time against its budget. The
//! `acceptance` test target runs them all and prints one line each.

pub mod criteria;
pub mod desk;

use std::fmt;
use std::time::{Duration, Instant};

use sacflow::Result;

/// Outcome of one criterion.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub criterion: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl Verdict {
    /// Measurements held and the run fit its time budget.
    pub fn holds(&self) -> bool {
        self.passed && self.elapsed <= self.budget
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: {} ({:.1} s of {} s)",
            if self.holds() { "PASS" } else { "FAIL" },
            self.criterion,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs()
        )
    }
}

/// Runs `check`, which returns whether the measurements held and a summary
/// of them, and times it.
pub fn timed(
    criterion: &'static str,
    budget: Duration,
    check: impl FnOnce() -> Result<(bool, String)>,
) -> Result<Verdict> {
    let start = Instant::now();
    let (passed, detail) = check()?;
    Ok(Verdict {
        criterion,
        passed,
        detail,
        elapsed: start.elapsed(),
        budget,
    })
}

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
