//! Reporting helpers for the end-to-end acceptance suite.

use std::fmt;
use std::time::{Duration, Instant};

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub id: usize,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {:<34} {}  ({:.1}s) {}",
            self.id,
            self.title,
            if self.pass { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Runs one check, timing it and turning errors and panics into failures.
pub fn run<F>(id: usize, title: &'static str, check: F) -> Verdict
where
    F: FnOnce() -> Result<(bool, String), String> + std::panic::UnwindSafe,
{
    let start = Instant::now();
    let (pass, detail) = match std::panic::catch_unwind(check) {
        Ok(Ok(outcome)) => outcome,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    Verdict {
        id,
        title,
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Relative error with a floor on the denominator, so coordinates whose
/// true gradient is zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
