//! Acceptance checks for the detector. Each module computes raw results;
//! the `acceptance` test target turns them into pass/fail lines.

pub mod determinism;
pub mod experiments;
pub mod gradients;
pub mod oracles;
pub mod sampler;

/// Verdict for one criterion.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub id: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(id: &'static str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            id,
            passed,
            detail: detail.into(),
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}
