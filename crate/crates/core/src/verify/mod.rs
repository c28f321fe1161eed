//! Independent oracles and the verification suite.
//!
//! Cases are named `module/property`; `run_suite(Some("granularity"))` runs
//! only the cases whose name contains the filter. Oracles live in
//! [`naive`] and share no code with the implementations they check.

mod cases;
pub mod gradcheck;
pub mod naive;

use std::fmt;
use std::time::Instant;

use serde::Serialize;

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub use gradcheck::{grad_check, Corrupted, GradCheckReport, Objective, TapeObjective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ScalarLoop,
    FiniteDiff,
    AlgebraicEquiv,
    PairedRun,
    Freeze,
    Determinism,
}

/// One executable property. `run` returns its metric, which must not
/// exceed `tolerance`, or a description of the violation.
#[derive(Clone, Copy)]
pub struct OracleCase {
    pub name: &'static str,
    pub kind: OracleKind,
    pub tolerance: f64,
    pub seed: u64,
    pub run: fn() -> Result<f64, String>,
}

impl OracleCase {
    pub(crate) fn new(
        name: &'static str,
        kind: OracleKind,
        tolerance: f64,
        seed: u64,
        run: fn() -> Result<f64, String>,
    ) -> Self {
        Self {
            name,
            kind,
            tolerance,
            seed,
            run,
        }
    }
}

impl fmt::Debug for OracleCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleCase")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("tolerance", &self.tolerance)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseOutcome {
    pub name: String,
    pub kind: OracleKind,
    pub passed: bool,
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CaseOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{}\t{status}\tmetric={:.3e}\ttol={:.1e}",
            self.name, self.metric, self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, "\t{}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Summary {
    pub outcomes: Vec<CaseOutcome>,
}

impl Summary {
    pub fn passed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.passed).count()
    }

    pub fn failed(&self) -> usize {
        self.outcomes.len() - self.passed()
    }

    pub fn success(&self) -> bool {
        self.failed() == 0
    }

    pub fn first_failures(&self, n: usize) -> Vec<&CaseOutcome> {
        self.outcomes.iter().filter(|o| !o.passed).take(n).collect()
    }
}

/// Every registered case.
pub fn cases() -> Vec<OracleCase> {
    cases::all()
}

pub fn run_case(case: &OracleCase) -> CaseOutcome {
    let start = Instant::now();
    let result = std::panic::catch_unwind(case.run);
    let (passed, metric, detail) = match result {
        Ok(Ok(m)) if m <= case.tolerance => (true, m, String::new()),
        Ok(Ok(m)) => (false, m, "metric above tolerance".into()),
        Ok(Err(e)) => (false, f64::NAN, e),
        Err(_) => (false, f64::NAN, "panicked".into()),
    };
    CaseOutcome {
        name: case.name.into(),
        kind: case.kind,
        passed,
        metric,
        tolerance: case.tolerance,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every case whose name contains `filter`.
pub fn run_suite(filter: Option<&str>) -> Summary {
    run_suite_with(filter, |_| {})
}

/// Like [`run_suite`], calling `report` after each case.
pub fn run_suite_with(filter: Option<&str>, mut report: impl FnMut(&CaseOutcome)) -> Summary {
    let mut outcomes = Vec::new();
    for case in cases() {
        if filter.is_some_and(|f| !case.name.contains(f)) {
            continue;
        }
        let out = run_case(&case);
        report(&out);
        outcomes.push(out);
    }
    Summary { outcomes }
}

/// Names of frozen tensors whose bits differ from `before`.
pub fn freeze_audit<T: Real>(before: &[Tensor<T>], store: &ParamStore<T>) -> Vec<String> {
    store
        .iter()
        .zip(before)
        .filter(|((_, e), b)| {
            !e.tensor.requires_grad()
                && (e.tensor.shape() != b.shape()
                    || e.tensor
                        .data()
                        .iter()
                        .zip(b.data())
                        .any(|(x, y)| x.as_f64().to_bits() != y.as_f64().to_bits()))
        })
        .map(|((_, e), _)| e.name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_names_are_unique_and_prefixed() {
        let all = cases();
        let mut names: Vec<&str> = all.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), all.len());
        let modules = [
            "tensor/",
            "granularity/",
            "modifications/",
            "backbone/",
            "harness/",
            "verify/",
        ];
        assert!(all
            .iter()
            .all(|c| modules.iter().any(|m| c.name.starts_with(m))));
    }

    #[test]
    fn unmatched_filter_is_vacuous_success() {
        let s = run_suite(Some("no-such-case"));
        assert!(s.outcomes.is_empty());
        assert!(s.success());
    }
}
