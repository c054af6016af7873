use clap::ValueEnum;
use comp_attn::verify::{gradcheck_suite, invariant_suite, oracle_suite, reduction_suite};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    Oracle,
    Reduction,
    Invariants,
}

/// Fixed seed shared by every suite so reports are reproducible.
pub const VERIFY_SEED: u64 = 20_211_015;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub passed: bool,
    pub report: serde_json::Value,
}

/// Runs one suite at its standard size.
pub fn run_suite(suite: Suite) -> Result<SuiteOutcome, CliError> {
    fn pack<T: Serialize>(suite: Suite, passed: bool, report: &T) -> SuiteOutcome {
        SuiteOutcome {
            suite,
            passed,
            report: serde_json::to_value(report).expect("report serializes"),
        }
    }
    Ok(match suite {
        Suite::Gradcheck => {
            let r = gradcheck_suite(50, VERIFY_SEED)?;
            pack(suite, r.passed, &r)
        }
        Suite::Oracle => {
            let r = oracle_suite(10_000, 8, VERIFY_SEED)?;
            pack(suite, r.passed, &r)
        }
        Suite::Reduction => {
            let r = reduction_suite(100, 32, VERIFY_SEED)?;
            pack(suite, r.passed, &r)
        }
        Suite::Invariants => {
            let r = invariant_suite(VERIFY_SEED)?;
            pack(suite, r.passed, &r)
        }
    })
}
