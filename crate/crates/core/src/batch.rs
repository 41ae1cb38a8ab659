//! Data-parallel runners for scenario sweeps and Monte Carlo trials.
//!
//! Every unit of work owns its own state, so results do not depend on the
//! execution order. With the `parallel` feature the work is spread over the
//! rayon pool; without it, or through [`map_sequential`], it runs in order
//! on the calling thread.

use thiserror::Error;

use crate::sim::fuzz::{fuzz_trial, TrialOutcome};
use crate::sim::{audit, run, AuditError, AuditReport, EventLog, Scenario, SimError};

/// Applies `f` to every item in order on the calling thread.
pub fn map_sequential<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// Applies `f` to every item, in parallel when the `parallel` feature is on.
/// The output order matches the input order either way.
#[cfg(feature = "parallel")]
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    map_sequential(items, f)
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

/// One scenario's log and audit.
pub fn run_and_audit(sc: &Scenario) -> Result<(EventLog, AuditReport), BatchError> {
    let log = run(sc)?;
    let report = audit(&log)?;
    Ok((log, report))
}

pub fn run_scenarios(scs: &[Scenario]) -> Vec<Result<(EventLog, AuditReport), BatchError>> {
    map(scs, run_and_audit)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuzzSummary {
    pub trials: usize,
    /// Trials in which a mutation was actually applied.
    pub mutated: usize,
    /// Seeds of trials that failed.
    pub failures: Vec<u64>,
}

/// Runs trials `first..first + n`, mutated or controls.
pub fn fuzz_trials(first: u64, n: u64, mutate: bool) -> FuzzSummary {
    let seeds: Vec<u64> = (first..first + n).collect();
    summarize(&seeds, &map(&seeds, |s| fuzz_trial(*s, mutate)))
}

pub fn fuzz_trials_sequential(first: u64, n: u64, mutate: bool) -> FuzzSummary {
    let seeds: Vec<u64> = (first..first + n).collect();
    summarize(&seeds, &map_sequential(&seeds, |s| fuzz_trial(*s, mutate)))
}

fn summarize(seeds: &[u64], outcomes: &[TrialOutcome]) -> FuzzSummary {
    FuzzSummary {
        trials: outcomes.len(),
        mutated: outcomes.iter().filter(|o| o.mutation.is_some()).count(),
        failures: seeds
            .iter()
            .zip(outcomes)
            .filter(|(_, o)| !o.pass())
            .map(|(s, _)| *s)
            .collect(),
    }
}
