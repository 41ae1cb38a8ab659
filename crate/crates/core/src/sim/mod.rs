//! Deterministic discrete-event simulation, adversaries, event log and the
//! post-run security auditor.

pub mod adversary;
pub mod audit;
pub mod engine;
pub mod fuzz;
pub mod gen;
pub mod log;
pub mod report;
pub mod scenario;

pub use audit::{audit, knowledge_set, AuditError, AuditReport, Knowledge, PropertyVerdict};
pub use engine::{run, SimError};
pub use log::{Event, EventKind, EventLog, LogError, PayloadDigest};
pub use report::report;
pub use scenario::{Action, Behavior, Expectation, Fault, Field, Mutation, Placement, Scenario, ScenarioError};
