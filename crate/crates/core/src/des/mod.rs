//! Discrete-event simulation of the `G/GI/n+GI` queue.

mod aggregate;
mod model;
mod probe;
mod replication;
mod state;

pub use aggregate::{aggregate, Measure, Scaling, SimEstimate, StateHistogram};
pub use model::{QueueModel, SimConfig, SimError, SimMode};
pub use probe::{probe_virtual_wait, ProbeScratch, Snapshot};
pub use replication::{run_replication, run_replications, ReplicationStats};
pub use state::{init_state, EventKind, FlowCounts, StepRecord, SystemState};

/// Simulates and aggregates in one call.
pub fn simulate(model: &QueueModel, config: &SimConfig, measures: &[Measure]) -> Result<Vec<SimEstimate>, SimError> {
    let stats = run_replications(model, config)?;
    aggregate(model, &stats, measures)
}
