//! Distributed economic dispatch with quadratic transmission losses and
//! priority-ordered load shedding, simulated as lockstep multi-agent rounds.
//!
//! Every bus hosts an agent that only talks to its graph neighbors. The
//! crate provides the per-agent update rules, round-based runners, a
//! centralized reference solver for each problem, and the staged pipeline
//! that discovers the priority depth, sizes the required shedding and then
//! dispatches generation and shedding together.

pub mod algorithm;
pub mod consensus;
pub mod edp;
pub mod error;
pub mod feasibility;
pub mod graph;
pub mod oracle;
pub mod power;
pub mod random;
pub mod scenario;
pub mod shed;
pub mod step;
pub mod trace;

pub use error::{Error, Result, Stage};
pub use graph::{build_graph, metropolis_weights, mix, Graph, MixingMatrix};
pub use power::{
    balance_residual, compute_u_bound, cost_value_and_slope, evaluate_loss, factor_loss_matrix,
    local_loss_column, BusSpec, LossModel, UBound,
};
pub use step::{StepSchedule, StopRule};
pub use trace::{emit_trace, IterationTrace};
