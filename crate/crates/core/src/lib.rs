//! Combinatorial optimization heuristic for distributed agents (COHDA) with a
//! deterministic discrete-event network simulator.
//!
//! Each agent owns a set of candidate power schedules and picks one so that
//! the sum over all agents approximates a target profile. Agents only talk to
//! their overlay neighbors and converge without a central coordinator.

pub mod agent;
pub mod candidate;
pub mod evaluation;
pub mod flexibility;
pub mod model;
pub mod scenario;
pub mod simnet;
pub mod topology;
pub mod wire;

pub use agent::{Agent, AgentError, Envelope, KnowledgeMessage, WorkingMemory};
pub use candidate::Candidate;
pub use evaluation::{run_scenario, EvalError, RunResult};
pub use flexibility::{DeviceKind, DeviceModel, FlexError, FlexibilitySet};
pub use model::{
    AgentId, Metric, ModelError, PlanningHorizon, Problem, Schedule, SelectionRecord, SystemConfiguration,
    TargetProfile,
};
pub use scenario::{Instance, Scenario, ScenarioError, ScenarioFile, Seeds};
pub use simnet::{DelayDistribution, Limits, NetworkModel, SimOutcome, Simulation, StopReason};
pub use topology::{Overlay, TopologyError};
