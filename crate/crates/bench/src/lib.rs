//! Fixtures shared by the benchmarks.

use cohda_core::agent::{Agent, KnowledgeMessage};
use cohda_core::flexibility::{sample_feasible_schedules, DeviceModel};
use cohda_core::model::{AgentId, PlanningHorizon, TargetProfile};
use cohda_core::scenario::{
    epex_peakload_file, toy_two_agent_file, Member, ScenarioFile, SyntheticAgents, TopologyFamily,
};

/// The first heat pump of the peak-load scenario and its horizon.
pub fn heat_pump() -> (DeviceModel, PlanningHorizon) {
    let scenario = epex_peakload_file().resolve().expect("builtin scenario");
    let device = scenario
        .members
        .iter()
        .find_map(|m| match m {
            Member::Device(d) => Some(d.clone()),
            _ => None,
        })
        .expect("scenario has devices");
    (device, scenario.problem.horizon.clone())
}

fn heat_pump_agent(count: usize, neighbors: Vec<AgentId>) -> (Agent, TargetProfile) {
    let (device, horizon) = heat_pump();
    let set = sample_feasible_schedules(&device, count, &horizon, 1, 1_000_000).expect("feasible set");
    let target = TargetProfile::constant_on_window(-100.0, &horizon).expect("valid target");
    let agent = Agent::new(AgentId(0), set.schedules, horizon, neighbors).expect("non-empty set");
    (agent, target)
}

/// A started heat-pump agent with `count` schedules and no neighbors.
pub fn started_agent(count: usize) -> Agent {
    let (mut agent, target) = heat_pump_agent(count, Vec::new());
    agent.handle_start(target).expect("start");
    agent
}

/// The message a heat-pump agent publishes when it starts.
pub fn start_message() -> KnowledgeMessage {
    let (mut agent, target) = heat_pump_agent(1, vec![AgentId(1)]);
    let mut out = agent.handle_start(target).expect("start");
    out.pop().expect("one neighbor").message
}

/// `n` synthetic agents on the given overlay family.
pub fn synthetic(n: usize, family: TopologyFamily) -> ScenarioFile {
    let mut f = toy_two_agent_file();
    f.name = format!("synthetic-{n}");
    f.horizon.intervals = 8;
    f.target.value = Some(2.0 * n as f64);
    f.agents.clear();
    f.synthetic = vec![SyntheticAgents {
        count: n,
        schedules: 12,
        min_power: -4,
        max_power: 6,
    }];
    f.topology.family = family;
    f.network = Default::default();
    f
}
