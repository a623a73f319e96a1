//! Scenario files and their resolution into runnable instances.
//!
//! A scenario file is TOML. Unknown keys are rejected, and parse errors carry
//! line and column information. The members of the coalition are listed in
//! three blocks, assigned agent ids in this order: thermal `devices`
//! templates, explicit `agents` with literal schedule sets, and `synthetic`
//! agents with random integer-valued schedules.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError};
use crate::flexibility::{sample_feasible_schedules, DeviceKind, DeviceModel, FlexError, FlexibilitySet};
use crate::model::{AgentId, Metric, ModelError, PlanningHorizon, Problem, Schedule, TargetProfile};
use crate::simnet::{Limits, NetworkModel};
use crate::topology::{self, Overlay, TopologyError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown builtin scenario {0:?}")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("agent {agent}: {source}")]
    Flexibility { agent: AgentId, source: FlexError },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonBlock {
    pub intervals: usize,
    pub interval_hours: f64,
    /// First window interval (inclusive); used with `window_end`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<usize>,
    /// Last window interval (exclusive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_end: Option<usize>,
    /// Explicit window interval list; exclusive with start/end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetBlock {
    /// Constant power over the window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// One value per interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub metric: Metric,
}

/// Per-device parameter changes inside a template.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceOverride {
    /// Position within the template, `0..count`.
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_el_on: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal_on: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tank_capacity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_initial: Option<f64>,
}

/// `count` identical thermal devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceTemplate {
    pub kind: DeviceKind,
    pub count: usize,
    pub p_el_on: f64,
    pub thermal_on: f64,
    pub tank_capacity: f64,
    pub loss_rate: f64,
    pub ambient: f64,
    /// Constant thermal draw, kW.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<f64>,
    /// Per-interval thermal draw, kW; exclusive with `demand`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand_profile: Option<Vec<f64>>,
    pub temp_min: f64,
    pub temp_max: f64,
    /// Defaults to the midpoint of the bounds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_initial: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<DeviceOverride>,
}

/// An agent with a literal schedule set, optionally repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitAgent {
    pub schedules: Vec<Vec<f64>>,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

/// Agents whose schedules are random integers in `[min_power, max_power]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticAgents {
    pub count: usize,
    pub schedules: usize,
    pub min_power: i64,
    pub max_power: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyFamily {
    Ring,
    Complete,
    SmallWorld,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyBlock {
    pub family: TopologyFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(u32, u32)>>,
}

impl Default for TopologyBlock {
    fn default() -> Self {
        Self {
            family: TopologyFamily::SmallWorld,
            k: None,
            p: None,
            edges: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingBlock {
    pub count: usize,
    pub max_attempts: usize,
}

impl Default for SamplingBlock {
    fn default() -> Self {
        Self {
            count: 200,
            max_attempts: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub sampling: u64,
    pub topology: u64,
    pub network: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_master(0)
    }
}

impl Seeds {
    /// Independent sub-seeds derived from one run seed. They are kept below
    /// 2^63 so that they round-trip through TOML integers.
    pub fn from_master(seed: u64) -> Self {
        Self {
            sampling: mix(seed, 1) >> 1,
            topology: mix(seed, 2) >> 1,
            network: mix(seed, 3) >> 1,
        }
    }
}

/// SplitMix64 finalizer over `seed` and a stream number.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: String,
    pub horizon: HorizonBlock,
    pub target: TargetBlock,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub devices: Vec<DeviceTemplate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<ExplicitAgent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synthetic: Vec<SyntheticAgents>,
    #[serde(default)]
    pub topology: TopologyBlock,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub sampling: SamplingBlock,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub limits: Limits,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario files serialize")
    }

    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        Scenario::from_file(self)
    }
}

/// One coalition member and where its schedule set comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum Member {
    Device(DeviceModel),
    Fixed(Vec<Schedule>),
    Synthetic {
        schedules: usize,
        min_power: i64,
        max_power: i64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub problem: Problem,
    pub members: Vec<Member>,
    pub topology: TopologyBlock,
    pub network: NetworkModel,
    pub sampling: SamplingBlock,
    pub seeds: Seeds,
    pub limits: Limits,
}

impl Scenario {
    pub fn from_file(file: &ScenarioFile) -> Result<Self, ScenarioError> {
        let horizon = resolve_horizon(&file.horizon)?;
        let target = match (&file.target.value, &file.target.values) {
            (Some(v), None) => TargetProfile::constant_on_window(*v, &horizon)?,
            (None, Some(vs)) => TargetProfile::new(vs.clone(), &horizon)?,
            _ => return invalid("target needs exactly one of `value` or `values`"),
        };
        let problem = Problem::new(horizon, target)?.with_metric(file.target.metric);
        let t = problem.horizon.interval_count();

        let mut members = Vec::new();
        for (ti, tpl) in file.devices.iter().enumerate() {
            for i in 0..tpl.count {
                let device = device_from_template(tpl, i, t)
                    .map_err(|m| ScenarioError::Invalid(format!("devices[{ti}]: {m}")))?;
                device
                    .validate(&problem.horizon)
                    .map_err(|e| ScenarioError::Invalid(format!("devices[{ti}] #{i}: {e}")))?;
                members.push(Member::Device(device));
            }
            if let Some(o) = tpl.overrides.iter().find(|o| o.index >= tpl.count) {
                return invalid(format!(
                    "devices[{ti}]: override index {} >= count {}",
                    o.index, tpl.count
                ));
            }
        }
        for (ai, a) in file.agents.iter().enumerate() {
            if a.schedules.is_empty() {
                return invalid(format!("agents[{ai}]: empty schedule set"));
            }
            let set = a
                .schedules
                .iter()
                .map(|s| {
                    if s.len() != t {
                        return invalid(format!(
                            "agents[{ai}]: schedule of length {} in a horizon of {t}",
                            s.len()
                        ));
                    }
                    Ok(Schedule::new(s.clone())?)
                })
                .collect::<Result<Vec<_>, _>>()?;
            members.extend(std::iter::repeat_n(Member::Fixed(set), a.count));
        }
        for (si, s) in file.synthetic.iter().enumerate() {
            if s.schedules == 0 || s.min_power > s.max_power {
                return invalid(format!(
                    "synthetic[{si}]: needs schedules >= 1 and min_power <= max_power"
                ));
            }
            members.extend(std::iter::repeat_n(
                Member::Synthetic {
                    schedules: s.schedules,
                    min_power: s.min_power,
                    max_power: s.max_power,
                },
                s.count,
            ));
        }
        if members.is_empty() {
            return invalid("scenario has no members");
        }
        file.network
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if file.sampling.count == 0 {
            return invalid("sampling.count must be at least 1");
        }
        Ok(Self {
            name: file.name.clone(),
            problem,
            members,
            topology: file.topology.clone(),
            network: file.network.clone(),
            sampling: file.sampling,
            seeds: file.seeds,
            limits: file.limits,
        })
    }

    pub fn agent_ids(&self) -> Vec<AgentId> {
        (0..self.members.len() as u32).map(AgentId).collect()
    }

    pub fn build_overlay(&self, seed: u64) -> Result<Overlay, ScenarioError> {
        let ids = self.agent_ids();
        let tb = &self.topology;
        Ok(match tb.family {
            TopologyFamily::Ring => topology::ring(&ids)?,
            TopologyFamily::Complete => topology::complete(&ids)?,
            TopologyFamily::SmallWorld => {
                let p = tb.p.unwrap_or(0.1);
                // Without an explicit degree, small coalitions get the largest
                // even degree below their size, up to 4.
                let k = match tb.k {
                    Some(k) => k,
                    None if ids.len() <= 2 => return Ok(topology::complete(&ids)?),
                    None => 4.min((ids.len() - 1) & !1),
                };
                topology::small_world(&ids, k, p, seed)?
            }
            TopologyFamily::Explicit => {
                let Some(edges) = &tb.edges else {
                    return invalid("explicit topology needs `edges`");
                };
                let o = Overlay::from_edges(&ids, edges.iter().map(|&(a, b)| (AgentId(a), AgentId(b))))?;
                if !o.is_connected() {
                    return invalid("explicit topology is not connected");
                }
                o
            }
        })
    }

    /// Samples every member's schedule set and builds the overlay.
    pub fn instantiate(&self, seeds: &Seeds) -> Result<Instance, ScenarioError> {
        let horizon = &self.problem.horizon;
        let sets: Vec<(Vec<Schedule>, Option<FlexibilitySet>)> = self
            .members
            .par_iter()
            .enumerate()
            .map(|(i, m)| {
                let seed = mix(seeds.sampling, i as u64);
                match m {
                    Member::Device(d) => {
                        let flex = sample_feasible_schedules(
                            d,
                            self.sampling.count,
                            horizon,
                            seed,
                            self.sampling.max_attempts,
                        )
                        .map_err(|source| ScenarioError::Flexibility {
                            agent: AgentId(i as u32),
                            source,
                        })?;
                        Ok((flex.schedules.clone(), Some(flex)))
                    }
                    Member::Fixed(s) => Ok((s.clone(), None)),
                    &Member::Synthetic {
                        schedules,
                        min_power,
                        max_power,
                    } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let set = (0..schedules)
                            .map(|_| {
                                let v = (0..horizon.interval_count())
                                    .map(|_| rng.random_range(min_power..=max_power) as f64)
                                    .collect();
                                Schedule::new(v).expect("integers are finite")
                            })
                            .collect();
                        Ok((set, None))
                    }
                }
            })
            .collect::<Result<_, ScenarioError>>()?;
        let (schedule_sets, flexibility) = sets.into_iter().unzip();
        Ok(Instance {
            problem: self.problem.clone(),
            schedule_sets,
            flexibility,
            overlay: self.build_overlay(seeds.topology)?,
        })
    }
}

fn resolve_horizon(h: &HorizonBlock) -> Result<PlanningHorizon, ScenarioError> {
    let window: Vec<usize> = match (&h.window, h.window_start, h.window_end) {
        (Some(list), None, None) => list.clone(),
        (None, start, end) => (start.unwrap_or(0)..end.unwrap_or(h.intervals)).collect(),
        _ => return invalid("horizon: `window` is exclusive with `window_start`/`window_end`"),
    };
    Ok(PlanningHorizon::new(h.intervals, h.interval_hours, window)?)
}

fn device_from_template(tpl: &DeviceTemplate, i: usize, t: usize) -> Result<DeviceModel, String> {
    let mut demand = match (&tpl.demand, &tpl.demand_profile) {
        (Some(d), None) => vec![*d; t],
        (None, Some(p)) => p.clone(),
        _ => return Err("needs exactly one of `demand` or `demand_profile`".into()),
    };
    let mut d = DeviceModel {
        kind: tpl.kind,
        p_el_on: tpl.p_el_on,
        thermal_on: tpl.thermal_on,
        tank_capacity: tpl.tank_capacity,
        loss_rate: tpl.loss_rate,
        ambient: tpl.ambient,
        demand: Vec::new(),
        temp_min: tpl.temp_min,
        temp_max: tpl.temp_max,
        temp_initial: tpl.temp_initial.unwrap_or((tpl.temp_min + tpl.temp_max) / 2.0),
    };
    for o in tpl.overrides.iter().filter(|o| o.index == i) {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut d.p_el_on, o.p_el_on);
        set(&mut d.thermal_on, o.thermal_on);
        set(&mut d.tank_capacity, o.tank_capacity);
        set(&mut d.loss_rate, o.loss_rate);
        set(&mut d.temp_min, o.temp_min);
        set(&mut d.temp_max, o.temp_max);
        set(&mut d.temp_initial, o.temp_initial);
        if let Some(v) = o.demand {
            demand = vec![v; t];
        }
    }
    d.demand = demand;
    Ok(d)
}

/// A scenario with every random choice made: schedule sets and overlay.
#[derive(Debug, Clone)]
pub struct Instance {
    pub problem: Problem,
    pub schedule_sets: Vec<Vec<Schedule>>,
    /// Device model and on/off patterns for thermal members.
    pub flexibility: Vec<Option<FlexibilitySet>>,
    pub overlay: Overlay,
}

impl Instance {
    /// Fresh, unstarted agents wired to the overlay.
    pub fn agents(&self) -> Result<Vec<Agent>, AgentError> {
        self.schedule_sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let id = AgentId(i as u32);
                Ok(Agent::new(
                    id,
                    set.clone(),
                    self.problem.horizon.clone(),
                    self.overlay.neighbors(id).to_vec(),
                )?
                .with_metric(self.problem.metric))
            })
            .collect()
    }
}

pub const EPEX_PEAKLOAD: &str = "epex-peakload";
pub const TOY_TWO_AGENT: &str = "toy-two-agent";

/// Day-ahead peak-load block: 111 heat pumps (-2 kW), 4 CHP units (1 kW)
/// and 8 CHP units (5 kW) asked for -100 kW from 09:00 to 21:00 at
/// quarter-hour resolution.
pub fn epex_peakload_file() -> ScenarioFile {
    let template =
        |kind, count, p_el_on: f64, thermal_on: f64, demand: f64, temp_min: f64, temp_max: f64| DeviceTemplate {
            kind,
            count,
            p_el_on,
            thermal_on,
            tank_capacity: 0.581,
            loss_rate: 0.01,
            ambient: 20.0,
            demand: Some(demand),
            demand_profile: None,
            temp_min,
            temp_max,
            temp_initial: None,
            overrides: Vec::new(),
        };
    ScenarioFile {
        name: EPEX_PEAKLOAD.into(),
        horizon: HorizonBlock {
            intervals: 96,
            interval_hours: 0.25,
            window_start: Some(36),
            window_end: Some(84),
            window: None,
        },
        target: TargetBlock {
            value: Some(-100.0),
            values: None,
            metric: Metric::L1,
        },
        devices: vec![
            template(DeviceKind::HeatPump, 111, -2.0, 8.0, EPEX_HEAT_PUMP_DEMAND, 40.0, 50.0),
            template(DeviceKind::Chp, 4, 1.0, 2.5, EPEX_SMALL_CHP_DEMAND, 50.0, 70.0),
            template(DeviceKind::Chp, 8, 5.0, 12.5, EPEX_LARGE_CHP_DEMAND, 50.0, 70.0),
        ],
        agents: Vec::new(),
        synthetic: Vec::new(),
        topology: TopologyBlock::default(),
        network: NetworkModel::default(),
        sampling: SamplingBlock::default(),
        seeds: Seeds::default(),
        limits: Limits::default(),
    }
}

/// Thermal draw of each heat-pump tank, kW. Sized so the pool runs at about
/// half duty and the uncoordinated aggregate sits near the target.
pub const EPEX_HEAT_PUMP_DEMAND: f64 = 4.0;
/// Thermal draw of each 1 kW CHP tank, kW.
pub const EPEX_SMALL_CHP_DEMAND: f64 = 1.0;
/// Thermal draw of each 5 kW CHP tank, kW.
pub const EPEX_LARGE_CHP_DEMAND: f64 = 5.0;

/// The peak-load scenario with all sub-seeds derived from `seed`.
pub fn build_epex_scenario(seed: u64) -> Scenario {
    let mut file = epex_peakload_file();
    file.seeds = Seeds::from_master(seed);
    Scenario::from_file(&file).expect("builtin scenario is valid")
}

/// Two agents, `{1, 2}` and `{1, 3}`, asked for 4 in a single interval.
pub fn toy_two_agent_file() -> ScenarioFile {
    ScenarioFile {
        name: TOY_TWO_AGENT.into(),
        horizon: HorizonBlock {
            intervals: 1,
            interval_hours: 1.0,
            window_start: None,
            window_end: None,
            window: None,
        },
        target: TargetBlock {
            value: Some(4.0),
            values: None,
            metric: Metric::L1,
        },
        devices: Vec::new(),
        agents: vec![
            ExplicitAgent {
                schedules: vec![vec![1.0], vec![2.0]],
                count: 1,
            },
            ExplicitAgent {
                schedules: vec![vec![1.0], vec![3.0]],
                count: 1,
            },
        ],
        synthetic: Vec::new(),
        topology: TopologyBlock {
            family: TopologyFamily::Complete,
            k: None,
            p: None,
            edges: None,
        },
        network: NetworkModel::constant(1.0),
        sampling: SamplingBlock::default(),
        seeds: Seeds::default(),
        limits: Limits::default(),
    }
}

pub fn builtin_scenario(name: &str) -> Result<ScenarioFile, ScenarioError> {
    match name {
        EPEX_PEAKLOAD => Ok(epex_peakload_file()),
        TOY_TWO_AGENT => Ok(toy_two_agent_file()),
        other => Err(ScenarioError::UnknownBuiltin(other.into())),
    }
}
