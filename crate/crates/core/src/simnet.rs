//! Deterministic discrete-event network carrying [`KnowledgeMessage`]s
//! between agents.
//!
//! Events are processed in `(time, sequence number)` order. Every random draw
//! (drop, duplicate, delay) comes from one seeded generator, so a given
//! scenario and seed always produce the same trace.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError, KnowledgeMessage};
use crate::candidate::{compare, Candidate};
use crate::model::{AgentId, TargetProfile};
use crate::topology::Overlay;
use crate::wire;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid network model: {0}")]
    Network(String),
    #[error("invalid limits: {0}")]
    Limits(String),
    #[error("overlay and agents disagree: {0}")]
    Overlay(String),
    #[error("no agent has been started")]
    NotStarted,
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Message latency in simulated seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayDistribution {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
}

impl Default for DelayDistribution {
    fn default() -> Self {
        DelayDistribution::Uniform { lo: 0.01, hi: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    #[serde(default)]
    pub delay: DelayDistribution,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub duplicate_probability: f64,
    /// Upper bound on any single delivery delay; samples above it are clamped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_delay_bound: Option<f64>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            delay: DelayDistribution::default(),
            drop_probability: 0.0,
            duplicate_probability: 0.0,
            max_delay_bound: None,
        }
    }
}

impl NetworkModel {
    pub fn constant(delay: f64) -> Self {
        Self {
            delay: DelayDistribution::Constant { value: delay },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Network(m));
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        match self.delay {
            DelayDistribution::Constant { value } if !nonneg(value) => {
                return bad(format!("constant delay {value} must be finite and >= 0"))
            }
            DelayDistribution::Uniform { lo, hi } if !(nonneg(lo) && nonneg(hi) && lo <= hi) => {
                return bad(format!("uniform delay needs 0 <= lo <= hi, got [{lo}, {hi}]"))
            }
            DelayDistribution::Exponential { mean } if !(mean.is_finite() && mean > 0.0) => {
                return bad(format!("exponential mean {mean} must be positive"))
            }
            _ => {}
        }
        for (name, p) in [
            ("drop_probability", self.drop_probability),
            ("duplicate_probability", self.duplicate_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if let Some(b) = self.max_delay_bound {
            if !nonneg(b) {
                return bad(format!("max_delay_bound {b} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Whether deliveries can overtake each other.
    pub fn reorders(&self) -> bool {
        !matches!(self.delay, DelayDistribution::Constant { .. }) || self.duplicate_probability > 0.0
    }

    fn sample_delay(&self, rng: &mut ChaCha8Rng) -> f64 {
        let d = match self.delay {
            DelayDistribution::Constant { value } => value,
            DelayDistribution::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            DelayDistribution::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
        };
        match self.max_delay_bound {
            Some(b) => d.min(b),
            None => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub max_sim_time: f64,
    pub max_messages: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_sim_time: 1.0e6,
            max_messages: 50_000_000,
        }
    }
}

impl Limits {
    fn validate(&self) -> Result<(), SimError> {
        if self.max_sim_time.is_nan() || self.max_sim_time <= 0.0 || self.max_messages == 0 {
            return Err(SimError::Limits(format!("{self:?} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Start {
        agent: AgentId,
    },
    Publish {
        from: AgentId,
        to: AgentId,
        bytes: u64,
    },
    Drop {
        from: AgentId,
        to: AgentId,
    },
    Duplicate {
        from: AgentId,
        to: AgentId,
    },
    Deliver {
        from: AgentId,
        to: AgentId,
    },
    BestImproved {
        agent: AgentId,
        size: usize,
        fitness: f64,
        key: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    #[serde(flatten)]
    pub kind: TraceKind,
}

pub type EventTrace = Vec<TraceEvent>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClockStats {
    /// Simulated time of the last processed event.
    pub termination_time: f64,
    /// Real seconds spent in the event loop.
    pub wall_time: f64,
}

/// A point of the global best-so-far curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time: f64,
    pub fitness: f64,
    pub size: usize,
}

enum Pending {
    Start(AgentId),
    Deliver {
        from: AgentId,
        to: AgentId,
        message: KnowledgeMessage,
    },
}

struct Scheduled {
    time: f64,
    seq: u64,
    event: Pending,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap and the earliest event must pop first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Why the event loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Quiescent,
    SimTimeLimit,
    MessageLimit,
}

/// An in-progress simulation. Use [`run`] unless intermediate states are
/// needed.
pub struct Simulation {
    agents: Vec<Agent>,
    index: BTreeMap<AgentId, usize>,
    target: TargetProfile,
    network: NetworkModel,
    limits: Limits,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    trace: EventTrace,
    curve: Vec<CurvePoint>,
    global_best: Option<Arc<Candidate>>,
    messages_sent: u64,
    message_bytes_total: u64,
    stopped: Option<StopReason>,
    wall: f64,
}

impl Simulation {
    /// Wires `agents` to `overlay` and schedules a start event for each agent
    /// at time zero, in ascending id order.
    pub fn new(
        mut agents: Vec<Agent>,
        overlay: &Overlay,
        target: TargetProfile,
        network: NetworkModel,
        seed: u64,
        limits: Limits,
    ) -> Result<Self, SimError> {
        network.validate()?;
        limits.validate()?;
        agents.sort_by_key(Agent::id);
        let index: BTreeMap<AgentId, usize> = agents.iter().enumerate().map(|(i, a)| (a.id(), i)).collect();
        if index.len() != agents.len() {
            return Err(SimError::Overlay("duplicate agent ids".into()));
        }
        let mut overlay_ids = overlay.node_ids().to_vec();
        overlay_ids.sort();
        if overlay_ids != index.keys().copied().collect::<Vec<_>>() {
            return Err(SimError::Overlay("node ids differ from agent ids".into()));
        }
        for a in &mut agents {
            a.set_neighbors(overlay.neighbors(a.id()).to_vec());
        }
        let mut sim = Self {
            agents,
            index,
            target,
            network,
            limits,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            trace: Vec::new(),
            curve: Vec::new(),
            global_best: None,
            messages_sent: 0,
            message_bytes_total: 0,
            stopped: None,
            wall: 0.0,
        };
        for id in sim.index.keys().copied().collect::<Vec<_>>() {
            sim.schedule(0.0, Pending::Start(id));
        }
        Ok(sim)
    }

    fn schedule(&mut self, time: f64, event: Pending) {
        self.queue.push(Scheduled {
            time,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    pub fn stopped(&self) -> Option<StopReason> {
        self.stopped
    }

    /// Processes the next event. Returns `Ok(false)` once the run has stopped.
    pub fn step(&mut self) -> Result<bool, SimError> {
        if self.stopped.is_some() {
            return Ok(false);
        }
        let started = Instant::now();
        let result = self.step_inner();
        self.wall += started.elapsed().as_secs_f64();
        result
    }

    fn step_inner(&mut self) -> Result<bool, SimError> {
        let Some(next) = self.queue.peek() else {
            self.stopped = Some(StopReason::Quiescent);
            return Ok(false);
        };
        if next.time > self.limits.max_sim_time {
            self.stopped = Some(StopReason::SimTimeLimit);
            return Ok(false);
        }
        let Scheduled { time, event, .. } = self.queue.pop().expect("peeked");
        self.now = time;

        let (agent_id, outgoing) = match event {
            Pending::Start(id) => {
                self.trace.push(TraceEvent {
                    time,
                    kind: TraceKind::Start { agent: id },
                });
                let target = self.target.clone();
                let agent = &mut self.agents[self.index[&id]];
                let before = agent.best().cloned();
                let out = agent.handle_start(target)?;
                self.note_best(id, before);
                (id, out)
            }
            Pending::Deliver { from, to, message } => {
                self.trace.push(TraceEvent {
                    time,
                    kind: TraceKind::Deliver { from, to },
                });
                let agent = &mut self.agents[self.index[&to]];
                let before = agent.best().cloned();
                let out = agent.handle_message(&message)?;
                self.note_best(to, before);
                (to, out)
            }
        };

        for envelope in outgoing {
            if self.messages_sent >= self.limits.max_messages {
                self.stopped = Some(StopReason::MessageLimit);
                return Ok(false);
            }
            let (from, to) = (agent_id, envelope.to);
            let bytes = wire::encoded_len(&envelope.message) as u64;
            self.messages_sent += 1;
            self.message_bytes_total += bytes;
            self.trace.push(TraceEvent {
                time,
                kind: TraceKind::Publish { from, to, bytes },
            });
            // Fixed draw order per message keeps streams aligned across models.
            let dropped = self.rng.random::<f64>() < self.network.drop_probability;
            let duplicated = self.rng.random::<f64>() < self.network.duplicate_probability;
            if dropped {
                self.trace.push(TraceEvent {
                    time,
                    kind: TraceKind::Drop { from, to },
                });
                continue;
            }
            let copies = if duplicated {
                self.trace.push(TraceEvent {
                    time,
                    kind: TraceKind::Duplicate { from, to },
                });
                2
            } else {
                1
            };
            for _ in 0..copies {
                let delay = self.network.sample_delay(&mut self.rng);
                self.schedule(
                    time + delay,
                    Pending::Deliver {
                        from,
                        to,
                        message: envelope.message.clone(),
                    },
                );
            }
        }
        Ok(true)
    }

    fn note_best(&mut self, id: AgentId, before: Option<Arc<Candidate>>) {
        let agent = &self.agents[self.index[&id]];
        let Some(after) = agent.best() else { return };
        if before.as_ref().is_some_and(|b| Arc::ptr_eq(b, after)) {
            return;
        }
        self.trace.push(TraceEvent {
            time: self.now,
            kind: TraceKind::BestImproved {
                agent: id,
                size: after.size(),
                fitness: after.fitness(),
                key: after.key(),
            },
        });
        if self.global_best.as_ref().is_none_or(|g| after.beats(g)) {
            self.global_best = Some(after.clone());
            self.curve.push(CurvePoint {
                time: self.now,
                fitness: after.fitness(),
                size: after.size(),
            });
        }
    }

    /// Runs until quiescence or a limit.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        Ok(())
    }

    pub fn finish(self) -> SimOutcome {
        SimOutcome {
            stop: self.stopped.unwrap_or(StopReason::Quiescent),
            agents: self.agents,
            trace: self.trace,
            curve: self.curve,
            stats: SimClockStats {
                termination_time: self.now,
                wall_time: self.wall,
            },
            messages_sent: self.messages_sent,
            message_bytes_total: self.message_bytes_total,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub agents: Vec<Agent>,
    pub trace: EventTrace,
    /// Global best-so-far, one point per strict improvement.
    pub curve: Vec<CurvePoint>,
    pub stats: SimClockStats,
    pub stop: StopReason,
    pub messages_sent: u64,
    pub message_bytes_total: u64,
}

impl SimOutcome {
    pub fn terminated(&self) -> bool {
        self.stop == StopReason::Quiescent
    }
}

/// Runs the agents over `overlay` until no events are pending or a limit is
/// hit. Hitting a limit is not an error: the outcome is flagged and the
/// agents' anytime state is returned as is.
pub fn run(
    agents: Vec<Agent>,
    overlay: &Overlay,
    target: &TargetProfile,
    network: &NetworkModel,
    seed: u64,
    limits: Limits,
) -> Result<SimOutcome, SimError> {
    let mut sim = Simulation::new(agents, overlay, target.clone(), network.clone(), seed, limits)?;
    sim.run_to_end()?;
    Ok(sim.finish())
}

/// All agents agree on one complete best candidate and follow it.
pub fn check_consistency(agents: &[Agent]) -> bool {
    let Some(first) = agents.first().and_then(Agent::best) else {
        return false;
    };
    agents.iter().all(|a| {
        let (Some(best), Some(own)) = (a.best(), a.own_selection()) else {
            return false;
        };
        let config = best.configuration();
        compare(best, first) == Ordering::Equal
            && agents.iter().all(|b| config.contains(b.id()))
            && config
                .get(a.id())
                .is_some_and(|r| r.schedule_index == own.schedule_index)
    })
}

/// The preferred best candidate over all started agents.
pub fn snapshot_best(agents: &[Agent]) -> Result<Arc<Candidate>, SimError> {
    agents
        .iter()
        .filter_map(Agent::best)
        .max_by(|a, b| compare(a, b))
        .cloned()
        .ok_or(SimError::NotStarted)
}

/// Serializes a trace as one JSON object per line.
pub fn trace_to_jsonl(trace: &EventTrace) -> String {
    let mut out = String::new();
    for e in trace {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PlanningHorizon, Schedule};
    use crate::topology::{complete, ring};

    fn horizon() -> PlanningHorizon {
        PlanningHorizon::full(1, 1.0).unwrap()
    }

    fn agents(sets: &[&[f64]]) -> Vec<Agent> {
        sets.iter()
            .enumerate()
            .map(|(i, s)| {
                let schedules = s.iter().map(|&v| Schedule::new(vec![v]).unwrap()).collect();
                Agent::new(AgentId(i as u32), schedules, horizon(), vec![]).unwrap()
            })
            .collect()
    }

    fn ids(n: usize) -> Vec<AgentId> {
        (0..n as u32).map(AgentId).collect()
    }

    fn target(v: f64) -> TargetProfile {
        TargetProfile::new(vec![v], &horizon()).unwrap()
    }

    #[test]
    fn single_agent_is_quiescent_after_start() {
        let out = run(
            agents(&[&[1.0, 2.0, 3.0]]),
            &ring(&ids(1)).unwrap(),
            &target(2.2),
            &NetworkModel::default(),
            1,
            Limits::default(),
        )
        .unwrap();
        assert!(out.terminated());
        assert_eq!(out.messages_sent, 0);
        assert_eq!(out.agents[0].extract_assignment().unwrap()[&AgentId(0)], 1);
        assert!(check_consistency(&out.agents));
    }

    #[test]
    fn two_agents_agree() {
        let out = run(
            agents(&[&[1.0, 2.0], &[1.0, 3.0]]),
            &complete(&ids(2)).unwrap(),
            &target(4.0),
            &NetworkModel::constant(1.0),
            1,
            Limits::default(),
        )
        .unwrap();
        assert!(out.terminated());
        assert!(check_consistency(&out.agents));
        assert_eq!(out.agents[0].best().unwrap().fitness(), 0.0);
    }

    #[test]
    fn total_loss_leaves_singletons() {
        let net = NetworkModel {
            drop_probability: 1.0,
            ..NetworkModel::default()
        };
        let out = run(
            agents(&[&[1.0, 2.0], &[1.0, 3.0], &[0.0]]),
            &complete(&ids(3)).unwrap(),
            &target(4.0),
            &net,
            3,
            Limits::default(),
        )
        .unwrap();
        assert!(out.terminated());
        for a in &out.agents {
            let best = a.best().unwrap();
            assert_eq!(best.size(), 1);
            assert!(best.configuration().contains(a.id()));
        }
        assert!(!check_consistency(&out.agents));
    }

    #[test]
    fn message_limit_flags_partial_result() {
        let out = run(
            agents(&[&[1.0, 2.0], &[1.0, 3.0], &[0.0, 5.0]]),
            &complete(&ids(3)).unwrap(),
            &target(4.0),
            &NetworkModel::default(),
            3,
            Limits {
                max_sim_time: 100.0,
                max_messages: 3,
            },
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::MessageLimit);
        assert!(!out.terminated());
        assert_eq!(out.messages_sent, 3);
        assert!(snapshot_best(&out.agents).is_ok());
    }

    #[test]
    fn sim_time_limit_flags_partial_result() {
        let out = run(
            agents(&[&[1.0, 2.0], &[1.0, 3.0]]),
            &complete(&ids(2)).unwrap(),
            &target(4.0),
            &NetworkModel::constant(10.0),
            3,
            Limits {
                max_sim_time: 5.0,
                max_messages: 100,
            },
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::SimTimeLimit);
    }

    #[test]
    fn consistency_examples() {
        let out = run(
            agents(&[&[1.0, 2.0], &[1.0, 3.0], &[0.0, -1.0]]),
            &ring(&ids(3)).unwrap(),
            &target(4.0),
            &NetworkModel::default(),
            9,
            Limits::default(),
        )
        .unwrap();
        assert!(check_consistency(&out.agents));
        let snap = snapshot_best(&out.agents).unwrap();
        for a in &out.agents {
            assert_eq!(compare(a.best().unwrap(), &snap), Ordering::Equal);
        }
        // Missing an agent in the best candidates breaks consistency.
        let mut partial = agents(&[&[1.0, 2.0], &[1.0, 3.0], &[0.0, -1.0]]);
        for a in &mut partial {
            a.handle_start(target(4.0)).unwrap();
        }
        assert!(!check_consistency(&partial));
        assert!(!check_consistency(&[]));
    }

    #[test]
    fn snapshot_requires_a_started_agent() {
        assert_eq!(snapshot_best(&agents(&[&[1.0]])).unwrap_err(), SimError::NotStarted);
    }

    #[test]
    fn snapshots_never_regress() {
        let sets: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..5).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect())
            .collect();
        let refs: Vec<&[f64]> = sets.iter().map(Vec::as_slice).collect();
        let net = NetworkModel {
            delay: DelayDistribution::Exponential { mean: 0.5 },
            ..NetworkModel::default()
        };
        let mut sim = Simulation::new(
            agents(&refs),
            &ring(&ids(8)).unwrap(),
            target(3.0),
            net,
            4,
            Limits::default(),
        )
        .unwrap();
        let mut last: Option<Arc<Candidate>> = None;
        while sim.step().unwrap() {
            if let Ok(snap) = snapshot_best(sim.agents()) {
                if let Some(prev) = &last {
                    assert_ne!(compare(&snap, prev), Ordering::Less);
                }
                last = Some(snap);
            }
        }
        let out = sim.finish();
        assert!(out.terminated());
        assert!(check_consistency(&out.agents));
        let last_point = out.curve.last().unwrap();
        assert_eq!(last_point.fitness, last.unwrap().fitness());
    }

    #[test]
    fn delay_bound_clamps_samples() {
        let net = NetworkModel {
            delay: DelayDistribution::Exponential { mean: 10.0 },
            max_delay_bound: Some(0.5),
            ..NetworkModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| net.sample_delay(&mut rng) <= 0.5));
    }

    #[test]
    fn network_validation() {
        let bad = [
            NetworkModel {
                drop_probability: 1.5,
                ..NetworkModel::default()
            },
            NetworkModel {
                delay: DelayDistribution::Uniform { lo: 2.0, hi: 1.0 },
                ..NetworkModel::default()
            },
            NetworkModel {
                delay: DelayDistribution::Exponential { mean: 0.0 },
                ..NetworkModel::default()
            },
            NetworkModel::constant(-1.0),
        ];
        for n in bad {
            assert!(n.validate().is_err(), "{n:?}");
        }
        assert!(NetworkModel::default().validate().is_ok());
        assert!(NetworkModel::default().reorders());
        assert!(!NetworkModel::constant(1.0).reorders());
    }

    #[test]
    fn trace_serializes_one_event_per_line() {
        let out = run(
            agents(&[&[1.0, 2.0], &[1.0, 3.0]]),
            &complete(&ids(2)).unwrap(),
            &target(4.0),
            &NetworkModel::constant(1.0),
            1,
            Limits::default(),
        )
        .unwrap();
        let text = trace_to_jsonl(&out.trace);
        assert_eq!(text.lines().count(), out.trace.len());
        let first: TraceEvent = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.kind, TraceKind::Start { agent: AgentId(0) });
        assert!(text.contains("\"kind\":\"publish\""));
    }
}
