//! Candidate solutions and the total order that picks a unique winner.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::model::{objective, AgentId, ModelError, Problem, SystemConfiguration};

/// A (possibly partial) schedule assignment together with its fitness.
#[derive(Debug, Clone)]
pub struct Candidate {
    configuration: Arc<SystemConfiguration>,
    fitness: f64,
    creator: AgentId,
    key: u64,
}

impl Candidate {
    /// Scores `configuration` against `problem`.
    pub fn new(
        configuration: Arc<SystemConfiguration>,
        problem: &Problem,
        creator: AgentId,
    ) -> Result<Self, ModelError> {
        let fitness = objective(&configuration, problem)?;
        Ok(Self::from_parts(configuration, fitness, creator))
    }

    /// Assembles a candidate from a fitness computed elsewhere (e.g. decoded
    /// from the wire).
    pub fn from_parts(configuration: Arc<SystemConfiguration>, fitness: f64, creator: AgentId) -> Self {
        let key = tie_break_key(&configuration);
        Self {
            configuration,
            fitness,
            creator,
            key,
        }
    }

    pub fn configuration(&self) -> &Arc<SystemConfiguration> {
        &self.configuration
    }

    pub fn fitness(&self) -> f64 {
        self.fitness
    }

    /// Number of agents the candidate assigns a schedule to.
    pub fn size(&self) -> usize {
        self.configuration.len()
    }

    pub fn creator(&self) -> AgentId {
        self.creator
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Strictly preferred over `other`.
    pub fn beats(&self, other: &Candidate) -> bool {
        compare(self, other) == Ordering::Greater
    }
}

/// `Greater` means `a` is preferred.
///
/// Larger size wins, then smaller fitness, then the smaller tie-break key, then
/// the lexicographically smaller `(agent, index)` sequence. Two candidates
/// compare equal only if they assign the same schedules with the same fitness.
pub fn compare(a: &Candidate, b: &Candidate) -> Ordering {
    a.size()
        .cmp(&b.size())
        .then_with(|| b.fitness.total_cmp(&a.fitness))
        .then_with(|| b.key.cmp(&a.key))
        .then_with(|| {
            let pa = a.configuration.iter().map(|r| (r.agent_id, r.schedule_index));
            let pb = b.configuration.iter().map(|r| (r.agent_id, r.schedule_index));
            pb.cmp(pa)
        })
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the little-endian `(agent, index)` pairs in ascending agent
/// order. Stable across platforms and releases.
pub fn tie_break_key(config: &SystemConfiguration) -> u64 {
    let mut h = FNV_OFFSET;
    for r in config.iter() {
        for b in r
            .agent_id
            .0
            .to_le_bytes()
            .into_iter()
            .chain(r.schedule_index.to_le_bytes())
        {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}
