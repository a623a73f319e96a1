//! Shared domain types: the planning horizon, power schedules, per-agent
//! selections, and the scheduling objective.
//!
//! Power values are in kW with load negative and generation positive.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a participating device agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("planning horizon needs at least one interval")]
    EmptyHorizon,
    #[error("interval duration must be positive and finite, got {0}")]
    BadDuration(f64),
    #[error("product window is empty")]
    EmptyWindow,
    #[error("window index {index} outside a horizon of {intervals} intervals")]
    WindowOutOfRange { index: usize, intervals: usize },
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite power value at interval {0}")]
    NonFinite(usize),
    #[error("target is zero over the whole product window")]
    DegenerateTarget,
}

/// Number and length of scheduling intervals plus the delivery window the
/// objective is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningHorizon {
    interval_count: usize,
    interval_duration: f64,
    window: Vec<usize>,
    mask: Vec<bool>,
}

impl PlanningHorizon {
    pub fn new(
        interval_count: usize,
        interval_duration: f64,
        window: impl IntoIterator<Item = usize>,
    ) -> Result<Self, ModelError> {
        if interval_count == 0 {
            return Err(ModelError::EmptyHorizon);
        }
        if !(interval_duration.is_finite() && interval_duration > 0.0) {
            return Err(ModelError::BadDuration(interval_duration));
        }
        let mut window: Vec<usize> = window.into_iter().collect();
        window.sort_unstable();
        window.dedup();
        if window.is_empty() {
            return Err(ModelError::EmptyWindow);
        }
        if let Some(&index) = window.iter().find(|&&i| i >= interval_count) {
            return Err(ModelError::WindowOutOfRange {
                index,
                intervals: interval_count,
            });
        }
        let mut mask = vec![false; interval_count];
        for &i in &window {
            mask[i] = true;
        }
        Ok(Self {
            interval_count,
            interval_duration,
            window,
            mask,
        })
    }

    /// Horizon whose window covers every interval.
    pub fn full(interval_count: usize, interval_duration: f64) -> Result<Self, ModelError> {
        Self::new(interval_count, interval_duration, 0..interval_count)
    }

    pub fn interval_count(&self) -> usize {
        self.interval_count
    }

    pub fn interval_duration(&self) -> f64 {
        self.interval_duration
    }

    /// Sorted, deduplicated interval indices of the product window.
    pub fn window(&self) -> &[usize] {
        &self.window
    }

    pub fn in_window(&self, interval: usize) -> bool {
        self.mask.get(interval).copied().unwrap_or(false)
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len != self.interval_count {
            return Err(ModelError::LengthMismatch {
                expected: self.interval_count,
                actual: len,
            });
        }
        Ok(())
    }
}

/// A power profile over the planning horizon. Cloning is cheap; the values
/// are shared.
#[derive(Clone, PartialEq)]
pub struct Schedule(Arc<[f64]>);

impl Schedule {
    pub fn new(power: Vec<f64>) -> Result<Self, ModelError> {
        if let Some(i) = power.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        Ok(Self(power.into()))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len].into())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.to_vec()
    }
}

impl Deref for Schedule {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Debug for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Serialize for Schedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Schedule::new(v).map_err(serde::de::Error::custom)
    }
}

/// The power profile the coalition should deliver. Only values inside the
/// product window are meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetProfile(Schedule);

impl TargetProfile {
    pub fn new(power: Vec<f64>, horizon: &PlanningHorizon) -> Result<Self, ModelError> {
        horizon.check_len(power.len())?;
        if let Some(&i) = horizon.window().iter().find(|&&i| !power[i].is_finite()) {
            return Err(ModelError::NonFinite(i));
        }
        // Values outside the window are ignored; normalize them so the
        // profile stays finite everywhere.
        let power = power
            .into_iter()
            .enumerate()
            .map(|(i, v)| if v.is_finite() || horizon.in_window(i) { v } else { 0.0 })
            .collect();
        Ok(Self(Schedule::new(power)?))
    }

    /// `value` on every window interval, zero elsewhere.
    pub fn constant_on_window(value: f64, horizon: &PlanningHorizon) -> Result<Self, ModelError> {
        let power = (0..horizon.interval_count())
            .map(|i| if horizon.in_window(i) { value } else { 0.0 })
            .collect();
        Self::new(power, horizon)
    }

    pub fn as_schedule(&self) -> &Schedule {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Deref for TargetProfile {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// One agent's current choice, versioned by `lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRecord {
    pub agent_id: AgentId,
    pub schedule_index: u32,
    pub schedule: Schedule,
    pub lambda: u64,
}

/// Selections known for a set of agents, at most one per agent, ordered by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SystemConfiguration {
    selections: BTreeMap<AgentId, SelectionRecord>,
}

impl SystemConfiguration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: AgentId) -> Option<&SelectionRecord> {
        self.selections.get(&id)
    }

    /// Inserts or replaces the record for `record.agent_id`.
    pub fn insert(&mut self, record: SelectionRecord) -> Option<SelectionRecord> {
        self.selections.insert(record.agent_id, record)
    }

    pub fn remove(&mut self, id: AgentId) -> Option<SelectionRecord> {
        self.selections.remove(&id)
    }

    pub fn contains(&self, id: AgentId) -> bool {
        self.selections.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    /// Records in ascending agent id order.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &SelectionRecord> + '_ {
        self.selections.values()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.selections.keys().copied()
    }

    /// `(agent, schedule index)` pairs in ascending agent order.
    pub fn assignment(&self) -> BTreeMap<AgentId, u32> {
        self.iter().map(|r| (r.agent_id, r.schedule_index)).collect()
    }

    /// Same agents and schedule indices, ignoring version counters.
    pub fn same_assignment(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.agent_id == b.agent_id && a.schedule_index == b.schedule_index)
    }
}

impl FromIterator<SelectionRecord> for SystemConfiguration {
    fn from_iter<I: IntoIterator<Item = SelectionRecord>>(iter: I) -> Self {
        let mut config = Self::new();
        for r in iter {
            config.insert(r);
        }
        config
    }
}

/// Distance between the aggregate and the target over the product window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Sum of absolute deviations.
    #[default]
    L1,
    /// Square root of the sum of squared deviations.
    Euclidean,
}

impl Metric {
    /// Folds per-interval deviations into a distance.
    pub fn distance(self, deviations: impl Iterator<Item = f64>) -> f64 {
        match self {
            Metric::L1 => deviations.map(f64::abs).sum(),
            Metric::Euclidean => deviations.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

/// Everything needed to score a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub horizon: PlanningHorizon,
    pub target: TargetProfile,
    pub metric: Metric,
}

impl Problem {
    pub fn new(horizon: PlanningHorizon, target: TargetProfile) -> Result<Self, ModelError> {
        horizon.check_len(target.len())?;
        Ok(Self {
            horizon,
            target,
            metric: Metric::L1,
        })
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    /// Objective for an already aggregated profile.
    pub fn distance(&self, aggregate: &[f64]) -> f64 {
        self.metric
            .distance(self.horizon.window().iter().map(|&t| aggregate[t] - self.target[t]))
    }

    /// Per-window-interval `target - others`, the profile a single extra
    /// schedule would have to hit exactly.
    pub fn residual(&self, others: &[f64]) -> Vec<f64> {
        self.horizon
            .window()
            .iter()
            .map(|&t| self.target[t] - others[t])
            .collect()
    }

    /// Objective of `others + schedule`, given `residual` from [`Problem::residual`].
    pub fn distance_to_residual(&self, schedule: &[f64], residual: &[f64]) -> f64 {
        self.metric.distance(
            self.horizon
                .window()
                .iter()
                .zip(residual)
                .map(|(&t, r)| schedule[t] - r),
        )
    }
}

/// Element-wise sum of every selected schedule, accumulated in ascending agent
/// order starting from zero.
pub fn aggregate(config: &SystemConfiguration, horizon: &PlanningHorizon) -> Result<Vec<f64>, ModelError> {
    let mut sum = vec![0.0; horizon.interval_count()];
    for record in config.iter() {
        horizon.check_len(record.schedule.len())?;
        for (acc, v) in sum.iter_mut().zip(record.schedule.iter()) {
            *acc += v;
        }
    }
    Ok(sum)
}

/// Distance of the aggregate of `config` to the target over the window.
pub fn objective(config: &SystemConfiguration, problem: &Problem) -> Result<f64, ModelError> {
    Ok(problem.distance(&aggregate(config, &problem.horizon)?))
}

fn window_abs_target(target: &TargetProfile, horizon: &PlanningHorizon) -> Result<f64, ModelError> {
    horizon.check_len(target.len())?;
    let total: f64 = horizon.window().iter().map(|&t| target[t].abs()).sum();
    if total == 0.0 {
        return Err(ModelError::DegenerateTarget);
    }
    Ok(total)
}

/// `max(0, 1 - L1 window error / L1 window target)`.
pub fn coverage(delivered: &[f64], target: &TargetProfile, horizon: &PlanningHorizon) -> Result<f64, ModelError> {
    let total = window_abs_target(target, horizon)?;
    horizon.check_len(delivered.len())?;
    let error: f64 = horizon.window().iter().map(|&t| (delivered[t] - target[t]).abs()).sum();
    Ok((1.0 - error / total).max(0.0))
}

/// Window energy delivered divided by window energy targeted (signed).
pub fn energy_ratio(delivered: &[f64], target: &TargetProfile, horizon: &PlanningHorizon) -> Result<f64, ModelError> {
    horizon.check_len(delivered.len())?;
    horizon.check_len(target.len())?;
    let targeted: f64 = horizon.window().iter().map(|&t| target[t]).sum();
    if targeted == 0.0 {
        return Err(ModelError::DegenerateTarget);
    }
    let delivered: f64 = horizon.window().iter().map(|&t| delivered[t]).sum();
    // The interval duration cancels out of the ratio.
    Ok(delivered / targeted)
}
