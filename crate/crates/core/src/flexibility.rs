//! Thermal-buffer device models and sampling of feasible on/off schedules.
//!
//! A device heats a hot-water tank whenever it runs. Heat pumps draw
//! electrical power (negative), CHP units generate it (positive). The tank
//! loses heat to thermal demand and to the ambient; a schedule is feasible
//! when the tank temperature stays inside `[temp_min, temp_max]` at every
//! interval boundary.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, PlanningHorizon, Schedule};

pub use crate::scenario::build_epex_scenario;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlexError {
    #[error("invalid device: {0}")]
    InvalidDevice(String),
    #[error("found only {found} of {requested} distinct feasible schedules within {attempts} attempts")]
    Exhausted {
        found: usize,
        requested: usize,
        attempts: usize,
    },
    #[error("schedule count must be at least 1")]
    ZeroCount,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    HeatPump,
    Chp,
}

/// Two-state device coupled to a hot-water tank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceModel {
    pub kind: DeviceKind,
    /// Electrical power while running, kW (negative for loads).
    pub p_el_on: f64,
    /// Heat delivered to the tank while running, kW.
    pub thermal_on: f64,
    /// kWh per Kelvin.
    pub tank_capacity: f64,
    /// kW per Kelvin above ambient.
    pub loss_rate: f64,
    /// °C
    pub ambient: f64,
    /// Thermal draw per interval, kW.
    pub demand: Vec<f64>,
    pub temp_min: f64,
    pub temp_max: f64,
    pub temp_initial: f64,
}

impl DeviceModel {
    pub fn validate(&self, horizon: &PlanningHorizon) -> Result<(), FlexError> {
        let bad = |m: String| Err(FlexError::InvalidDevice(m));
        let finite = [
            self.p_el_on,
            self.thermal_on,
            self.tank_capacity,
            self.loss_rate,
            self.ambient,
            self.temp_min,
            self.temp_max,
            self.temp_initial,
        ]
        .iter()
        .chain(&self.demand)
        .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite parameter".into());
        }
        if self.temp_min >= self.temp_max {
            return bad(format!(
                "temp_min {} must be below temp_max {}",
                self.temp_min, self.temp_max
            ));
        }
        if !(self.temp_min..=self.temp_max).contains(&self.temp_initial) {
            return bad(format!("temp_initial {} outside bounds", self.temp_initial));
        }
        if self.tank_capacity <= 0.0 {
            return bad(format!("tank_capacity {} must be positive", self.tank_capacity));
        }
        if self.demand.len() != horizon.interval_count() {
            return bad(format!(
                "demand has {} entries, horizon has {} intervals",
                self.demand.len(),
                horizon.interval_count()
            ));
        }
        Ok(())
    }

    /// Tank temperature after one interval starting at `temp`.
    fn step(&self, temp: f64, on: bool, interval: usize, dt: f64) -> f64 {
        let heat = if on { self.thermal_on } else { 0.0 };
        let flux = heat - self.demand[interval] - self.loss_rate * (temp - self.ambient);
        temp + flux * dt / self.tank_capacity
    }

    fn in_bounds(&self, temp: f64) -> bool {
        (self.temp_min..=self.temp_max).contains(&temp)
    }

    /// Electrical power profile for an on/off pattern.
    pub fn power(&self, on: &[bool]) -> Vec<f64> {
        on.iter().map(|&b| if b { self.p_el_on } else { 0.0 }).collect()
    }
}

/// Tank temperatures at the `T + 1` interval boundaries, starting from
/// `temp_initial`.
pub fn simulate_tank(device: &DeviceModel, on: &[bool], horizon: &PlanningHorizon) -> Result<Vec<f64>, FlexError> {
    if on.len() != horizon.interval_count() || device.demand.len() != horizon.interval_count() {
        return Err(ModelError::LengthMismatch {
            expected: horizon.interval_count(),
            actual: on.len().min(device.demand.len()),
        }
        .into());
    }
    let dt = horizon.interval_duration();
    let mut temps = Vec::with_capacity(on.len() + 1);
    let mut temp = device.temp_initial;
    temps.push(temp);
    for (t, &b) in on.iter().enumerate() {
        temp = device.step(temp, b, t, dt);
        temps.push(temp);
    }
    Ok(temps)
}

/// Whether every point of `trajectory` lies within the device's bounds.
pub fn within_bounds(device: &DeviceModel, trajectory: &[f64]) -> bool {
    trajectory.iter().all(|&t| device.in_bounds(t))
}

/// Distinct feasible schedules of one device, in sampling order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexibilitySet {
    pub device: DeviceModel,
    pub schedules: Vec<Schedule>,
    pub on_patterns: Vec<Vec<bool>>,
}

/// Draws a random on/off pattern, forcing the corrective state whenever the
/// tank would leave its bounds. `None` if even the corrective state fails.
fn repaired_pattern(device: &DeviceModel, horizon: &PlanningHorizon, rng: &mut ChaCha8Rng) -> Option<Vec<bool>> {
    let dt = horizon.interval_duration();
    let mut temp = device.temp_initial;
    let mut pattern = Vec::with_capacity(horizon.interval_count());
    for t in 0..horizon.interval_count() {
        let mut on = rng.random_bool(0.5);
        let mut next = device.step(temp, on, t, dt);
        if next > device.temp_max {
            on = false;
            next = device.step(temp, on, t, dt);
        }
        if next < device.temp_min {
            on = true;
            next = device.step(temp, on, t, dt);
        }
        if !device.in_bounds(next) {
            return None;
        }
        pattern.push(on);
        temp = next;
    }
    Some(pattern)
}

/// Samples `count` distinct feasible schedules for `device`, giving up after
/// `max_attempts` draws.
pub fn sample_feasible_schedules(
    device: &DeviceModel,
    count: usize,
    horizon: &PlanningHorizon,
    seed: u64,
    max_attempts: usize,
) -> Result<FlexibilitySet, FlexError> {
    if count == 0 {
        return Err(FlexError::ZeroCount);
    }
    device.validate(horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut on_patterns = Vec::with_capacity(count);
    let mut attempts = 0;
    while on_patterns.len() < count && attempts < max_attempts {
        attempts += 1;
        let Some(pattern) = repaired_pattern(device, horizon, &mut rng) else {
            continue;
        };
        if seen.insert(pattern.clone()) {
            on_patterns.push(pattern);
        }
    }
    if on_patterns.len() < count {
        return Err(FlexError::Exhausted {
            found: on_patterns.len(),
            requested: count,
            attempts,
        });
    }
    let schedules = on_patterns
        .iter()
        .map(|p| Schedule::new(device.power(p)))
        .collect::<Result<_, _>>()?;
    Ok(FlexibilitySet {
        device: device.clone(),
        schedules,
        on_patterns,
    })
}
