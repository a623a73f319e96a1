//! First-order metrics of single runs, reference oracles, and experiment
//! sweeps.

mod oracle;
mod sweep;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use oracle::{
    brute_force_optimum, combinations, greedy_baseline, worst_case_bound, Assignment, OracleError, WorstCase,
    DEFAULT_ENUMERATION_CAP,
};
pub use sweep::{
    run_sweep, summarize, CellSummary, DesignFile, ExperimentDesign, Factor, SweepRow, SweepTable, SUMMARY_METRICS,
};

use crate::flexibility::{simulate_tank, FlexError};
use crate::model::{aggregate, coverage, energy_ratio, AgentId, ModelError};
use crate::scenario::{Instance, Scenario, ScenarioError, Seeds};
use crate::simnet::{self, check_consistency, snapshot_best, CurvePoint, SimError, SimOutcome, StopReason};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flexibility(#[from] FlexError),
}

/// Recorded first-order criteria of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: Option<u64>,
    pub final_fitness: f64,
    pub final_size: usize,
    pub coverage_l1: f64,
    /// Empty when the signed window target sums to zero.
    pub coverage_energy_ratio: Option<f64>,
    pub terminated: bool,
    pub stop_reason: StopReason,
    pub consistent: bool,
    pub termination_sim_time: f64,
    /// Excluded from serialized results, which must be reproducible.
    #[serde(skip)]
    pub wall_time: f64,
    pub messages_sent: u64,
    pub message_bytes_total: u64,
    pub objective_calls: BTreeMap<AgentId, u64>,
    pub best_improvement_curve: Vec<CurvePoint>,
    /// Schedule index per agent in the final anytime solution.
    pub assignment: BTreeMap<AgentId, u32>,
}

impl RunResult {
    pub fn objective_calls_total(&self) -> u64 {
        self.objective_calls.values().sum()
    }
}

/// A finished run with everything needed for reporting.
#[derive(Debug, Clone)]
pub struct Execution {
    pub instance: Instance,
    pub outcome: SimOutcome,
    pub result: RunResult,
}

/// Runs `scenario` with its own seeds block.
pub fn run_scenario_with_seeds(scenario: &Scenario, seeds: &Seeds, seed: Option<u64>) -> Result<Execution, EvalError> {
    let instance = scenario.instantiate(seeds)?;
    let agents = instance.agents().map_err(ScenarioError::from)?;
    let outcome = simnet::run(
        agents,
        &instance.overlay,
        &instance.problem.target,
        &scenario.network,
        seeds.network,
        scenario.limits,
    )?;
    let result = extract_result(&instance, &outcome, seed)?;
    Ok(Execution {
        instance,
        outcome,
        result,
    })
}

/// Runs `scenario` with every sub-seed derived from `seed`.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<Execution, EvalError> {
    run_scenario_with_seeds(scenario, &Seeds::from_master(seed), Some(seed))
}

fn extract_result(instance: &Instance, outcome: &SimOutcome, seed: Option<u64>) -> Result<RunResult, EvalError> {
    let problem = &instance.problem;
    let best = snapshot_best(&outcome.agents)?;
    let delivered = aggregate(best.configuration(), &problem.horizon)?;
    Ok(RunResult {
        seed,
        final_fitness: best.fitness(),
        final_size: best.size(),
        coverage_l1: coverage(&delivered, &problem.target, &problem.horizon)?,
        coverage_energy_ratio: defined_ratio(energy_ratio(&delivered, &problem.target, &problem.horizon))?,
        terminated: outcome.terminated(),
        stop_reason: outcome.stop,
        consistent: check_consistency(&outcome.agents),
        termination_sim_time: outcome.stats.termination_time,
        wall_time: outcome.stats.wall_time,
        messages_sent: outcome.messages_sent,
        message_bytes_total: outcome.message_bytes_total,
        objective_calls: outcome.agents.iter().map(|a| (a.id(), a.objective_calls())).collect(),
        best_improvement_curve: outcome.curve.clone(),
        assignment: best.configuration().assignment(),
    })
}

/// Turns the zero-energy-target error into an empty value.
pub fn defined_ratio(ratio: Result<f64, ModelError>) -> Result<Option<f64>, ModelError> {
    match ratio {
        Ok(r) => Ok(Some(r)),
        Err(ModelError::DegenerateTarget) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Aggregate power when every member runs the first schedule of its sampled
/// set, i.e. without any coordination.
pub fn uncontrolled_profile(instance: &Instance) -> Vec<f64> {
    let mut sum = vec![0.0; instance.problem.horizon.interval_count()];
    for set in &instance.schedule_sets {
        for (acc, v) in sum.iter_mut().zip(set[0].iter()) {
            *acc += v;
        }
    }
    sum
}

/// Aggregate power of an assignment; members missing from it contribute
/// nothing.
pub fn assignment_profile(instance: &Instance, assignment: &BTreeMap<AgentId, u32>) -> Vec<f64> {
    let mut sum = vec![0.0; instance.problem.horizon.interval_count()];
    for (&id, &index) in assignment {
        for (acc, v) in sum
            .iter_mut()
            .zip(instance.schedule_sets[id.0 as usize][index as usize].iter())
        {
            *acc += v;
        }
    }
    sum
}

/// Tank temperatures under an assignment for every thermal member, in agent
/// order. Members without a device model or an assigned schedule are skipped.
pub fn temperature_trajectories(
    instance: &Instance,
    assignment: &BTreeMap<AgentId, u32>,
) -> Result<Vec<(AgentId, Vec<f64>)>, EvalError> {
    let mut out = Vec::new();
    for (&id, &index) in assignment {
        if let Some(flex) = &instance.flexibility[id.0 as usize] {
            let traj = simulate_tank(
                &flex.device,
                &flex.on_patterns[index as usize],
                &instance.problem.horizon,
            )?;
            out.push((id, traj));
        }
    }
    Ok(out)
}

/// `(cohda - optimum) / max(optimum, 1e-9)`.
pub fn optimality_gap(cohda: f64, optimum: f64) -> f64 {
    (cohda - optimum) / optimum.max(1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{toy_two_agent_file, ExplicitAgent, ScenarioFile, TopologyBlock, TopologyFamily};

    #[test]
    fn single_agent_run() {
        let mut f = toy_two_agent_file();
        f.agents.truncate(1);
        f.topology = TopologyBlock {
            family: TopologyFamily::Ring,
            k: None,
            p: None,
            edges: None,
        };
        let r = run_scenario(&f.resolve().unwrap(), 1).unwrap().result;
        assert!(r.terminated && r.consistent);
        assert_eq!(r.messages_sent, 0);
        assert_eq!(r.final_fitness, 2.0);
    }

    #[test]
    fn toy_run_reaches_oracle_optimum() {
        let s = toy_two_agent_file().resolve().unwrap();
        let exec = run_scenario(&s, 5).unwrap();
        let (opt, _) = brute_force_optimum(&exec.instance, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(exec.result.final_fitness, opt);
        assert_eq!(opt, 0.0);
        assert!((exec.result.coverage_l1 - 1.0).abs() < 1e-12);
        assert_eq!(exec.result.coverage_energy_ratio, Some(1.0));
    }

    #[test]
    fn coverage_matches_fitness() {
        let text = r#"
            [horizon]
            intervals = 4
            interval_hours = 1.0
            window = [1, 2]
            [target]
            values = [0.0, 10.0, -7.0, 0.0]
            [[synthetic]]
            count = 5
            schedules = 4
            min_power = -3
            max_power = 3
        "#;
        let s = ScenarioFile::parse(text).unwrap().resolve().unwrap();
        for seed in 0..10 {
            let r = run_scenario(&s, seed).unwrap().result;
            let expected = (1.0 - r.final_fitness / 17.0).max(0.0);
            assert!((r.coverage_l1 - expected).abs() < 1e-12);
            let pts = &r.best_improvement_curve;
            assert_eq!(pts.last().unwrap().fitness, r.final_fitness);
        }
    }

    #[test]
    fn uncontrolled_equals_controlled_without_flexibility() {
        let mut f = toy_two_agent_file();
        f.agents = vec![
            ExplicitAgent {
                schedules: vec![vec![1.0]],
                count: 1,
            },
            ExplicitAgent {
                schedules: vec![vec![2.5]],
                count: 1,
            },
        ];
        let exec = run_scenario(&f.resolve().unwrap(), 2).unwrap();
        assert_eq!(
            uncontrolled_profile(&exec.instance),
            assignment_profile(&exec.instance, &exec.result.assignment)
        );
    }

    #[test]
    fn balanced_target_has_no_energy_ratio() {
        let mut f = toy_two_agent_file();
        f.horizon.intervals = 2;
        f.target.value = None;
        f.target.values = Some(vec![3.0, -3.0]);
        f.agents = vec![ExplicitAgent {
            schedules: vec![vec![1.0, -1.0], vec![3.0, -2.0]],
            count: 2,
        }];
        let r = run_scenario(&f.resolve().unwrap(), 0).unwrap().result;
        assert_eq!(r.coverage_energy_ratio, None);
        assert_eq!(r.final_fitness, 1.0);
    }

    #[test]
    fn gap_formula() {
        assert_eq!(optimality_gap(3.0, 2.0), 0.5);
        assert_eq!(optimality_gap(0.0, 0.0), 0.0);
        assert!((optimality_gap(1.0, 0.0) - 1e9).abs() < 1e-3);
    }
}
