//! Centralized reference solvers: exhaustive optimum and worst case, and a
//! one-pass greedy baseline.
//!
//! All fitness values are accumulated in ascending agent order starting from
//! zero, the same order [`crate::model::objective`] uses, so an assignment
//! scores bit-identically here and in a candidate.

use thiserror::Error;

use crate::model::Problem;
use crate::scenario::Instance;

/// Schedule index per agent, in agent id order.
pub type Assignment = Vec<u32>;

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("{combinations:.3e} combinations exceed the enumeration cap of {cap}")]
    CapExceeded { combinations: f64, cap: u64 },
}

/// Number of joint assignments, as a float since it overflows quickly.
pub fn combinations(instance: &Instance) -> f64 {
    instance.schedule_sets.iter().map(|s| s.len() as f64).product()
}

fn check_cap(instance: &Instance, cap: u64) -> Result<(), OracleError> {
    let mut total: u64 = 1;
    for s in &instance.schedule_sets {
        total = total.saturating_mul(s.len() as u64);
    }
    if total > cap {
        return Err(OracleError::CapExceeded {
            combinations: combinations(instance),
            cap,
        });
    }
    Ok(())
}

/// Window-restricted views of every schedule and of the target.
struct Windowed {
    sets: Vec<Vec<Vec<f64>>>,
    target: Vec<f64>,
}

impl Windowed {
    fn new(instance: &Instance) -> Self {
        let window = instance.problem.horizon.window();
        let pick = |v: &[f64]| window.iter().map(|&t| v[t]).collect::<Vec<f64>>();
        Self {
            sets: instance
                .schedule_sets
                .iter()
                .map(|set| set.iter().map(|s| pick(s)).collect())
                .collect(),
            target: pick(&instance.problem.target),
        }
    }

    fn score(&self, problem: &Problem, aggregate: &[f64]) -> f64 {
        problem
            .metric
            .distance(aggregate.iter().zip(&self.target).map(|(a, t)| a - t))
    }
}

/// Visits every joint assignment in lexicographic order.
fn enumerate(w: &Windowed, mut visit: impl FnMut(&[f64], &[u32])) {
    let n = w.sets.len();
    let width = w.target.len();
    let mut prefix = vec![vec![0.0; width]; n + 1];
    let mut index = vec![0u32; n];
    // Fill prefixes for the all-zero assignment.
    for k in 0..n {
        let (lo, hi) = prefix.split_at_mut(k + 1);
        for ((d, a), b) in hi[0].iter_mut().zip(&lo[k]).zip(&w.sets[k][0]) {
            *d = a + b;
        }
    }
    loop {
        visit(&prefix[n], &index);
        // Advance the odometer, last agent fastest.
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            index[k] += 1;
            if (index[k] as usize) < w.sets[k].len() {
                break;
            }
            index[k] = 0;
        }
        for j in k..n {
            let (lo, hi) = prefix.split_at_mut(j + 1);
            for ((d, a), b) in hi[0].iter_mut().zip(&lo[j]).zip(&w.sets[j][index[j] as usize]) {
                *d = a + b;
            }
        }
    }
}

/// Minimal objective over all joint assignments, with the lexicographically
/// smallest minimizer.
pub fn brute_force_optimum(instance: &Instance, cap: u64) -> Result<(f64, Assignment), OracleError> {
    check_cap(instance, cap)?;
    let w = Windowed::new(instance);
    let mut best = (f64::INFINITY, Vec::new());
    enumerate(&w, |agg, idx| {
        let f = w.score(&instance.problem, agg);
        if f < best.0 {
            best = (f, idx.to_vec());
        }
    });
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub fitness: f64,
    /// False when the cap forced the per-interval overestimate.
    pub exhaustive: bool,
    pub assignment: Option<Assignment>,
}

/// Maximal objective over all joint assignments, or, past the cap, the sum of
/// per-interval worst deviations (never below the exhaustive value).
pub fn worst_case_bound(instance: &Instance, cap: u64) -> WorstCase {
    if check_cap(instance, cap).is_err() {
        return WorstCase {
            fitness: analytic_worst(instance),
            exhaustive: false,
            assignment: None,
        };
    }
    let w = Windowed::new(instance);
    let mut worst = (f64::NEG_INFINITY, Vec::new());
    enumerate(&w, |agg, idx| {
        let f = w.score(&instance.problem, agg);
        if f > worst.0 {
            worst = (f, idx.to_vec());
        }
    });
    WorstCase {
        fitness: worst.0,
        exhaustive: true,
        assignment: Some(worst.1),
    }
}

pub(crate) fn analytic_worst(instance: &Instance) -> f64 {
    let w = Windowed::new(instance);
    let deviations = (0..w.target.len()).map(|t| {
        let (lo, hi) = w.sets.iter().fold((0.0, 0.0), |(lo, hi), set| {
            let vals = set.iter().map(|s| s[t]);
            let min = vals.clone().fold(f64::INFINITY, f64::min);
            let max = vals.fold(f64::NEG_INFINITY, f64::max);
            (lo + min, hi + max)
        });
        (hi - w.target[t]).abs().max((lo - w.target[t]).abs())
    });
    instance.problem.metric.distance(deviations)
}

/// Agents decide once, in id order, each minimizing the objective of the
/// partial assignment so far. Ties go to the lowest index.
pub fn greedy_baseline(instance: &Instance) -> (f64, Assignment) {
    let w = Windowed::new(instance);
    let mut prefix = vec![0.0; w.target.len()];
    let mut assignment = Vec::with_capacity(w.sets.len());
    for set in &w.sets {
        let mut choice = (0u32, f64::INFINITY, Vec::new());
        for (i, s) in set.iter().enumerate() {
            let agg: Vec<f64> = prefix.iter().zip(s).map(|(a, b)| a + b).collect();
            let f = w.score(&instance.problem, &agg);
            if f < choice.1 {
                choice = (i as u32, f, agg);
            }
        }
        assignment.push(choice.0);
        prefix = choice.2;
    }
    (w.score(&instance.problem, &prefix), assignment)
}
