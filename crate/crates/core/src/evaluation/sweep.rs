//! Full-factorial experiment sweeps over scenario parameters.
//!
//! A factor names a dotted path into the scenario file (`network.delay`,
//! `devices.0.count`, `topology.p`) and the values to substitute. Every
//! combination of factor values is one cell; each cell runs `replications`
//! times with seeds `base_seed + replication`.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_scenario, EvalError, RunResult};
use crate::scenario::{ScenarioError, ScenarioFile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factor {
    pub path: String,
    pub values: Vec<toml::Value>,
}

/// On-disk form of an experiment design. `base` names a builtin scenario or
/// a scenario file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignFile {
    pub base: String,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub factors: Vec<Factor>,
}

fn one() -> usize {
    1
}

impl DesignFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    pub fn resolve(
        &self,
        load_base: impl FnOnce(&str) -> Result<ScenarioFile, ScenarioError>,
    ) -> Result<ExperimentDesign, ScenarioError> {
        let design = ExperimentDesign {
            base: load_base(&self.base)?,
            factors: self.factors.clone(),
            replications: self.replications,
            base_seed: self.base_seed,
        };
        design.validate()?;
        Ok(design)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentDesign {
    pub base: ScenarioFile,
    pub factors: Vec<Factor>,
    pub replications: usize,
    pub base_seed: u64,
}

impl ExperimentDesign {
    /// Checks replications and that every cell resolves to a valid scenario.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.replications == 0 {
            return Err(ScenarioError::Invalid("replications must be at least 1".into()));
        }
        if let Some(f) = self.factors.iter().find(|f| f.values.is_empty()) {
            return Err(ScenarioError::Invalid(format!("factor {} has no values", f.path)));
        }
        for cell in 0..self.cell_count() {
            self.cell_scenario(cell)?.resolve()?;
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.factors.iter().map(|f| f.values.len()).product()
    }

    pub fn row_count(&self) -> usize {
        self.cell_count() * self.replications
    }

    /// Factor levels of a cell; the first factor varies slowest.
    pub fn cell_levels(&self, cell: usize) -> Vec<(&str, &toml::Value)> {
        let mut rest = cell;
        let mut levels = Vec::with_capacity(self.factors.len());
        for f in self.factors.iter().rev() {
            levels.push((f.path.as_str(), &f.values[rest % f.values.len()]));
            rest /= f.values.len();
        }
        levels.reverse();
        levels
    }

    pub fn cell_label(&self, cell: usize) -> String {
        self.cell_levels(cell)
            .iter()
            .map(|(p, v)| format!("{p}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn cell_scenario(&self, cell: usize) -> Result<ScenarioFile, ScenarioError> {
        let mut root = toml::Value::try_from(&self.base).expect("scenario files serialize");
        for (path, value) in self.cell_levels(cell) {
            set_path(&mut root, path, value.clone())
                .map_err(|m| ScenarioError::Invalid(format!("factor {path}: {m}")))?;
        }
        root.try_into::<ScenarioFile>()
            .map_err(|e| ScenarioError::Invalid(format!("cell {}: {e}", self.cell_label(cell))))
    }

    pub fn seed(&self, replication: usize) -> u64 {
        self.base_seed.wrapping_add(replication as u64)
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<(), String> {
    let segments: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert((*seg).to_string(), value);
                    return Ok(());
                }
                t.get_mut(*seg).ok_or_else(|| format!("no key {seg:?}"))?
            }
            toml::Value::Array(a) => {
                let idx: usize = seg.parse().map_err(|_| format!("{seg:?} is not an array index"))?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| format!("index {idx} out of {len}"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("cannot descend into {seg:?}")),
        };
    }
    Err("empty path".into())
}

/// One row of a sweep table. Metric columns are empty when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub replication: usize,
    pub seed: u64,
    pub factors: String,
    pub status: String,
    pub error: String,
    pub final_fitness: Option<f64>,
    pub final_size: Option<usize>,
    pub coverage_l1: Option<f64>,
    pub coverage_energy_ratio: Option<f64>,
    pub terminated: Option<bool>,
    pub consistent: Option<bool>,
    pub termination_sim_time: Option<f64>,
    pub messages_sent: Option<u64>,
    pub message_bytes_total: Option<u64>,
    pub objective_calls_total: Option<u64>,
    pub objective_calls_max: Option<u64>,
    pub improvements: Option<usize>,
}

impl SweepRow {
    fn new(cell: usize, replication: usize, seed: u64, factors: String, outcome: Result<RunResult, String>) -> Self {
        let mut row = Self {
            cell,
            replication,
            seed,
            factors,
            status: "ok".into(),
            error: String::new(),
            final_fitness: None,
            final_size: None,
            coverage_l1: None,
            coverage_energy_ratio: None,
            terminated: None,
            consistent: None,
            termination_sim_time: None,
            messages_sent: None,
            message_bytes_total: None,
            objective_calls_total: None,
            objective_calls_max: None,
            improvements: None,
        };
        match outcome {
            Ok(r) => {
                row.final_fitness = Some(r.final_fitness);
                row.final_size = Some(r.final_size);
                row.coverage_l1 = Some(r.coverage_l1);
                row.coverage_energy_ratio = r.coverage_energy_ratio;
                row.terminated = Some(r.terminated);
                row.consistent = Some(r.consistent);
                row.termination_sim_time = Some(r.termination_sim_time);
                row.messages_sent = Some(r.messages_sent);
                row.message_bytes_total = Some(r.message_bytes_total);
                row.objective_calls_total = Some(r.objective_calls_total());
                row.objective_calls_max = r.objective_calls.values().max().copied();
                row.improvements = Some(r.best_improvement_curve.len());
            }
            Err(e) => {
                row.status = "error".into();
                row.error = e;
            }
        }
        row
    }

    pub fn key(&self) -> (usize, usize) {
        (self.cell, self.replication)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Runs every `(cell, replication)` not in `skip`, on up to `jobs` threads.
/// Rows come back in design order; a failing run becomes an error row.
pub fn run_sweep(
    design: &ExperimentDesign,
    jobs: usize,
    skip: &BTreeSet<(usize, usize)>,
) -> Result<SweepTable, EvalError> {
    let scenarios = (0..design.cell_count())
        .map(|c| design.cell_scenario(c).and_then(|f| f.resolve()))
        .collect::<Result<Vec<_>, _>>()?;
    let work: Vec<(usize, usize)> = (0..design.cell_count())
        .flat_map(|c| (0..design.replications).map(move |r| (c, r)))
        .filter(|k| !skip.contains(k))
        .collect();
    let run_one = |&(cell, rep): &(usize, usize)| {
        let seed = design.seed(rep);
        let outcome = run_scenario(&scenarios[cell], seed)
            .map(|e| e.result)
            .map_err(|e| e.to_string());
        SweepRow::new(cell, rep, seed, design.cell_label(cell), outcome)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool");
    let rows = pool.install(|| work.par_iter().map(run_one).collect());
    Ok(SweepTable { rows })
}

/// Metrics summarized per cell, in column order.
pub const SUMMARY_METRICS: [&str; 9] = [
    "final_fitness",
    "coverage_l1",
    "coverage_energy_ratio",
    "terminated",
    "consistent",
    "termination_sim_time",
    "messages_sent",
    "message_bytes_total",
    "objective_calls_total",
];

fn metric(row: &SweepRow, name: &str) -> Option<f64> {
    let b = |v: Option<bool>| v.map(|b| if b { 1.0 } else { 0.0 });
    match name {
        "final_fitness" => row.final_fitness,
        "coverage_l1" => row.coverage_l1,
        "coverage_energy_ratio" => row.coverage_energy_ratio,
        "terminated" => b(row.terminated),
        "consistent" => b(row.consistent),
        "termination_sim_time" => row.termination_sim_time,
        "messages_sent" => row.messages_sent.map(|v| v as f64),
        "message_bytes_total" => row.message_bytes_total.map(|v| v as f64),
        "objective_calls_total" => row.objective_calls_total.map(|v| v as f64),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub factors: String,
    pub metric: String,
    pub n: usize,
    pub failures: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; empty for fewer than two values.
    pub sd: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    /// Normal-approximation 95 % interval, reported from ten values on.
    pub ci95_lo: Option<f64>,
    pub ci95_hi: Option<f64>,
}

/// Per-cell statistics of every metric in [`SUMMARY_METRICS`].
pub fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let cells: BTreeSet<usize> = rows.iter().map(|r| r.cell).collect();
    let mut out = Vec::new();
    for cell in cells {
        let in_cell: Vec<&SweepRow> = rows.iter().filter(|r| r.cell == cell).collect();
        let failures = in_cell.iter().filter(|r| r.status != "ok").count();
        for name in SUMMARY_METRICS {
            let values: Vec<f64> = in_cell.iter().filter_map(|r| metric(r, name)).collect();
            let n = values.len();
            let mean = (n > 0).then(|| values.iter().sum::<f64>() / n as f64);
            let sd = mean
                .filter(|_| n > 1)
                .map(|m| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            let half = sd.filter(|_| n >= 10).map(|s| 1.96 * s / (n as f64).sqrt());
            out.push(CellSummary {
                cell,
                factors: in_cell[0].factors.clone(),
                metric: name.to_string(),
                n,
                failures,
                mean,
                sd,
                min: values.iter().copied().reduce(f64::min),
                max: values.iter().copied().reduce(f64::max),
                ci95_lo: half.zip(mean).map(|(h, m)| m - h),
                ci95_hi: half.zip(mean).map(|(h, m)| m + h),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::toy_two_agent_file;

    fn design(factors: Vec<Factor>, replications: usize) -> ExperimentDesign {
        ExperimentDesign {
            base: toy_two_agent_file(),
            factors,
            replications,
            base_seed: 40,
        }
    }

    fn factor(path: &str, values: Vec<toml::Value>) -> Factor {
        Factor {
            path: path.into(),
            values,
        }
    }

    #[test]
    fn single_level_replications() {
        let d = design(vec![factor("network.drop_probability", vec![0.0.into()])], 3);
        d.validate().unwrap();
        let t = run_sweep(&d, 2, &BTreeSet::new()).unwrap();
        assert_eq!(t.rows.len(), 3);
        let seeds: BTreeSet<u64> = t.rows.iter().map(|r| r.seed).collect();
        assert_eq!(seeds.len(), 3);
    }

    #[test]
    fn factorial_row_count() {
        let d = ExperimentDesign {
            base: crate::scenario::epex_peakload_file(),
            factors: vec![
                factor("devices.0.count", vec![10.into(), 20.into()]),
                factor("topology.p", vec![0.0.into(), 0.1.into()]),
            ],
            replications: 5,
            base_seed: 0,
        };
        assert_eq!(d.row_count(), 20);
        assert_eq!(d.cell_label(3), "devices.0.count=20;topology.p=0.1");
        let f = d.cell_scenario(2).unwrap();
        assert_eq!(f.devices[0].count, 20);
        assert_eq!(f.topology.p, Some(0.0));
    }

    #[test]
    fn empty_factor_list_is_one_cell() {
        let d = design(vec![], 4);
        assert_eq!(d.cell_count(), 1);
        assert_eq!(run_sweep(&d, 1, &BTreeSet::new()).unwrap().rows.len(), 4);
    }

    #[test]
    fn bad_paths_are_rejected() {
        assert!(design(vec![factor("network.nonsense", vec![1.into()])], 1)
            .validate()
            .is_err());
        assert!(design(vec![factor("agents.7.count", vec![1.into()])], 1)
            .validate()
            .is_err());
        assert!(design(vec![factor("network.drop_probability", vec![])], 1)
            .validate()
            .is_err());
        assert!(design(vec![], 0).validate().is_err());
    }

    #[test]
    fn skip_and_determinism() {
        let d = design(
            vec![factor(
                "network.delay",
                vec![
                    toml::Value::try_from(crate::simnet::DelayDistribution::Constant { value: 0.5 }).unwrap(),
                    toml::Value::try_from(crate::simnet::DelayDistribution::Exponential { mean: 0.5 }).unwrap(),
                ],
            )],
            3,
        );
        let full = run_sweep(&d, 3, &BTreeSet::new()).unwrap();
        assert_eq!(full, run_sweep(&d, 1, &BTreeSet::new()).unwrap());
        let skip: BTreeSet<_> = [(0, 1), (1, 2)].into_iter().collect();
        let partial = run_sweep(&d, 2, &skip).unwrap();
        assert_eq!(partial.rows.len(), 4);
        let missing: Vec<_> = full.rows.iter().filter(|r| !skip.contains(&r.key())).cloned().collect();
        assert_eq!(partial.rows, missing);
    }

    #[test]
    fn failing_runs_become_error_rows() {
        let mut base = crate::scenario::epex_peakload_file();
        base.devices.truncate(1);
        base.devices[0].count = 2;
        base.devices[0].demand = Some(50.0);
        base.topology.family = crate::scenario::TopologyFamily::Ring;
        let d = ExperimentDesign {
            base,
            factors: vec![],
            replications: 1,
            base_seed: 0,
        };
        let t = run_sweep(&d, 1, &BTreeSet::new()).unwrap();
        assert_eq!(t.rows[0].status, "error");
        assert!(t.rows[0].final_fitness.is_none());
        let s = summarize(&t.rows);
        assert_eq!(s[0].failures, 1);
        assert_eq!(s[0].n, 0);
    }

    #[test]
    fn summary_statistics() {
        let mut rows = Vec::new();
        for (i, v) in [1.0, 2.0, 3.0, 4.0].into_iter().enumerate() {
            let mut r = SweepRow::new(0, i, i as u64, String::new(), Err(String::new()));
            r.status = "ok".into();
            r.final_fitness = Some(v);
            rows.push(r);
        }
        let s = summarize(&rows);
        let f = s.iter().find(|c| c.metric == "final_fitness").unwrap();
        assert_eq!(f.n, 4);
        assert_eq!(f.mean, Some(2.5));
        assert!((f.sd.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((f.min, f.max), (Some(1.0), Some(4.0)));
        assert_eq!(f.ci95_lo, None);
    }
}
