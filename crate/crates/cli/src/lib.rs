//! Commands behind the `cohda` binary.
//!
//! Every command takes a scenario argument that is either a builtin name
//! (`epex-peakload`, `toy-two-agent`) or a path to a scenario TOML file, and
//! writes its outputs atomically into an output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use cohda_core::evaluation::{
    self, assignment_profile, brute_force_optimum, defined_ratio, greedy_baseline, optimality_gap,
    run_scenario_with_seeds, summarize, temperature_trajectories, uncontrolled_profile, worst_case_bound, DesignFile,
    ExperimentDesign, RunResult, SweepRow, DEFAULT_ENUMERATION_CAP,
};
use cohda_core::model::{coverage, energy_ratio, AgentId};
use cohda_core::scenario::{builtin_scenario, Instance, ScenarioError, ScenarioFile, Seeds};
use cohda_core::simnet::trace_to_jsonl;

pub const RESULT_FILE: &str = "result.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CURVE_FILE: &str = "curve.jsonl";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SERIES_FILE: &str = "series.csv";
pub const TEMPERATURE_FILE: &str = "temperatures.csv";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const UNCONTROLLED_FILE: &str = "uncontrolled.json";
pub const UNCONTROLLED_SERIES_FILE: &str = "uncontrolled.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Loads a builtin scenario by name, or parses a scenario file.
pub fn load_scenario(arg: &str) -> Result<ScenarioFile> {
    match builtin_scenario(arg) {
        Ok(f) => return Ok(f),
        Err(ScenarioError::UnknownBuiltin(_)) => {}
        Err(e) => return Err(e.into()),
    }
    let text = fs::read_to_string(arg).with_context(|| format!("cannot read scenario {arg:?}"))?;
    ScenarioFile::parse(&text).with_context(|| format!("cannot parse scenario {arg:?}"))
}

/// Writes through a temporary file in the target directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

/// Seeds for a run: derived from `seed` when given, else the file's block.
fn seeds_for(file: &ScenarioFile, seed: Option<u64>) -> Seeds {
    seed.map(Seeds::from_master).unwrap_or(file.seeds)
}

#[derive(Debug, Serialize)]
struct SeriesRow {
    interval: usize,
    hour: f64,
    in_window: bool,
    target: f64,
    controlled: f64,
    uncontrolled: f64,
}

fn temperature_csv(instance: &Instance, assignment: &BTreeMap<AgentId, u32>) -> Result<Option<Vec<u8>>> {
    let trajectories = temperature_trajectories(instance, assignment)?;
    if trajectories.is_empty() {
        return Ok(None);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["point".to_string(), "hour".to_string()];
    header.extend(trajectories.iter().map(|(id, _)| id.to_string()));
    w.write_record(&header)?;
    let dt = instance.problem.horizon.interval_duration();
    for p in 0..trajectories[0].1.len() {
        let mut rec = vec![p.to_string(), (p as f64 * dt).to_string()];
        rec.extend(trajectories.iter().map(|(_, t)| t[p].to_string()));
        w.write_record(&rec)?;
    }
    Ok(Some(w.into_inner()?))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub result: RunResult,
    pub uncontrolled_coverage: f64,
    pub files: Vec<PathBuf>,
}

/// Runs one simulation and writes the result record, the improvement curve,
/// the aggregate-vs-target series, tank temperatures and, with `trace`, the
/// event trace.
pub fn cmd_run(scenario: &str, seed: Option<u64>, out: &Path, trace: bool) -> Result<RunReport> {
    let mut file = load_scenario(scenario)?;
    let seeds = seeds_for(&file, seed);
    file.seeds = seeds;
    let resolved = file
        .resolve()
        .with_context(|| format!("invalid scenario {scenario:?}"))?;
    let exec = run_scenario_with_seeds(&resolved, &seeds, seed)
        .with_context(|| format!("run failed (scenario {scenario:?}, seed {seed:?})"))?;
    let problem = &exec.instance.problem;
    let horizon = &problem.horizon;

    let mut files = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        write_atomic(&p, &bytes)?;
        files.push(p);
        Ok(())
    };

    emit(SCENARIO_FILE, file.to_toml().into_bytes())?;
    emit(RESULT_FILE, json_pretty(&exec.result)?)?;
    emit(
        TIMING_FILE,
        json_pretty(&serde_json::json!({ "wall_time": exec.result.wall_time }))?,
    )?;
    let mut curve = String::new();
    for p in &exec.result.best_improvement_curve {
        curve.push_str(&serde_json::to_string(p)?);
        curve.push('\n');
    }
    emit(CURVE_FILE, curve.into_bytes())?;
    if trace {
        emit(TRACE_FILE, trace_to_jsonl(&exec.outcome.trace).into_bytes())?;
    }

    let controlled = assignment_profile(&exec.instance, &exec.result.assignment);
    let uncontrolled = uncontrolled_profile(&exec.instance);
    let rows = (0..horizon.interval_count()).map(|t| SeriesRow {
        interval: t,
        hour: t as f64 * horizon.interval_duration(),
        in_window: horizon.in_window(t),
        target: problem.target[t],
        controlled: controlled[t],
        uncontrolled: uncontrolled[t],
    });
    emit(SERIES_FILE, csv_bytes(rows)?)?;
    if let Some(bytes) = temperature_csv(&exec.instance, &exec.result.assignment)? {
        emit(TEMPERATURE_FILE, bytes)?;
    }

    let uncontrolled_coverage = coverage(&uncontrolled, &problem.target, horizon)?;
    Ok(RunReport {
        result: exec.result,
        uncontrolled_coverage,
        files,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncontrolledReport {
    pub seed: Option<u64>,
    pub coverage_l1: f64,
    pub coverage_energy_ratio: Option<f64>,
    pub fitness: f64,
}

/// Aggregate when every member keeps the first sampled schedule, without
/// running the heuristic.
pub fn cmd_uncontrolled(scenario: &str, seed: Option<u64>, out: &Path) -> Result<UncontrolledReport> {
    let file = load_scenario(scenario)?;
    let seeds = seeds_for(&file, seed);
    let resolved = file
        .resolve()
        .with_context(|| format!("invalid scenario {scenario:?}"))?;
    let instance = resolved
        .instantiate(&seeds)
        .with_context(|| format!("cannot instantiate scenario {scenario:?} (seed {seed:?})"))?;
    let problem = &instance.problem;
    let horizon = &problem.horizon;
    let profile = uncontrolled_profile(&instance);
    let report = UncontrolledReport {
        seed,
        coverage_l1: coverage(&profile, &problem.target, horizon)?,
        coverage_energy_ratio: defined_ratio(energy_ratio(&profile, &problem.target, horizon))?,
        fitness: problem.distance(&profile),
    };
    write_atomic(&out.join(UNCONTROLLED_FILE), &json_pretty(&report)?)?;

    #[derive(Serialize)]
    struct Row {
        interval: usize,
        hour: f64,
        in_window: bool,
        target: f64,
        uncontrolled: f64,
    }
    let rows = (0..horizon.interval_count()).map(|t| Row {
        interval: t,
        hour: t as f64 * horizon.interval_duration(),
        in_window: horizon.in_window(t),
        target: problem.target[t],
        uncontrolled: profile[t],
    });
    write_atomic(&out.join(UNCONTROLLED_SERIES_FILE), &csv_bytes(rows)?)?;
    let zeros: BTreeMap<AgentId, u32> = resolved.agent_ids().into_iter().map(|id| (id, 0)).collect();
    if let Some(bytes) = temperature_csv(&instance, &zeros)? {
        write_atomic(&out.join(TEMPERATURE_FILE), &bytes)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub combinations: f64,
    pub optimum: f64,
    pub optimum_assignment: Vec<u32>,
    pub worst: f64,
    pub worst_exhaustive: bool,
    pub greedy: f64,
    pub greedy_assignment: Vec<u32>,
    pub cohda: Option<f64>,
    pub gap: Option<f64>,
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "combinations: {}", self.combinations)?;
        writeln!(f, "optimum: {} {:?}", self.optimum, self.optimum_assignment)?;
        let how = if self.worst_exhaustive { "exhaustive" } else { "bound" };
        writeln!(f, "worst: {} ({how})", self.worst)?;
        write!(f, "greedy: {} {:?}", self.greedy, self.greedy_assignment)?;
        if let (Some(c), Some(g)) = (self.cohda, self.gap) {
            write!(f, "\ncohda: {c}\ngap: {g}")?;
        }
        Ok(())
    }
}

/// Optimum, worst case and greedy baseline of a capped instance, plus the
/// optimality gap of a previous run when its result file is given.
pub fn cmd_oracle(scenario: &str, seed: Option<u64>, result: Option<&Path>, cap: u64) -> Result<OracleReport> {
    let file = load_scenario(scenario)?;
    let seeds = seeds_for(&file, seed);
    let instance = file
        .resolve()
        .and_then(|s| s.instantiate(&seeds))
        .with_context(|| format!("invalid scenario {scenario:?}"))?;
    let (optimum, optimum_assignment) = brute_force_optimum(&instance, cap)?;
    let worst = worst_case_bound(&instance, cap);
    let (greedy, greedy_assignment) = greedy_baseline(&instance);
    let cohda = match result {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let r: RunResult = serde_json::from_str(&text).with_context(|| format!("cannot parse {}", p.display()))?;
            Some(r.final_fitness)
        }
        None => None,
    };
    Ok(OracleReport {
        combinations: evaluation::combinations(&instance),
        optimum,
        optimum_assignment,
        worst: worst.fitness,
        worst_exhaustive: worst.exhaustive,
        greedy,
        greedy_assignment,
        cohda,
        gap: cohda.map(|c| optimality_gap(c, optimum)),
    })
}

pub const DEFAULT_CAP: u64 = DEFAULT_ENUMERATION_CAP;

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateReport {
    pub name: String,
    pub members: usize,
    pub intervals: usize,
    pub window: usize,
    pub edges: usize,
}

impl std::fmt::Display for ValidateReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} members, {} intervals ({} in window), {} overlay edges",
            if self.name.is_empty() { "scenario" } else { &self.name },
            self.members,
            self.intervals,
            self.window,
            self.edges
        )
    }
}

/// Parses and instantiates a scenario; with `out`, writes its canonical form.
pub fn cmd_validate(scenario: &str, out: Option<&Path>) -> Result<ValidateReport> {
    let file = load_scenario(scenario)?;
    let resolved = file
        .resolve()
        .with_context(|| format!("invalid scenario {scenario:?}"))?;
    let instance = resolved
        .instantiate(&file.seeds)
        .with_context(|| format!("cannot instantiate scenario {scenario:?}"))?;
    if let Some(p) = out {
        write_atomic(p, file.to_toml().as_bytes())?;
    }
    Ok(ValidateReport {
        name: resolved.name.clone(),
        members: resolved.members.len(),
        intervals: instance.problem.horizon.interval_count(),
        window: instance.problem.horizon.window().len(),
        edges: instance.overlay.edge_count(),
    })
}

/// Reads a design file; its `base` is a builtin name or a scenario path
/// relative to the design file.
pub fn load_design(path: &Path) -> Result<ExperimentDesign> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read design {}", path.display()))?;
    let design = DesignFile::parse(&text).with_context(|| format!("cannot parse design {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let resolved = design.resolve(|base| match builtin_scenario(base) {
        Err(ScenarioError::UnknownBuiltin(_)) => {
            let p = dir.join(base);
            let text = fs::read_to_string(&p)
                .map_err(|e| ScenarioError::Invalid(format!("cannot read base scenario {}: {e}", p.display())))?;
            ScenarioFile::parse(&text)
        }
        other => other,
    });
    resolved.with_context(|| format!("invalid design {}", path.display()))
}

fn read_table(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .with_context(|| format!("cannot parse {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub executed: usize,
}

/// Runs a design and writes `sweep.csv` plus per-cell `summary.csv`. The
/// table is rewritten after every batch, so an interrupted sweep leaves a
/// valid partial table; with `resume`, rows already present with status `ok`
/// are kept and only the rest run.
pub fn cmd_sweep(design_path: &Path, out: &Path, jobs: usize, resume: bool) -> Result<SweepReport> {
    let design = load_design(design_path)?;
    let table = out.join(SWEEP_FILE);
    let mut done: BTreeMap<(usize, usize), SweepRow> = BTreeMap::new();
    if resume && table.exists() {
        for row in read_table(&table)? {
            if row.status == "ok" && row.cell < design.cell_count() && row.replication < design.replications {
                done.insert(row.key(), row);
            }
        }
    }
    let todo: Vec<(usize, usize)> = (0..design.cell_count())
        .flat_map(|c| (0..design.replications).map(move |r| (c, r)))
        .filter(|k| !done.contains_key(k))
        .collect();
    let jobs = jobs.max(1);
    let mut executed = 0;
    for batch in todo.chunks(jobs * 4) {
        let wanted: BTreeSet<(usize, usize)> = batch.iter().copied().collect();
        let skip: BTreeSet<(usize, usize)> = (0..design.cell_count())
            .flat_map(|c| (0..design.replications).map(move |r| (c, r)))
            .filter(|k| !wanted.contains(k))
            .collect();
        let part = evaluation::run_sweep(&design, jobs, &skip)?;
        executed += part.rows.len();
        for row in part.rows {
            done.insert(row.key(), row);
        }
        write_atomic(&table, &csv_bytes(done.values())?)?;
    }
    if todo.is_empty() {
        write_atomic(&table, &csv_bytes(done.values())?)?;
    }
    let rows: Vec<SweepRow> = done.into_values().collect();
    write_atomic(&out.join(SUMMARY_FILE), &csv_bytes(summarize(&rows))?)?;
    if rows.len() != design.row_count() {
        bail!("sweep table has {} of {} rows", rows.len(), design.row_count());
    }
    Ok(SweepReport { rows, executed })
}
