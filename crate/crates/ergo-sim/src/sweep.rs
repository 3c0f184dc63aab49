//! Sweep orchestration and output emission: one summary row per
//! (defense, T, repeat), medians alongside, violations in their own file,
//! and a run_meta echo for reproducibility.
//!
//! Runs are independent, so sweep points execute on a rayon pool when the
//! `parallel` feature is on (default); rows are keyed and sorted afterwards,
//! making the output byte-identical across modes and thread schedules.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::config::{parse_defense, trace_label, ExperimentConfig, SCHEMA_VERSION};
use crate::model::SimConfig;
use crate::runner::{run_single, DefenseKind, RunConfig, RunOutput};
use crate::trace::{generate, ingest_trace_file, ChurnTrace, TraceSource, TraceSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    /// Rayon worker pool; falls back to sequential without the feature.
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error("run failed: {0}")]
    Run(#[from] crate::runner::RunError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub defense: String,
    pub trace: String,
    pub t: f64,
    pub repeat: u32,
    pub seed: u64,
    pub horizon_s: f64,
    pub good_spend_rate: f64,
    pub adversary_spend_rate_observed: f64,
    pub good_total: u64,
    pub good_entrance: u64,
    pub good_purge: u64,
    pub good_periodic: u64,
    pub adversary_total: u64,
    pub max_bad_fraction: f64,
    pub min_good_population: u64,
    pub purges: u64,
    pub intervals: u64,
    pub good_joins: u64,
    pub bad_joins_admitted: u64,
    pub bad_attempts: u64,
    pub mean_entrance_cost: f64,
    pub lemma7_violations: u64,
    pub lemma8_violations: u64,
    pub lemma8_windows: u64,
    pub cutoff_time_s: Option<f64>,
    pub remp_valid: Option<bool>,
    pub suppressed_departures: u64,
    pub staggered_departures: u64,
    pub violation_count: usize,
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ViolationRow {
    pub defense: String,
    pub t: f64,
    pub repeat: u32,
    pub seed: u64,
    pub time_s: f64,
    pub what: String,
}

#[derive(Clone, Debug)]
pub struct SweepResults {
    pub rows: Vec<SweepRow>,
    pub violations: Vec<ViolationRow>,
}

impl SweepResults {
    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.failed)
    }
}

/// Trace for one repeat: synthetic sources re-seed per repeat, file sources
/// are shared.
pub fn build_trace(cfg: &ExperimentConfig, repeat: u32) -> Result<ChurnTrace, SweepError> {
    let spec = TraceSpec {
        duration: cfg.horizon_s,
        seed: cfg.trace.seed + repeat as u64,
        ..cfg.trace.clone()
    };
    match &spec.source {
        TraceSource::File { path } => Ok(ingest_trace_file(Path::new(path), None)?),
        _ => Ok(generate(&spec, &cfg.sim)?),
    }
}

pub fn run_config_for(
    cfg: &ExperimentConfig,
    defense: DefenseKind,
    t: f64,
    repeat: u32,
) -> RunConfig {
    let sim = SimConfig {
        rng_seed: cfg.sim.rng_seed.wrapping_add(repeat as u64),
        horizon: cfg.horizon_s,
        ..cfg.sim
    };
    let mut rc = RunConfig::new(sim, defense, cfg.adversary(t));
    rc.committee_c = cfg.committee_c;
    rc.estimator_numerator = cfg.estimator_numerator;
    rc.init_duration_override = cfg.init_duration_s;
    rc
}

fn row_from(out: &RunOutput, cfg: &ExperimentConfig, t: f64, repeat: u32) -> SweepRow {
    SweepRow {
        defense: out.defense.clone(),
        trace: trace_label(&cfg.trace),
        t,
        repeat,
        seed: cfg.sim.rng_seed.wrapping_add(repeat as u64),
        horizon_s: out.horizon,
        good_spend_rate: out.rates.good_spend_rate,
        adversary_spend_rate_observed: out.rates.adversary_spend_rate_observed,
        good_total: out.good_total,
        good_entrance: out.good_entrance,
        good_purge: out.good_purge,
        good_periodic: out.good_periodic,
        adversary_total: out.adversary_total,
        max_bad_fraction: out.max_bad_fraction,
        min_good_population: out.min_good_population,
        purges: out.purge_count,
        intervals: out.interval_count,
        good_joins: out.good_joins,
        bad_joins_admitted: out.bad_joins_admitted,
        bad_attempts: out.bad_attempts,
        mean_entrance_cost: out.mean_entrance_cost_good,
        lemma7_violations: out.lemma7_violations,
        lemma8_violations: out.lemma8_violations,
        lemma8_windows: out.lemma8_windows,
        cutoff_time_s: out.cutoff_time,
        remp_valid: out.remp_valid,
        suppressed_departures: out.suppressed_departures,
        staggered_departures: out.staggered_departures,
        violation_count: out.violations.len(),
        failed: out.failed(),
    }
}

struct Task {
    defense: DefenseKind,
    t: f64,
    repeat: u32,
    trace: Arc<ChurnTrace>,
}

fn run_task(
    cfg: &ExperimentConfig,
    task: &Task,
) -> Result<(SweepRow, Vec<ViolationRow>), SweepError> {
    let rc = run_config_for(cfg, task.defense.clone(), task.t, task.repeat);
    let out = run_single(&task.trace, &rc)?;
    let row = row_from(&out, cfg, task.t, task.repeat);
    let violations = out
        .violations
        .iter()
        .map(|v| ViolationRow {
            defense: row.defense.clone(),
            t: task.t,
            repeat: task.repeat,
            seed: row.seed,
            time_s: v.time,
            what: v.what.clone(),
        })
        .collect();
    Ok((row, violations))
}

/// Run the whole (defense x T x repeat) matrix.
pub fn run_sweep(cfg: &ExperimentConfig, mode: ExecMode) -> Result<SweepResults, SweepError> {
    cfg.validate().map_err(SweepError::Config)?;
    let traces: Vec<Arc<ChurnTrace>> = (0..cfg.repeats)
        .map(|r| build_trace(cfg, r).map(Arc::new))
        .collect::<Result<_, _>>()?;
    let mut tasks = Vec::new();
    for name in &cfg.defenses {
        let kind = parse_defense(name, cfg).map_err(SweepError::Config)?;
        for &t in &cfg.sweep_t {
            for repeat in 0..cfg.repeats {
                tasks.push(Task {
                    defense: kind.clone(),
                    t,
                    repeat,
                    trace: traces[repeat as usize].clone(),
                });
            }
        }
    }
    let results = execute(cfg, &tasks, mode)?;
    let mut rows = Vec::with_capacity(results.len());
    let mut violations = Vec::new();
    for (row, mut v) in results {
        rows.push(row);
        violations.append(&mut v);
    }
    rows.sort_by(|a, b| {
        (&a.defense, a.t, a.repeat)
            .partial_cmp(&(&b.defense, b.t, b.repeat))
            .unwrap()
    });
    violations.sort_by(|a, b| {
        (&a.defense, a.t, a.repeat, a.time_s)
            .partial_cmp(&(&b.defense, b.t, b.repeat, b.time_s))
            .unwrap()
    });
    Ok(SweepResults { rows, violations })
}

#[cfg(feature = "parallel")]
fn execute(
    cfg: &ExperimentConfig,
    tasks: &[Task],
    mode: ExecMode,
) -> Result<Vec<(SweepRow, Vec<ViolationRow>)>, SweepError> {
    use rayon::prelude::*;
    match mode {
        ExecMode::Parallel => tasks.par_iter().map(|t| run_task(cfg, t)).collect(),
        ExecMode::Sequential => tasks.iter().map(|t| run_task(cfg, t)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn execute(
    cfg: &ExperimentConfig,
    tasks: &[Task],
    _mode: ExecMode,
) -> Result<Vec<(SweepRow, Vec<ViolationRow>)>, SweepError> {
    tasks.iter().map(|t| run_task(cfg, t)).collect()
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_opt_bool(v: Option<bool>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "defense,trace,T,repeat,seed,horizon_s,good_spend_rate,adversary_spend_rate_observed,\
         good_total,good_entrance,good_purge,good_periodic,adversary_total,max_bad_fraction,\
         min_good_population,purges,intervals,good_joins,bad_joins_admitted,bad_attempts,\
         mean_entrance_cost,lemma7_violations,lemma8_violations,lemma8_windows,cutoff_time_s,\
         remp_valid,suppressed_departures,staggered_departures,violation_count,failed\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.defense,
            r.trace,
            r.t,
            r.repeat,
            r.seed,
            r.horizon_s,
            r.good_spend_rate,
            r.adversary_spend_rate_observed,
            r.good_total,
            r.good_entrance,
            r.good_purge,
            r.good_periodic,
            r.adversary_total,
            r.max_bad_fraction,
            r.min_good_population,
            r.purges,
            r.intervals,
            r.good_joins,
            r.bad_joins_admitted,
            r.bad_attempts,
            r.mean_entrance_cost,
            r.lemma7_violations,
            r.lemma8_violations,
            r.lemma8_windows,
            fmt_opt_f64(r.cutoff_time_s),
            fmt_opt_bool(r.remp_valid),
            r.suppressed_departures,
            r.staggered_departures,
            r.violation_count,
            r.failed,
        );
    }
    out
}

/// Per-(defense, T) medians of the good spend rate across repeats.
pub fn median_rows(rows: &[SweepRow]) -> Vec<(String, f64, f64, f64, u32)> {
    let mut groups: Vec<(String, f64, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in rows {
        match groups
            .iter_mut()
            .find(|(d, t, _, _)| d == &r.defense && *t == r.t)
        {
            Some((_, _, goods, advs)) => {
                goods.push(r.good_spend_rate);
                advs.push(r.adversary_spend_rate_observed);
            }
            None => groups.push((
                r.defense.clone(),
                r.t,
                vec![r.good_spend_rate],
                vec![r.adversary_spend_rate_observed],
            )),
        }
    }
    groups
        .into_iter()
        .map(|(d, t, mut goods, mut advs)| {
            goods.sort_by(f64::total_cmp);
            advs.sort_by(f64::total_cmp);
            let n = goods.len();
            (d, t, median_of_sorted(&goods), median_of_sorted(&advs), n as u32)
        })
        .collect()
}

pub fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("defense,T,median_good_spend_rate,median_adversary_spend_rate,repeats\n");
    for (d, t, g, a, n) in median_rows(rows) {
        let _ = writeln!(out, "{d},{t},{g},{a},{n}");
    }
    out
}

pub fn violations_csv(rows: &[ViolationRow]) -> String {
    let mut out = String::from("defense,T,repeat,seed,time_s,what\n");
    for v in rows {
        let what = v.what.replace(',', ";");
        let _ = writeln!(out, "{},{},{},{},{},{}", v.defense, v.t, v.repeat, v.seed, v.time_s, what);
    }
    out
}

#[derive(Serialize)]
struct RunMeta<'a> {
    schema_version: u32,
    code_version: &'static str,
    config: &'a ExperimentConfig,
    derived_seeds: Vec<u64>,
    entrance_window_rule: &'static str,
    h3_purge_rule: &'static str,
    trace_notes: Vec<TraceNote>,
}

#[derive(Serialize)]
struct TraceNote {
    repeat: u32,
    seed: u64,
    events: usize,
    nominal_join_rate: f64,
    suppressed_departures: u64,
    staggered_departures: u64,
}

pub fn run_meta_json(cfg: &ExperimentConfig) -> Result<String, SweepError> {
    let mut notes = Vec::new();
    for repeat in 0..cfg.repeats {
        let trace = build_trace(cfg, repeat)?;
        notes.push(TraceNote {
            repeat,
            seed: cfg.trace.seed + repeat as u64,
            events: trace.event_count(),
            nominal_join_rate: trace.nominal_join_rate,
            suppressed_departures: trace.suppressed_departures,
            staggered_departures: trace.staggered_departures,
        });
    }
    let meta = RunMeta {
        schema_version: SCHEMA_VERSION,
        code_version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        derived_seeds: (0..cfg.repeats)
            .map(|r| cfg.sim.rng_seed.wrapping_add(r as u64))
            .collect(),
        entrance_window_rule:
            "cost = 1 + admitted joins in the trailing 1/estimate seconds, window clipped at the \
             iteration start unless window_truncate_at_iteration is off",
        h3_purge_rule:
            "suppress a due purge while kappa*|S(tau)| + min(ceil(elapsed*(total_join_rate - \
             estimate)), joins) < |S_now|/6; always purge once joins+departs >= \
             ceil((27/20)*|S(tau)|/11)",
        trace_notes: notes,
    };
    Ok(serde_json::to_string_pretty(&meta)? + "\n")
}

impl From<serde_json::Error> for SweepError {
    fn from(e: serde_json::Error) -> Self {
        SweepError::Config(e.to_string())
    }
}

/// Write sweep.csv, sweep_summary.csv, violations.csv, and run_meta.json.
pub fn emit_outputs(
    results: &SweepResults,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(), SweepError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("sweep.csv"), sweep_csv(&results.rows))?;
    fs::write(out_dir.join("sweep_summary.csv"), summary_csv(&results.rows))?;
    fs::write(out_dir.join("violations.csv"), violations_csv(&results.violations))?;
    fs::write(out_dir.join("run_meta.json"), run_meta_json(cfg)?)?;
    Ok(())
}

/// Detail CSVs for one run (the `simulate` subcommand).
pub fn emit_run_details(out: &RunOutput, dir: &Path) -> Result<(), SweepError> {
    fs::create_dir_all(dir)?;
    let mut epochs = String::from("index,start_s,end_s,good_joins,rho\n");
    for e in &out.epochs {
        let _ = writeln!(epochs, "{},{},{},{},{}", e.index, e.start, e.end, e.good_joins, e.rho);
    }
    fs::write(dir.join("epochs.csv"), epochs)?;

    let mut ratio = String::from("time_s,estimate,true_rho,ratio\n");
    for s in &out.ratio_series {
        let _ = writeln!(ratio, "{},{},{},{}", s.time, s.estimate, s.true_rho, s.ratio);
    }
    fs::write(dir.join("ratio.csv"), ratio)?;

    let mut committee = String::from("iteration,size,good_fraction,size_ok,majority_ok\n");
    for a in &out.committee_audits {
        let _ = writeln!(
            committee,
            "{},{},{},{},{}",
            a.iteration, a.size, a.good_fraction, a.size_ok, a.majority_ok
        );
    }
    fs::write(dir.join("committee.csv"), committee)?;

    let mut iterations = String::from(
        "iter,start_s,end_s,size_at_tau,joins,departs,purge_cost,entrance_cost_good,entrance_cost_bad\n",
    );
    for i in &out.iterations {
        let _ = writeln!(
            iterations,
            "{},{},{},{},{},{},{},{},{}",
            i.iter,
            i.start_s,
            i.end_s,
            i.size_at_tau,
            i.joins,
            i.departs,
            i.purge_cost,
            i.entrance_cost_good,
            i.entrance_cost_bad
        );
    }
    fs::write(dir.join("iterations.csv"), iterations)?;

    let mut intervals = String::from("interval,start_s,end_s,size,estimate,true_rate\n");
    for iv in &out.intervals {
        let _ = writeln!(
            intervals,
            "{},{},{},{},{},{}",
            iv.interval, iv.start_s, iv.end_s, iv.size, iv.estimate, iv.true_rate
        );
    }
    fs::write(dir.join("intervals.csv"), intervals)?;

    fs::write(
        dir.join("run_meta.json"),
        serde_json::to_string_pretty(out)? + "\n",
    )?;
    Ok(())
}

/// Estimate-ratio experiment: for each seeded bad fraction and attack rate,
/// run the full defense and report the per-interval estimate/true ratio.
pub fn default_estimate_fractions() -> Vec<f64> {
    vec![1.0 / 1500.0, 1.0 / 375.0, 1.0 / 94.0, 1.0 / 24.0, 1.0 / 6.0]
}

#[derive(Clone, Debug)]
pub struct EstimateRun {
    pub fraction: f64,
    pub t: f64,
    pub output: RunOutput,
}

pub fn run_estimate(
    cfg: &ExperimentConfig,
    fractions: &[f64],
    t_values: &[f64],
    mode: ExecMode,
) -> Result<Vec<EstimateRun>, SweepError> {
    cfg.validate().map_err(SweepError::Config)?;
    let trace = Arc::new(build_trace(cfg, 0)?);
    let defense = parse_defense(cfg.defenses.first().map(String::as_str).unwrap_or("ergo"), cfg)
        .map_err(SweepError::Config)?;
    let mirror_source = match &cfg.trace.source {
        TraceSource::File { .. } => None,
        src => Some(src.clone()),
    };
    let mut points = Vec::new();
    for &f in fractions {
        for &t in t_values {
            points.push((f, t));
        }
    }
    let run_one = |&(f, t): &(f64, f64)| -> Result<EstimateRun, SweepError> {
        let mut rc = run_config_for(cfg, defense.clone(), t, 0);
        rc.mirror_bad_fraction = (f > 0.0).then_some(f);
        rc.mirror_session_source = mirror_source.clone();
        let output = run_single(&trace, &rc)?;
        Ok(EstimateRun { fraction: f, t, output })
    };
    let mut runs = run_points(&points, run_one, mode)?;
    runs.sort_by(|a, b| (a.fraction, a.t).partial_cmp(&(b.fraction, b.t)).unwrap());
    Ok(runs)
}

#[cfg(feature = "parallel")]
fn run_points<F>(
    points: &[(f64, f64)],
    run_one: F,
    mode: ExecMode,
) -> Result<Vec<EstimateRun>, SweepError>
where
    F: Fn(&(f64, f64)) -> Result<EstimateRun, SweepError> + Sync + Send,
{
    use rayon::prelude::*;
    match mode {
        ExecMode::Parallel => points.par_iter().map(&run_one).collect(),
        ExecMode::Sequential => points.iter().map(&run_one).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_points<F>(
    points: &[(f64, f64)],
    run_one: F,
    _mode: ExecMode,
) -> Result<Vec<EstimateRun>, SweepError>
where
    F: Fn(&(f64, f64)) -> Result<EstimateRun, SweepError> + Sync + Send,
{
    points.iter().map(|p| run_one(p)).collect()
}

pub fn estimate_csv(runs: &[EstimateRun]) -> String {
    let mut out = String::from(
        "fraction,T,intervals,ratio_min,ratio_max,envelope_violations,max_bad_fraction\n",
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.fraction,
            r.t,
            r.output.interval_count,
            fmt_opt_f64(r.output.ratio_min),
            fmt_opt_f64(r.output.ratio_max),
            r.output
                .envelope_violations
                .map(|v| v.to_string())
                .unwrap_or_default(),
            r.output.max_bad_fraction,
        );
    }
    out
}
