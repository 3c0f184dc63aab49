//! CLI for the churn/Sybil-defense simulator.
//!
//! Exit codes: 0 on success, 2 when a run finished but an audited invariant
//! was violated, 1 on config or IO errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ergo_sim::config::{default_sweep_t, parse_defense, ExperimentConfig};
use ergo_sim::metrics::{
    default_window_grid, detect_epochs, estimate_alpha, estimate_beta, good_events_from_trace,
};
use ergo_sim::runner::{run_single, RunOutput};
use ergo_sim::sweep::{
    build_trace, default_estimate_fractions, emit_outputs, emit_run_details, estimate_csv,
    run_config_for, run_estimate, run_sweep, ExecMode,
};
use ergo_sim::trace::{export_csv, ingest_trace_file};

#[derive(Parser)]
#[command(
    name = "ergo-sim",
    version,
    about = "Discrete-event simulator for resource-burning Sybil defenses under churn"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single simulation and write its detail CSVs.
    Simulate(RunArgs),
    /// Spend-rate sweep over the adversary rate T (one row per defense, T, repeat).
    Sweep(RunArgs),
    /// Estimate-ratio experiment across seeded bad fractions and T in {0, 1e4}.
    Estimate(EstimateArgs),
    /// Churn-trace tooling.
    Trace {
        #[command(subcommand)]
        cmd: TraceCmd,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; defaults to a Gnutella-style setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base RNG seed (overrides the config's trace and run seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Simulated horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Run sweep points on the current thread instead of the worker pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Defense name(s), comma separated for sweeps:
    /// ergo, ergo-ch1, ergo-ch2, ergo-sf92, ergo-sf98, ccom, sybilcontrol, remp.
    #[arg(long)]
    defense: Option<String>,
    /// Adversary spend rate T (challenge-units/second). Simulate uses it
    /// directly; sweep replaces the whole T grid with this single value.
    #[arg(long = "T")]
    t: Option<f64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Seeded bad fractions (defaults to 1/1500, 1/375, 1/94, 1/24, 1/6).
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Adversary rates to test (defaults to 0 and 10000).
    #[arg(long = "T", value_delimiter = ',')]
    t_values: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum TraceCmd {
    /// Generate a synthetic trace and print its summary.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a trace and export it as CSV (initial members become join
    /// rows at negative timestamps).
    Export {
        #[command(flatten)]
        common: CommonArgs,
        /// CSV file to write.
        #[arg(long)]
        file: PathBuf,
    },
    /// Epoch and smoothness report for a trace file or the config's source.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Trace CSV to ingest instead of generating from the config.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Only read the first N events.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_config(common: &CommonArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => ExperimentConfig::example(),
    };
    if let Some(seed) = common.seed {
        cfg.trace.seed = seed;
        cfg.sim.rng_seed = seed;
    }
    if let Some(h) = common.horizon {
        cfg.horizon_s = h;
        cfg.trace.duration = h;
    }
    cfg.validate().map_err(anyhow::Error::msg)?;
    Ok(cfg)
}

fn mode_of(common: &CommonArgs) -> ExecMode {
    if common.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    }
}

fn print_run_summary(out: &RunOutput) {
    println!("defense            {}", out.defense);
    println!("horizon            {} s", out.horizon);
    println!("good spend rate    {:.6} units/s", out.rates.good_spend_rate);
    println!(
        "adversary rate     {:.6} units/s (ledgered)",
        out.rates.adversary_spend_rate_observed
    );
    println!(
        "good spend split   entrance {} + purge {} + periodic {}",
        out.good_entrance, out.good_purge, out.good_periodic
    );
    println!("max bad fraction   {:.6}", out.max_bad_fraction);
    println!("purges             {}", out.purge_count);
    println!("estimate intervals {}", out.interval_count);
    println!(
        "joins              good {} / bad {} (attempts {})",
        out.good_joins, out.bad_joins_admitted, out.bad_attempts
    );
    if let Some(cut) = out.cutoff_time {
        println!("bad fraction hit 1/6 at t={cut:.3} s");
    }
    if let (Some(lo), Some(hi)) = (out.ratio_min, out.ratio_max) {
        println!("estimate/true ratio range ({lo:.4}, {hi:.4})");
    }
    for v in &out.violations {
        println!("VIOLATION t={:.3}: {}", v.time, v.what);
    }
}

fn cmd_simulate(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&args.common)?;
    if let Some(d) = &args.defense {
        cfg.defenses = vec![d.clone()];
    }
    let t = args.t.unwrap_or(0.0);
    let defense = parse_defense(
        cfg.defenses.first().map(String::as_str).unwrap_or("ergo"),
        &cfg,
    )
    .map_err(anyhow::Error::msg)?;
    let trace = build_trace(&cfg, 0)?;
    let mut rc = run_config_for(&cfg, defense, t, 0);
    rc.collect_details = true;
    let out = run_single(&trace, &rc)?;
    print_run_summary(&out);
    emit_run_details(&out, &args.common.out)?;
    println!("detail CSVs written to {}", args.common.out.display());
    Ok(if out.failed() { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn cmd_sweep(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(&args.common)?;
    if let Some(d) = &args.defense {
        cfg.defenses = d.split(',').map(str::trim).map(String::from).collect();
    }
    if let Some(t) = args.t {
        cfg.sweep_t = vec![t];
    } else if cfg.sweep_t.is_empty() {
        cfg.sweep_t = default_sweep_t();
    }
    let results = run_sweep(&cfg, mode_of(&args.common))?;
    emit_outputs(&results, &cfg, &args.common.out)?;
    println!(
        "{} rows ({} defense(s) x {} T value(s) x {} repeat(s)) -> {}",
        results.rows.len(),
        cfg.defenses.len(),
        cfg.sweep_t.len(),
        cfg.repeats,
        args.common.out.display()
    );
    let failed = results.rows.iter().filter(|r| r.failed).count();
    if failed > 0 {
        println!("{failed} run(s) violated an audited invariant; see violations.csv");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_estimate(args: &EstimateArgs) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&args.common)?;
    let fractions = args
        .fractions
        .clone()
        .unwrap_or_else(default_estimate_fractions);
    let t_values = args.t_values.clone().unwrap_or_else(|| vec![0.0, 10_000.0]);
    let runs = run_estimate(&cfg, &fractions, &t_values, mode_of(&args.common))?;
    std::fs::create_dir_all(&args.common.out)?;
    std::fs::write(args.common.out.join("estimate.csv"), estimate_csv(&runs))?;
    let mut failed = false;
    for (i, run) in runs.iter().enumerate() {
        let name = format!("ratio_f{}_T{}.csv", i / t_values.len(), run.t);
        let mut text = String::from("time_s,estimate,true_rho,ratio\n");
        for s in &run.output.ratio_series {
            text.push_str(&format!("{},{},{},{}\n", s.time, s.estimate, s.true_rho, s.ratio));
        }
        std::fs::write(args.common.out.join(name), text)?;
        println!(
            "fraction {:>10.6} T {:>7}: intervals {:>3}, ratio in ({}, {}), envelope violations {:?}",
            run.fraction,
            run.t,
            run.output.interval_count,
            run.output.ratio_min.map(|v| format!("{v:.4}")).unwrap_or_default(),
            run.output.ratio_max.map(|v| format!("{v:.4}")).unwrap_or_default(),
            run.output.envelope_violations
        );
        failed |= run.output.failed();
    }
    println!("estimate outputs written to {}", args.common.out.display());
    Ok(if failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn trace_summary(trace: &ergo_sim::trace::ChurnTrace) {
    println!("initial members    {}", trace.initial_ids.len());
    println!("events             {}", trace.event_count());
    println!("nominal join rate  {:.6}/s", trace.nominal_join_rate);
    println!(
        "floor suppressions {} / epsilon staggers {}",
        trace.suppressed_departures, trace.staggered_departures
    );
}

fn cmd_trace(cmd: &TraceCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        TraceCmd::Gen { common } => {
            let cfg = load_config(common)?;
            let trace = build_trace(&cfg, 0)?;
            trace_summary(&trace);
            Ok(ExitCode::SUCCESS)
        }
        TraceCmd::Export { common, file } => {
            let cfg = load_config(common)?;
            let trace = build_trace(&cfg, 0)?;
            if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(file, export_csv(&trace))?;
            trace_summary(&trace);
            println!("exported to {}", file.display());
            Ok(ExitCode::SUCCESS)
        }
        TraceCmd::Analyze { common, file, limit } => {
            let trace = match file {
                Some(path) => ingest_trace_file(Path::new(path), *limit)?,
                None => build_trace(&load_config(common)?, 0)?,
            };
            trace_summary(&trace);
            let (initial_good, events, end) = good_events_from_trace(&trace);
            let horizon = if end > 0.0 { end } else { 1.0 };
            let epochs = detect_epochs(initial_good, &events, horizon);
            println!("epochs             {} ({} complete)", epochs.len(),
                epochs.iter().filter(|e| e.complete).count());
            match estimate_alpha(&epochs) {
                Ok(a) => println!("alpha              {:.4} over {} pairs", a.alpha, a.pairs_used),
                Err(e) => println!("alpha              n/a ({e})"),
            }
            let grid: Vec<f64> = epochs
                .iter()
                .filter(|e| e.complete)
                .flat_map(|e| default_window_grid(e.end - e.start))
                .collect();
            if !grid.is_empty() {
                match estimate_beta(&epochs, &events, &grid) {
                    Ok(b) => println!(
                        "beta               {:.4} over {} windows (grid lower bound)",
                        b.beta, b.windows_checked
                    ),
                    Err(e) => println!("beta               n/a ({e})"),
                }
            }
            std::fs::create_dir_all(&common.out)?;
            let mut text = String::from("index,start_s,end_s,good_joins,rho\n");
            for e in &epochs {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.index, e.start, e.end, e.good_joins, e.rho
                ));
            }
            let path = common.out.join("epochs.csv");
            std::fs::write(&path, text)?;
            println!("epochs written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Trace { cmd } => cmd_trace(cmd),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
