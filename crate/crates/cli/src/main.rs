//! `halo`: single missions, planner sweeps and reconstruction benchmarks driven
//! by scenario files.
//!
//! Exit codes: 0 when every task completed, 2 when a run timed out or stalled,
//! 1 on any error.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use halo_core::baselines::PlannerKind;
use halo_core::mission::{
    format_summary_table, run_mission, run_recon_bench, run_sweep, summarize, write_event_log, write_summary_csv,
    write_sweep_rows, ReconRow, Trajectory,
};
use halo_core::scenario::{Scenario, ScenarioFile};

const OUT_ENV: &str = "HALO_OUT";
const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "halo", version, about = "Simulated high-altitude mapping and exploration missions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fly one mission and write its event log and metrics.
    Run(RunArgs),
    /// Fly every planner on every seed and tabulate the results.
    Sweep(SweepArgs),
    /// Fly a scripted path and score the reconstruction against the terrain.
    ReconBench(ReconArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory; defaults to a subdirectory of $HALO_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into an existing, non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Build the pose graph without GPS priors.
    #[arg(long)]
    no_gps: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// halo, coverage, frontier, fuel or vlfm.
    #[arg(long, default_value = "halo")]
    planner: PlannerKind,
    /// Run seed; defaults to the first seed listed in the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write grids, frontiers, the pose graph and point clouds.
    #[arg(long)]
    export_maps: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated planners; defaults to all five.
    #[arg(long, value_delimiter = ',')]
    planner: Vec<PlannerKind>,
    /// Comma-separated seeds; defaults to the scenario's seed list.
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Debug, Args)]
struct ReconArgs {
    #[command(flatten)]
    common: Common,
    /// coverage or perimeter.
    #[arg(long, default_value = "coverage")]
    trajectory: Trajectory,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", usage_for_args());
            }
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ReconBench(a) => cmd_recon_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Usage of the subcommand named on the command line, or of the whole tool.
fn usage_for_args() -> String {
    let mut cmd = Cli::command();
    let name = std::env::args().nth(1).unwrap_or_default();
    match cmd.find_subcommand_mut(&name) {
        Some(sub) => sub.clone().bin_name(format!("halo {name}")).render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn load(common: &Common) -> Result<ScenarioFile> {
    ScenarioFile::load(&common.scenario).with_context(|| format!("loading {}", common.scenario.display()))
}

fn build(file: &ScenarioFile, common: &Common, seed: u64) -> Result<Scenario> {
    let mut sc = file.build(seed).with_context(|| format!("building scenario for seed {seed}"))?;
    if common.no_gps {
        sc.config.graph.use_gps_priors = false;
    }
    Ok(sc)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "scenario".to_string(), |s| s.to_string_lossy().into_owned())
}

/// Creates the output directory, refusing to reuse a non-empty one without `--force`.
fn prepare_out(common: &Common, default_name: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => PathBuf::from(std::env::var_os(OUT_ENV).unwrap_or_else(|| DEFAULT_OUT_ROOT.into())).join(default_name),
    };
    if dir.exists() && !common.force && fs::read_dir(&dir)?.next().is_some() {
        bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let line: Vec<String> = std::env::args().map(|a| shell_quote(&a)).collect();
    fs::write(dir.join("invocation.txt"), line.join(" ") + "\n")?;
    Ok(dir)
}

fn shell_quote(arg: &str) -> String {
    let plain = !arg.is_empty() && arg.chars().all(|c| c.is_ascii_alphanumeric() || "-_./=:,@%+".contains(c));
    if plain {
        arg.to_string()
    } else {
        format!("'{}'", arg.replace('\'', "'\\''"))
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_run(a: &RunArgs) -> Result<ExitCode> {
    let file = load(&a.common)?;
    let seed = a.seed.unwrap_or_else(|| file.seeds()[0]);
    let sc = build(&file, &a.common, seed)?;
    let dir = prepare_out(&a.common, &format!("{}-{}-{seed}", stem(&a.common.scenario), a.planner))?;
    let outcome = run_mission(&sc.world, &sc.config, a.planner, seed)?;
    write_event_log(&outcome.events, create(&dir, "events.jsonl")?)?;
    outcome.metrics.write_csv(create(&dir, "metrics.csv")?)?;
    serde_json::to_writer_pretty(create(&dir, "summary.json")?, &outcome.metrics)?;
    if a.export_maps {
        outcome.export_maps(&sc.world, &dir.join("maps"))?;
    }
    let m = &outcome.metrics;
    for t in &m.tasks {
        let cr = t.cr.map_or_else(|| "-".to_string(), |c| format!("{c:.2}"));
        println!("{:<16} time {:>8.1} s  distance {:>8.1} m  d_opt {:>7.1} m  CR {cr}", t.task_id, t.time_s, t.distance_m, t.d_opt_m);
    }
    println!("outputs in {}", dir.display());
    if m.all_complete() {
        Ok(ExitCode::SUCCESS)
    } else {
        let why = if m.timed_out { "timed out" } else { "stalled" };
        eprintln!("mission {why} with tasks incomplete");
        Ok(ExitCode::from(2))
    }
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u64>().with_context(|| format!("invalid seed {s:?}")))
        .collect()
}

fn cmd_sweep(a: &SweepArgs) -> Result<ExitCode> {
    let file = load(&a.common)?;
    let seeds = match &a.seeds {
        Some(text) => parse_seeds(text)?,
        None => file.seeds(),
    };
    if seeds.is_empty() {
        bail!("the seed list is empty");
    }
    let planners = if a.planner.is_empty() { PlannerKind::ALL.to_vec() } else { a.planner.clone() };
    let dir = prepare_out(&a.common, &format!("{}-sweep", stem(&a.common.scenario)))?;
    let rows = run_sweep(&planners, &seeds, |kind, seed| {
        let sc = build(&file, &a.common, seed).map_err(|e| halo_core::mission::MissionError::BadSpec(format!("{e:#}")))?;
        run_mission(&sc.world, &sc.config, kind, seed).map(|o| o.metrics)
    });
    write_sweep_rows(&rows, create(&dir, "runs.csv")?)?;
    let summary = summarize(&rows);
    write_summary_csv(&summary, create(&dir, "summary.csv")?)?;
    let table = format_summary_table(&summary);
    fs::write(dir.join("summary.txt"), &table)?;
    print!("{table}");
    for r in rows.iter().filter(|r| r.result.is_err()) {
        eprintln!("{} seed {} failed: {}", r.planner, r.seed, r.result.as_ref().unwrap_err());
    }
    println!("outputs in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_recon_bench(a: &ReconArgs) -> Result<ExitCode> {
    let file = load(&a.common)?;
    let seed = a.seed.unwrap_or_else(|| file.seeds()[0]);
    let sc = build(&file, &a.common, seed)?;
    let dir = prepare_out(&a.common, &format!("{}-recon-{seed}", stem(&a.common.scenario)))?;
    let modes: &[bool] = if a.common.no_gps { &[false] } else { &[true, false] };
    let mut rows: Vec<ReconRow> = Vec::new();
    for &gps in modes {
        let row = run_recon_bench(&sc.world, &sc.config, a.trajectory, gps, seed)?;
        let name = if gps { "reconstruction_gps.ply" } else { "reconstruction_nogps.ply" };
        row.cloud.write_ply(create(&dir, name)?)?;
        rows.push(row);
    }
    sc.world.surface_cloud(1).write_ply(create(&dir, "terrain.ply")?)?;
    let mut csv = create(&dir, "recon.csv")?;
    writeln!(csv, "gps,frames,submaps,scale,accuracy_m,completion_m,chamfer_m")?;
    println!("{:<6} {:>7} {:>8} {:>8} {:>10} {:>12} {:>9}", "gps", "frames", "submaps", "scale", "accuracy", "completion", "chamfer");
    for r in &rows {
        let m = &r.metrics;
        writeln!(csv, "{},{},{},{},{},{},{}", r.gps, r.frames, r.submaps, r.scale, m.accuracy, m.completion, m.chamfer)?;
        println!(
            "{:<6} {:>7} {:>8} {:>8.3} {:>10.3} {:>12.3} {:>9.3}",
            r.gps, r.frames, r.submaps, r.scale, m.accuracy, m.completion, m.chamfer
        );
    }
    csv.flush()?;
    println!("outputs in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}
