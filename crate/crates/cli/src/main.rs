//! Benchmark harness: builds a synthetic workload, runs it on a configurable
//! executor, and emits DOT graphs, placement dumps, and JSON reports.
//!
//! Exit codes: 0 on success, 1 on run failure or checksum mismatch, 2 on bad
//! flags.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, ValueEnum};

use taskfabric::placement;
use taskfabric::Executor;
use taskfabric_cli::report::{Report, RunSample};
use taskfabric_cli::workloads::{self, WorkloadKind, WorkloadSpec};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Saxpy,
    Views,
    Iterative,
    RandomDag,
}

impl From<WorkloadArg> for WorkloadKind {
    fn from(arg: WorkloadArg) -> Self {
        match arg {
            WorkloadArg::Saxpy => WorkloadKind::Saxpy,
            WorkloadArg::Views => WorkloadKind::Views,
            WorkloadArg::Iterative => WorkloadKind::Iterative,
            WorkloadArg::RandomDag => WorkloadKind::RandomDag,
        }
    }
}

fn parse_density(s: &str) -> Result<f64, String> {
    let value: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(format!("density must lie in [0, 1], got {value}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "taskfabric", version, about = "Task-graph runtime benchmark harness")]
struct Args {
    /// Workload to generate and run.
    #[arg(long, value_enum)]
    workload: WorkloadArg,

    /// CPU worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    workers: u16,

    /// Simulated accelerator devices.
    #[arg(long, default_value_t = 1)]
    gpus: u16,

    /// Vector length (saxpy).
    #[arg(long, default_value_t = 65536)]
    n: usize,

    /// Independent branch count (views).
    #[arg(long, default_value_t = 64)]
    views: usize,

    /// Stage count (iterative).
    #[arg(long, default_value_t = 5)]
    iterations: usize,

    /// Node count (random-dag).
    #[arg(long, default_value_t = 1000)]
    nodes: usize,

    /// Edge density in [0, 1] (random-dag).
    #[arg(long, default_value_t = 0.01, value_parser = parse_density)]
    density: f64,

    /// Generation seed (random-dag).
    #[arg(long, default_value_t = 42)]
    seed: u64,

    /// Timed runs to sample.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    runs: u16,

    /// Simulated device busy time per kernel, in microseconds.
    #[arg(long, default_value_t = 0)]
    work_units: u64,

    /// Per-device memory pool size in bytes (power of two).
    #[arg(long, default_value_t = taskfabric::DEFAULT_CAPACITY)]
    device_capacity: usize,

    /// Write the generated graph in DOT format to this path.
    #[arg(long)]
    dot: Option<PathBuf>,

    /// Write the device placement of the generated graph as JSON.
    #[arg(long)]
    placement_json: Option<PathBuf>,

    /// Write the JSON run report to this path instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: &Args) -> anyhow::Result<()> {
    let spec = WorkloadSpec {
        kind: args.workload.into(),
        n: args.n,
        views: args.views,
        iterations: args.iterations,
        nodes: args.nodes,
        density: args.density,
        seed: args.seed,
        work_units: args.work_units,
        gpu_tasks: args.gpus > 0,
    };
    let workload = workloads::build(&spec);

    if let Some(path) = &args.dot {
        std::fs::write(path, workload.graph.dump_dot())
            .with_context(|| format!("writing DOT to {}", path.display()))?;
    }
    if let Some(path) = &args.placement_json {
        let placed = placement::place(&workload.graph, args.gpus as usize)
            .context("computing device placement")?;
        let names = workload.graph.nodes();
        let assignments: Vec<_> = placed
            .assignments()
            .map(|(node, device)| {
                serde_json::json!({
                    "node": node,
                    "name": names[node].name,
                    "device": device,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "device_loads": placed.device_loads,
            "assignments": assignments,
        });
        std::fs::write(path, serde_json::to_string_pretty(&doc)?)
            .with_context(|| format!("writing placement to {}", path.display()))?;
    }

    let mut samples = Vec::with_capacity(args.runs as usize);
    let mut checksum_ok = true;
    for run_index in 0..args.runs {
        // A fresh executor per sample keeps the statistics per-run.
        let executor = Executor::builder()
            .workers(args.workers as usize)
            .devices(args.gpus as usize)
            .device_capacity(args.device_capacity)
            .build()
            .context("constructing executor")?;
        let started = Instant::now();
        let result = executor.run(&workload.graph).wait();
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        result.with_context(|| format!("run {run_index} failed"))?;
        if let Err(mismatch) = workload.verify() {
            eprintln!("run {run_index}: checksum mismatch: {mismatch}");
            checksum_ok = false;
        }
        samples.push(RunSample { wall_ms, stats: executor.stats() });
    }

    let report = Report {
        workload: spec,
        workers: args.workers as usize,
        gpus: args.gpus as usize,
        runs: samples,
        checksum_ok,
    };
    let rendered = serde_json::to_string_pretty(&report)?;
    match &args.report {
        Some(path) => {
            std::fs::write(path, rendered)
                .with_context(|| format!("writing report to {}", path.display()))?;
            println!("report written to {}", path.display());
        }
        None => println!("{rendered}"),
    }

    anyhow::ensure!(checksum_ok, "workload checksum did not match its oracle");
    Ok(())
}
