//! `tts-sim` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tts_sim::compare::compare;
use tts_sim::io;
use tts_sim::schedule::{cots_from_trace, schedule_trace};
use tts_sim_core::prefix_sched::SchedulePolicy;
use tts_sim_core::roofline::search_with_offload;
use tts_sim_core::sim::run_with_trace;

#[derive(Debug, Parser)]
#[command(name = "tts-sim", version, about = "Simulator for verifier-guided test-time scaling under tight memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write its metrics report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the step trace as JSON lines.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        /// Also write the per-tick occupancy as JSON lines.
        #[arg(long)]
        occupancy_out: Option<PathBuf>,
    },
    /// Search the generator/verifier KV split and print the allocation.
    Allocate {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        device: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Order the CoTs of a trace and report prefix sum and eviction cost.
    Schedule {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyArg,
        #[arg(long)]
        out: PathBuf,
        /// Seed of the random policy.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only use CoTs ending in this iteration.
        #[arg(long)]
        iter: Option<u32>,
        /// Cache budget in tokens; defaults to the full working set.
        #[arg(long)]
        budget_tokens: Option<u64>,
    },
    /// Run baseline and full policies over seeds `0..N` and compare them.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Greedy,
    Random,
    Worst,
}

impl From<PolicyArg> for SchedulePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Greedy => SchedulePolicy::Greedy,
            PolicyArg::Random => SchedulePolicy::Random,
            PolicyArg::Worst => SchedulePolicy::WorstCase,
        }
    }
}

/// Input files must exist and output directories must be present.
fn check_paths(inputs: &[&Path], outputs: &[&Path]) -> Result<(), String> {
    for p in inputs {
        if !p.is_file() {
            return Err(format!("input file not found: {}", p.display()));
        }
    }
    for p in outputs {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(format!("output directory not found: {}", parent.display()));
        }
    }
    Ok(())
}

fn paths(cmd: &Command) -> (Vec<&Path>, Vec<&Path>) {
    match cmd {
        Command::Simulate { config, out, trace_out, occupancy_out, .. } => {
            let mut outs = vec![out.as_path()];
            outs.extend(trace_out.as_deref());
            outs.extend(occupancy_out.as_deref());
            (vec![config], outs)
        }
        Command::Allocate { profiles, device, out } => (vec![profiles, device], out.as_deref().into_iter().collect()),
        Command::Schedule { trace, out, .. } => (vec![trace], vec![out]),
        Command::Compare { config, out, .. } => (vec![config], vec![out]),
    }
}

fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate { config, seed, out, trace_out, occupancy_out } => {
            let mut cfg = io::read_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (report, trace) = run_with_trace(&cfg).context("simulation failed")?;
            io::write_metrics(&report, &out)?;
            if let Some(p) = trace_out {
                io::write_trace(&trace, &p)?;
            }
            if let Some(p) = occupancy_out {
                io::write_occupancy(&report, &p)?;
            }
            println!(
                "seed {}: goodput {:.3} tok/s, completion {:.3} s/problem, {} beams, evicted {} tokens, occupancy {:.3}, spec hit rate {:.3}",
                cfg.seed,
                report.precise_goodput,
                report.avg_completion_time,
                report.completed_beams,
                report.eviction_tokens_total,
                report.mean_occupancy(),
                report.spec_hit_rate
            );
        }
        Command::Allocate { profiles, device, out } => {
            let problem = io::read_profiles(&profiles)?.problem(io::read_device(&device)?);
            let a = search_with_offload(&problem).context("allocation failed")?;
            if let Some(p) = out {
                io::write_json(&a, &p)?;
            }
            println!("{}", serde_json::to_string_pretty(&a)?);
        }
        Command::Schedule { trace, policy, out, seed, iter, budget_tokens } => {
            let records = io::read_trace(&trace)?;
            let cots = cots_from_trace(&records, iter, budget_tokens)?;
            let report = schedule_trace(&cots, policy.into(), seed).context("scheduling failed")?;
            io::write_json(&report, &out)?;
            println!(
                "{:?} over {} CoTs: prefix_sum {}, eviction_cost {}",
                report.policy,
                report.order.len(),
                report.prefix_sum,
                report.eviction_cost
            );
        }
        Command::Compare { config, seeds, out } => {
            let cfg = io::read_config(&config)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let summary = compare(&cfg, &seeds).context("comparison failed")?;
            io::write_json(&summary, &out)?;
            println!("seed  goodput_ratio  latency_ratio  eviction_ratio");
            for s in &summary.seeds {
                let ev = s.eviction_ratio.map_or("-".to_string(), |r| format!("{r:.3}"));
                println!("{:4}  {:13.3}  {:13.3}  {:>14}", s.seed, s.goodput_ratio, s.latency_ratio, ev);
            }
            println!(
                "mean  {:13.3}  {:13.3}  goodput up on all seeds: {}, latency down on all seeds: {}",
                summary.mean_goodput_ratio,
                summary.mean_latency_ratio,
                summary.goodput_improved_on_all,
                summary.latency_reduced_on_all
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (inputs, outputs) = paths(&cli.command);
    if let Err(msg) = check_paths(&inputs, &outputs) {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

