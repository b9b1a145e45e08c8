use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::Parser;

use mcsnet::config::{load_config, load_scenario, Scenario};
use mcsnet::world::{Reply, RunReport, World};

/// Virtual time advanced per pacing step.
const PACE_STEP_US: u64 = 10_000;

#[derive(Debug, Parser)]
#[command(name = "mcsnet", version, about = "Simulate a mixed-criticality TSN edge network")]
struct Args {
    /// Topology file.
    #[arg(long)]
    topology: PathBuf,
    /// Services and streams file.
    #[arg(long)]
    services: PathBuf,
    /// Scenario script. Without one only the initial placement runs.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Virtual seconds per wall-clock second, or `off` to run flat out.
    #[arg(long, value_parser = parse_pace)]
    pace: Option<Pace>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Read operator commands from stdin while the run is paced.
    #[arg(long)]
    repl: bool,
    /// Write the script as it ran, injected events included.
    #[arg(long)]
    record_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pace {
    Off,
    Factor(f64),
}

fn parse_pace(s: &str) -> Result<Pace, String> {
    if s == "off" {
        return Ok(Pace::Off);
    }
    match s.parse::<f64>() {
        Ok(f) if f > 0.0 && f.is_finite() => Ok(Pace::Factor(f)),
        _ => Err(format!("expected a positive factor or `off`, got `{s}`")),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let (system, scenario) = match load(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let pace = match (args.pace, args.repl) {
        (Some(Pace::Off), true) => {
            eprintln!("error: --repl needs a paced run");
            return ExitCode::from(2);
        }
        (Some(p), _) => p,
        (None, true) => Pace::Factor(1.0),
        (None, false) => Pace::Off,
    };

    let mut world = World::new(system, scenario);
    if world.is_infeasible() {
        let report = world.finish();
        return finish(&args, report);
    }
    match pace {
        Pace::Off => {
            let end = world.end_us();
            world.run_until(end);
        }
        Pace::Factor(f) => {
            let input = args.repl.then(spawn_reader);
            run_paced(&mut world, f, input.as_ref());
        }
    }
    finish(&args, world.finish())
}

fn load(args: &Args) -> Result<(mcsnet::config::SystemConfig, Scenario)> {
    let system = load_config(&args.topology, &args.services)?;
    let mut scenario = match &args.scenario {
        Some(path) => load_scenario(path, &system)?,
        None => Scenario::empty(0),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    Ok((system, scenario))
}

fn spawn_reader() -> Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    rx
}

/// Advances virtual time in small steps, sleeping so that it tracks the
/// wall clock scaled by `factor`. With operator input the run continues
/// past the script's end until `quit` or end of input.
fn run_paced(world: &mut World, factor: f64, input: Option<&Receiver<String>>) {
    let start = Instant::now();
    let origin = world.now();
    let end = world.end_us();
    let mut out = io::stdout().lock();
    if input.is_some() {
        let _ = write!(out, "mcsnet> ");
        let _ = out.flush();
    }
    loop {
        if let Some(rx) = input {
            loop {
                match rx.try_recv() {
                    Ok(line) => match world.dispatch(&line) {
                        Reply::Text(text) => {
                            let _ = write!(out, "{text}mcsnet> ");
                            let _ = out.flush();
                        }
                        Reply::Quit => return,
                    },
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return,
                }
            }
        } else if world.now() >= end {
            return;
        }
        let next = world.now() + PACE_STEP_US;
        let next = if input.is_none() { next.min(end) } else { next };
        world.run_until(next);
        let due = Duration::from_secs_f64((next - origin) as f64 / 1e6 / factor);
        if let Some(wait) = due.checked_sub(start.elapsed()) {
            thread::sleep(wait);
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn outputs(args: &Args, report: &RunReport) -> Result<()> {
    if let Some(p) = &args.metrics_out {
        write_file(p, &report.metrics_jsonl())?;
    }
    if let Some(p) = &args.trace_out {
        write_file(p, &report.trace_jsonl())?;
    }
    if let Some(p) = &args.record_out {
        write_file(p, &report.realized.to_toml())?;
    }
    Ok(())
}

fn finish(args: &Args, report: RunReport) -> ExitCode {
    if let Err(e) = outputs(args, &report) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    for v in &report.violations {
        eprintln!("invariant violated: {v}");
    }
    println!(
        "{}: ended at {} µs, {} metric records, {} trace events, {} alerts",
        report.status,
        report.end_us,
        report.metrics.records().len(),
        report.trace.len(),
        report.alerts.len()
    );
    ExitCode::from(report.status.exit_code() as u8)
}
