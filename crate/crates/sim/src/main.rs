use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bftorder_sim::{check_invariants, render_table, run, sweep, Scenario, Trace};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bftorder-sim", version, about = "Run, sweep and check simulated bftorder clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and audit its trace.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes report.json and the trace (events and block files) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario once per batch size.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "100,250,500,1000")]
        batches: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Writes sweep.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check the invariants of a trace directory written by `run --out`.
    Check { trace: PathBuf },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

fn main() -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let ok = match cli.command {
        Command::Run { scenario, seed, out } => {
            let scenario = Scenario::load(&scenario)?;
            let seed = seed.unwrap_or(scenario.seed);
            let outcome = run(&scenario, seed)?;
            print!("{}", outcome.report.render());
            if let Some(dir) = out {
                outcome.trace.write(&dir, &outcome.stores)?;
                write_json(&dir.join("report.json"), &outcome.report)?;
                println!("trace written to {}", dir.display());
            }
            outcome.report.passed()
        }
        Command::Sweep {
            scenario,
            batches,
            seed,
            out,
        } => {
            if batches.is_empty() {
                bail!("no batch sizes given");
            }
            let scenario = Scenario::load(&scenario)?;
            let seed = seed.unwrap_or(scenario.seed);
            let reports = sweep(&scenario, seed, &batches)?;
            println!("sweep of {} (seed {seed})", scenario.name);
            print!("{}", render_table(&reports));
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join("sweep.json"), &reports)?;
            }
            reports.iter().all(|r| r.passed())
        }
        Command::Check { trace } => {
            let trace = Trace::read(&trace).with_context(|| format!("reading trace {}", trace.display()))?;
            let report = check_invariants(&trace);
            println!("trace of {} (seed {})", trace.scenario, trace.seed);
            print!("{report}");
            report.passed()
        }
    };
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
