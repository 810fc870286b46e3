use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use smartspace_core::pipeline::{replay_learning, run_scenario, RunOptions, RunOverrides};
use smartspace_core::report::{
    render_learning, render_pareto_tsv, render_report, write_learning, write_run,
};

#[derive(Parser)]
#[command(name = "smartspace", about = "Deterministic smart-space orchestration runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario description (TOML) to execute.
    scenario: PathBuf,
    /// Directory to write report.txt, pareto.tsv, and the logs into.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the campus generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the urgency threshold (seconds until deadline).
    #[arg(long = "theta1")]
    theta1_seconds: Option<i64>,
    /// Override the hint-recall similarity threshold.
    #[arg(long = "theta2")]
    theta2: Option<f64>,
    /// Override the low-urgency candidate count.
    #[arg(long)]
    candidates: Option<usize>,
    /// Override the monitoring tick length in seconds.
    #[arg(long = "tick")]
    tick_seconds: Option<i64>,
}

impl CommonArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            out_dir: self.out_dir.clone(),
            overrides: RunOverrides {
                seed: self.seed,
                theta1_seconds: self.theta1_seconds,
                theta2: self.theta2,
                candidates: self.candidates,
                tick_seconds: self.tick_seconds,
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and print the report.
    Run(CommonArgs),
    /// Run a scenario and measure how much hint recall improved the second
    /// half of its most similar intent pair.
    ReplayLearning(CommonArgs),
    /// Run a scenario and print only the candidate metrics table.
    Pareto(CommonArgs),
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => {
            let report = run_scenario(&args.scenario, &args.options())
                .with_context(|| format!("running {}", args.scenario.display()))?;
            if let Some(dir) = &args.out_dir {
                write_run(&report, dir)
                    .with_context(|| format!("writing results to {}", dir.display()))?;
            }
            print!("{}", render_report(&report));
        }
        Command::ReplayLearning(args) => {
            let outcome = replay_learning(&args.scenario, &args.options())
                .with_context(|| format!("replaying {}", args.scenario.display()))?;
            if let Some(dir) = &args.out_dir {
                write_learning(&outcome, dir)
                    .with_context(|| format!("writing results to {}", dir.display()))?;
            }
            print!("{}", render_learning(&outcome));
        }
        Command::Pareto(args) => {
            let report = run_scenario(&args.scenario, &args.options())
                .with_context(|| format!("running {}", args.scenario.display()))?;
            print!("{}", render_pareto_tsv(&report.pareto_rows));
        }
    }
    Ok(())
}
