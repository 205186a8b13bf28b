use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedstab::config::{ExperimentConfig, Overrides};
use fedstab::sweep::ExperimentPlan;
use fedstab::{bounds_cmd, probe_cmd, report, run, sweep, with_workers, CliError};

#[derive(Parser)]
#[command(name = "fedstab", version, about = "Federated optimization with stability probes and bound calculators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// INI configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `[federation] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all logical cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `[federation] eval_every`.
    #[arg(long)]
    eval_every: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let overrides = Overrides { seed: self.seed, eval_every: self.eval_every };
        Ok(ExperimentConfig::load(&self.config, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics.csv and summary.json.
    Run(Common),
    /// Run every cell of a sweep plan.
    Sweep {
        /// Plan file with a [plan] section.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the plan's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Measure on-average model stability.
    Probe(Common),
    /// Evaluate recursions and envelopes from a [bounds] section.
    Bounds(Common),
    /// Tabulate finished runs and check trends.
    Report {
        /// Run or sweep directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = c.load()?;
            let s = with_workers(c.workers, || run::cmd_run(&cfg, &c.out))??;
            println!("run finished: {} rows written to {}", s.rows, c.out.display());
        }
        Command::Sweep { config, out, workers } => {
            let plan = ExperimentPlan::load(&config)?;
            let out = out.or_else(|| plan.out.clone()).unwrap_or_else(|| PathBuf::from("sweep"));
            let s = sweep::cmd_sweep(&plan, &out, workers)?;
            println!("sweep finished: {} cells, {} failed, merged CSV in {}", s.cells.len(), s.failed, out.display());
            if s.failed > 0 {
                return Err(CliError::Runtime(format!("{} sweep cells failed", s.failed)));
            }
        }
        Command::Probe(c) => {
            let cfg = c.load()?;
            let s = with_workers(c.workers, || probe_cmd::cmd_probe(&cfg, &c.out))??;
            println!("probe finished: {} replicates, final mean squared distance {:e}", s.replicates, s.stability_final);
        }
        Command::Bounds(c) => {
            let cfg = c.load()?;
            let s = bounds_cmd::cmd_bounds(&cfg, &c.out)?;
            println!("bounds written to {} (psi = {}, c*psi = {})", c.out.display(), s.psi, s.c_psi);
        }
        Command::Report { dirs, out } => {
            report::cmd_report(&dirs, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
