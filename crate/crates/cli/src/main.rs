//! `ppalab` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ppalab_cli::report::write_tables;
use ppalab_cli::{emit_plotdata, run, write_run, PlotTarget, RunConfig, Suite};

#[derive(Parser)]
#[command(name = "ppalab", version, about = "Residual checks for perturbative agreement on a lattice")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an acceptance suite and write its JSON report and CSV tables.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the CSV table behind one plot.
    Plot {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        target: PlotTarget,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, suite, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = cfg.resolve_out_dir(out.as_deref());
            let output = run(&cfg, suite).with_context(|| format!("suite {suite}"))?;
            let path = write_run(&output, &dir)?;
            for c in output.report.suites.iter().flat_map(|s| &s.checks) {
                println!("{} {:<45} residual {:.3e} tolerance {:.1e}", if c.pass { "pass" } else { "FAIL" }, c.check, c.residual, c.tolerance);
            }
            println!("report: {}", path.display());
            Ok(output.report.pass)
        }
        Command::Plot { config, target, out } => {
            let cfg = RunConfig::load(&config)?;
            let dir = cfg.resolve_out_dir(out.as_deref());
            let table = emit_plotdata(&cfg, target).with_context(|| format!("plot target {target}"))?;
            for p in write_tables(&[table], &dir)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}
