//! Report assembly and output files.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::suites::{run_suites, Suite, SuiteReport, Table};

/// The JSON document written for one `run` invocation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub suite: String,
    pub seed: u64,
    pub pass: bool,
    pub config: RunConfig,
    pub suites: Vec<SuiteReport>,
}

impl RunReport {
    /// Stable, pretty-printed JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report values serialise");
        s.push('\n');
        s
    }

    pub fn failures(&self) -> impl Iterator<Item = &ppalab_core::CheckRecord> {
        self.suites.iter().flat_map(|s| s.checks.iter()).filter(|c| !c.pass)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub report: RunReport,
    pub tables: Vec<Table>,
}

pub fn run(cfg: &RunConfig, suite: Suite) -> CliResult<RunOutput> {
    let outputs = run_suites(cfg, suite)?;
    let suites: Vec<SuiteReport> = outputs.iter().map(|o| o.report.clone()).collect();
    let pass = suites.iter().all(|s| s.pass);
    let tables = outputs.into_iter().flat_map(|o| o.tables).collect();
    Ok(RunOutput { report: RunReport { suite: suite.name().to_string(), seed: cfg.seed, pass, config: cfg.clone(), suites }, tables })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|source| CliError::Output { path: path.display().to_string(), source })
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.display().to_string(), source })
}

pub fn write_tables(tables: &[Table], dir: &Path) -> CliResult<Vec<PathBuf>> {
    ensure_dir(dir)?;
    tables
        .iter()
        .map(|t| {
            let path = dir.join(format!("{}.csv", t.name));
            write_file(&path, &t.csv)?;
            Ok(path)
        })
        .collect()
}

/// Writes `report-<suite>.json` and the side-tables into `dir`; returns the report path.
pub fn write_run(out: &RunOutput, dir: &Path) -> CliResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(format!("report-{}.json", out.report.suite));
    write_file(&path, &out.report.to_json())?;
    write_tables(&out.tables, dir)?;
    Ok(path)
}
