//! Batch front-end of the workbench: configuration, acceptance suites, JSON reports and
//! plot-ready CSV tables.

pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod suites;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use plot::{emit_plotdata, PlotTarget};
pub use report::{run, write_run, RunOutput, RunReport};
pub use suites::{run_suites, Suite, SuiteOutput, Table};
