//! Plot-ready CSV tables.

use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::suites::{cluster_table, mu_table, neumann_table, thermal_table, Suite, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotTarget {
    NeumannDecay,
    MuConvergence,
    ClusterDecay,
    ThermalMassVsBeta,
}

impl PlotTarget {
    pub const ALL: [PlotTarget; 4] = [PlotTarget::NeumannDecay, PlotTarget::MuConvergence, PlotTarget::ClusterDecay, PlotTarget::ThermalMassVsBeta];

    pub fn name(self) -> &'static str {
        match self {
            PlotTarget::NeumannDecay => "neumann-decay",
            PlotTarget::MuConvergence => "mu-convergence",
            PlotTarget::ClusterDecay => "cluster-decay",
            PlotTarget::ThermalMassVsBeta => "thermal-mass-vs-beta",
        }
    }
}

impl fmt::Display for PlotTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PlotTarget {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::ALL.iter().find(|t| t.name() == s).copied().ok_or_else(|| CliError::Unknown {
            kind: "plot target",
            name: s.to_string(),
            expected: Self::ALL.iter().map(|t| t.name()).collect::<Vec<_>>().join(", "),
        })
    }
}

/// Runs the minimal computation behind a target; the table matches the one its suite writes.
pub fn emit_plotdata(cfg: &RunConfig, target: PlotTarget) -> CliResult<Table> {
    cfg.validate()?;
    Ok(match target {
        PlotTarget::NeumannDecay => neumann_table(cfg, &mut Suite::Moller.rng(cfg.seed))?.1,
        PlotTarget::MuConvergence => mu_table(cfg)?.1,
        PlotTarget::ClusterDecay => cluster_table(cfg)?.1,
        PlotTarget::ThermalMassVsBeta => thermal_table(cfg)?.1,
    })
}
