//! Run configuration: one JSON document with module defaults for every field.

use std::path::{Path, PathBuf};

use ppalab_core::{build_lattice, KleinGordonOp, LatticeSpec, Orders, QuadratureRule, SpatialTorus, Switch, TemporalCutoff};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the output directory of the config file.
pub const OUT_DIR_ENV: &str = "PPALAB_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub n_t: usize,
    pub dt: f64,
    pub d: usize,
    pub n_x: usize,
    pub dx: f64,
}

impl Default for LatticeConfig {
    /// Eight slices and eight sites with `dx = 0.2`; `dt = 0.1` keeps every mode below the
    /// stability limit `omega dt < 2`, which `dt = dx` misses.
    fn default() -> Self {
        Self { n_t: 8, dt: 0.1, d: 1, n_x: 8, dx: 0.2 }
    }
}

impl LatticeConfig {
    pub fn build(&self) -> CliResult<LatticeSpec> {
        Ok(build_lattice(self.n_t, self.dt, self.d, self.n_x, self.dx)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Masses {
    /// Mass of the free lattice and thermal theories.
    pub lattice: f64,
    /// Initial and final masses of the switched mode profile.
    pub m1: f64,
    pub m2: f64,
    /// Virtual masses of the auxiliary theory in the massless thermal checks.
    pub m_q: Vec<f64>,
    /// Masses of the clustering scan.
    pub cluster: Vec<f64>,
}

impl Default for Masses {
    fn default() -> Self {
        Self { lattice: 1.0, m1: 0.5, m2: 1.0, m_q: vec![0.5, 1.0], cluster: vec![0.5, 1.0, 2.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cutoffs {
    /// Reference cutoff of the thermal interaction.
    pub chi: TemporalCutoff,
    /// Same plateau scale, different ramp.
    pub chi_ramp: TemporalCutoff,
    /// Larger plateau scale.
    pub chi_wide: TemporalCutoff,
    /// Switching times of the adiabatic scan.
    pub mus: Vec<f64>,
    pub switch: Switch,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            chi: TemporalCutoff { epsilon: 0.3, inner: 0.3, outer: 0.5 },
            chi_ramp: TemporalCutoff { epsilon: 0.3, inner: 0.4, outer: 0.55 },
            chi_wide: TemporalCutoff { epsilon: 0.5, inner: 0.5, outer: 0.9 },
            mus: vec![4.0, 8.0, 16.0, 32.0],
            switch: Switch::Ramp,
        }
    }
}

/// Continuous-time thermal computations on a spatial torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmsConfig {
    pub n_x: usize,
    pub dx: f64,
    pub orders: Orders,
    pub coupling: f64,
    pub rule: QuadratureRule,
    /// Observation points `(time, site)` of the field product.
    pub fields: Vec<(f64, usize)>,
    /// Inverse temperatures of the thermal-mass scan.
    pub betas: Vec<f64>,
    /// Lattice sites of the clustering torus.
    pub cluster_sites: usize,
}

impl Default for KmsConfig {
    fn default() -> Self {
        Self {
            n_x: 8,
            dx: 0.5,
            orders: Orders::new(2, 1),
            coupling: 1.0,
            rule: QuadratureRule { order: 12, panels: 1 },
            fields: vec![(-0.1, 0), (0.1, 1)],
            betas: vec![1.0, 2.0, 4.0, 8.0],
            cluster_sites: 64,
        }
    }
}

impl KmsConfig {
    pub fn torus(&self) -> CliResult<SpatialTorus> {
        Ok(SpatialTorus::new(1, self.n_x, self.dx)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesConfig {
    /// Momenta of the adiabatic scan.
    pub ks: Vec<f64>,
    /// Switching time of the three-term series check.
    pub series_mu: f64,
    /// Momentum of the infrared check, which starts massless.
    pub infrared_k: f64,
}

impl Default for ModesConfig {
    fn default() -> Self {
        Self { ks: vec![1.0, 2.0, 4.0], series_mu: 10.0, infrared_k: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub propagator: f64,
    pub classical: f64,
    pub neumann_error: f64,
    pub exact: f64,
    pub deformation: f64,
    pub identity: f64,
    pub cocycle: f64,
    pub kms_boundary: f64,
    pub ratio_simplex: f64,
    pub cutoff_independence: f64,
    pub coincidence_relative: f64,
    pub scaling_relative: f64,
    pub virtual_mass: f64,
    pub wronskian: f64,
    pub energy: f64,
    pub slope: f64,
    pub series: f64,
    pub cluster_relative: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            propagator: 1e-12,
            classical: 1e-10,
            neumann_error: 1e-8,
            exact: 1e-12,
            deformation: 1e-9,
            identity: 1e-10,
            cocycle: 1e-9,
            kms_boundary: 1e-10,
            ratio_simplex: 1e-8,
            cutoff_independence: 1e-6,
            coincidence_relative: 1e-3,
            scaling_relative: 1e-2,
            virtual_mass: 1e-6,
            wronskian: 1e-8,
            energy: 1e-9,
            slope: 0.15,
            series: 1e-6,
            cluster_relative: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: LatticeConfig,
    pub orders: Orders,
    pub masses: Masses,
    pub beta: f64,
    pub cutoffs: Cutoffs,
    pub kms: KmsConfig,
    pub modes: ModesConfig,
    pub tolerances: Tolerances,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lattice: LatticeConfig::default(),
            orders: Orders::new(2, 2),
            masses: Masses::default(),
            beta: 1.0,
            cutoffs: Cutoffs::default(),
            kms: KmsConfig::default(),
            modes: ModesConfig::default(),
            tolerances: Tolerances::default(),
            seed: 7,
            out_dir: PathBuf::from("reports"),
        }
    }
}

fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> CliResult<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be non-negative and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every parameter against the preconditions of the module that consumes it.
    pub fn validate(&self) -> CliResult<()> {
        positive("beta", self.beta)?;
        for b in &self.kms.betas {
            positive("kms.betas entry", *b)?;
        }
        if self.kms.betas.is_empty() {
            return Err(CliError::Config("kms.betas must not be empty".into()));
        }
        let lattice = self.lattice.build()?;
        positive("masses.lattice", self.masses.lattice)?;
        let w = KleinGordonOp::constant_mass(&lattice, self.masses.lattice.powi(2))?.max_frequency();
        if w * lattice.dt >= 2.0 {
            return Err(CliError::Config(format!("omega_max dt = {:.4} breaks the stability limit 2; reduce dt", w * lattice.dt)));
        }
        if self.lattice.n_t < 6 {
            return Err(CliError::Config(format!("the suites place supports on six slices; n_t = {} is too small", self.lattice.n_t)));
        }
        if self.lattice.n_x < 4 {
            return Err(CliError::Config(format!("the suites place supports on four sites; n_x = {} is too small", self.lattice.n_x)));
        }
        if self.orders.hbar < 1 || self.orders.lambda < 1 {
            return Err(CliError::Config("orders must keep at least one Planck and one coupling power".into()));
        }
        if self.kms.orders.hbar < 1 || self.kms.orders.lambda < 1 {
            return Err(CliError::Config("kms.orders must keep at least one Planck and one coupling power".into()));
        }
        non_negative("masses.m1", self.masses.m1)?;
        positive("masses.m2", self.masses.m2)?;
        for m in self.masses.m_q.iter().chain(&self.masses.cluster) {
            positive("mass list entry", *m)?;
        }
        for c in [&self.cutoffs.chi, &self.cutoffs.chi_ramp, &self.cutoffs.chi_wide] {
            c.validate()?;
        }
        for mu in &self.cutoffs.mus {
            positive("cutoffs.mus entry", *mu)?;
        }
        for k in &self.modes.ks {
            positive("modes.ks entry", *k)?;
        }
        positive("modes.series_mu", self.modes.series_mu)?;
        positive("modes.infrared_k", self.modes.infrared_k)?;
        self.kms.torus()?;
        self.kms.rule.validate()?;
        positive("kms.coupling", self.kms.coupling)?;
        if self.kms.fields.iter().any(|(t, s)| !t.is_finite() || *s >= self.kms.n_x) {
            return Err(CliError::Config("kms.fields entries need a finite time and a site on the torus".into()));
        }
        let t = serde_json::to_value(&self.tolerances).map_err(|e| CliError::Config(e.to_string()))?;
        for (name, v) in t.as_object().into_iter().flatten() {
            non_negative(&format!("tolerances.{name}"), v.as_f64().unwrap_or(f64::NAN))?;
        }
        Ok(())
    }

    /// Output directory: explicit override, then the environment, then the config value.
    pub fn resolve_out_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.out_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn rejects_bad_parameters() {
        for bad in [r#"{"beta": 0.0}"#, r#"{"beta": -1.0}"#, r#"{"kms": {"betas": [1.0, -2.0]}}"#, r#"{"masses": {"lattice": 0.0}}"#, r#"{"lattice": {"dt": 0.2}}"#, r#"{"colour": 1}"#, r#"{"tolerances": {"slope": -1.0}}"#] {
            assert!(matches!(RunConfig::from_json(bad), Err(CliError::Config(_)) | Err(CliError::Core(_))), "{bad}");
        }
    }

    #[test]
    fn explicit_output_directory_wins() {
        let c = RunConfig::default();
        assert_eq!(c.resolve_out_dir(Some(Path::new("/tmp/x"))), PathBuf::from("/tmp/x"));
    }
}
