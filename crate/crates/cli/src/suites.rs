//! Acceptance suites: each one runs a module's residual checks on the configured lattice.

use std::fmt;
use std::str::FromStr;

use ppalab_core::functionals::{MonomialKernel, PolyFunctional};
use ppalab_core::kms::{
    chi_independence_check, cluster_decay_fit, continuum_thermal_coincidence, continuum_thermal_coincidence_exact, continuum_thermal_mass2, field_product,
    thermal_mass, virtual_mass_expectation, CutoffInteraction, KmsGrid, LocalPotential, ThermalState,
};
use ppalab_core::modes::{adiabatic_convergence_scan, adiabatic_mode, energy_monotonicity, integrate_mode, r_lambda_iterate, FrequencyProfile, Switch, TimeGrid};
use ppalab_core::moller_classical::{classical_moller_exact, classical_moller_neumann, mass_norm, pushforward_propagators, QuadraticPerturbation, Theory};
use ppalab_core::moller_quantum::{
    beta_intertwining_residual, causal_factorisation_residual, cocycle_check, deformation_check, gppa_check, phi_independence_residual, structure_identity_residual,
    time_ordered_intertwining_residual, BetaMap, Interaction,
};
use ppalab_core::propagators::{advanced, build_operator, causal, hermitian_min_eigenvalue, identity_residual, kms_two_point, max_abs, retarded, vacuum_two_point, KleinGordonOp};
use ppalab_core::{CheckRecord, DensityFunction, Field, FormalSeries, LatticeSpec, Orders, PointSet, SpatialTorus, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Suite {
    Propagators,
    Moller,
    Ppa,
    Gppa,
    Kms,
    ThermalMass,
    Modes,
    All,
}

impl Suite {
    /// Every concrete suite, in report order.
    pub const MODULES: [Suite; 7] = [Suite::Propagators, Suite::Moller, Suite::Ppa, Suite::Gppa, Suite::Kms, Suite::ThermalMass, Suite::Modes];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Propagators => "propagators",
            Suite::Moller => "moller",
            Suite::Ppa => "ppa",
            Suite::Gppa => "gppa",
            Suite::Kms => "kms",
            Suite::ThermalMass => "thermal-mass",
            Suite::Modes => "modes",
            Suite::All => "all",
        }
    }

    /// Suites executed by this selection.
    pub fn expand(self) -> Vec<Suite> {
        if self == Suite::All {
            Self::MODULES.to_vec()
        } else {
            vec![self]
        }
    }

    /// Independent random stream of the suite, so results do not depend on which suites run together.
    pub fn rng(self, seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(Self::MODULES.iter().position(|s| *s == self).unwrap_or(Self::MODULES.len()) as u64);
        rng
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Self::MODULES.iter().chain(&[Suite::All]).find(|x| x.name() == s).copied().ok_or_else(|| CliError::Unknown {
            kind: "suite",
            name: s.to_string(),
            expected: Self::MODULES.iter().chain(&[Suite::All]).map(|x| x.name()).collect::<Vec<_>>().join(", "),
        })
    }
}

/// A CSV side-table with its file stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub csv: String,
}

impl Table {
    fn from_writer(name: &str, write: impl FnOnce(&mut Vec<u8>) -> ppalab_core::Result<()>) -> CliResult<Self> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        Ok(Self { name: name.to_string(), csv: String::from_utf8(buf).expect("csv writers emit utf-8") })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub checks: Vec<CheckRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutput {
    pub report: SuiteReport,
    pub tables: Vec<Table>,
}

impl SuiteOutput {
    fn new(suite: Suite, checks: Vec<CheckRecord>, tables: Vec<Table>) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Self { report: SuiteReport { suite: suite.name().to_string(), pass, checks }, tables }
    }
}

/// Runs the selected suites; `all` runs its members on parallel workers and keeps report order.
pub fn run_suites(cfg: &RunConfig, suite: Suite) -> CliResult<Vec<SuiteOutput>> {
    cfg.validate()?;
    suite.expand().into_par_iter().map(|s| run_one(cfg, s)).collect()
}

fn run_one(cfg: &RunConfig, suite: Suite) -> CliResult<SuiteOutput> {
    let mut rng = suite.rng(cfg.seed);
    match suite {
        Suite::Propagators => propagators(cfg, &mut rng),
        Suite::Moller => moller(cfg, &mut rng),
        Suite::Ppa => ppa(cfg, &mut rng),
        Suite::Gppa => gppa(cfg, &mut rng),
        Suite::Kms => kms(cfg),
        Suite::ThermalMass => thermal(cfg),
        Suite::Modes => modes(cfg),
        Suite::All => unreachable!("expanded above"),
    }
}

fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Point indices of spatial sites `ss` on slice `t`.
fn on_slice(l: &LatticeSpec, t: usize, ss: &[usize]) -> Vec<usize> {
    ss.iter().map(|s| l.index(t, *s)).collect()
}

/// Random real values on the listed points, zero elsewhere.
fn vec_on(rng: &mut ChaCha8Rng, n: usize, points: &[usize]) -> Vec<C64> {
    (0..n).map(|i| if points.contains(&i) { c(rng.gen_range(-1.0..1.0)) } else { c(0.0) }).collect()
}

fn density_on(rng: &mut ChaCha8Rng, n: usize, points: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| if points.contains(&i) { rng.gen_range(lo..hi) } else { 0.0 }).collect()
}

/// `lambda int h phi^k`.
fn coupled_local(p: &PointSet, h: &[f64], k: u32, o: Orders) -> CliResult<PolyFunctional> {
    Ok(PolyFunctional::local(p, h, k, o)?.shift(0, &[c(0.0), c(1.0)]))
}

fn separable(p: &PointSet, vectors: Vec<Vec<C64>>, o: Orders) -> CliResult<PolyFunctional> {
    Ok(PolyFunctional::from_kernel(p, &MonomialKernel::Separable { vectors, weight: c(1.0) }, &FormalSeries::one(o))?)
}

fn anti_hermitian_gap(plus: &ppalab_core::propagators::BiKernel, delta: &nalgebra::DMatrix<C64>) -> f64 {
    max_abs(&((&plus.matrix - plus.matrix.transpose()) * C64::new(0.0, -1.0) - delta))
}

fn positivity_gap(m: &nalgebra::DMatrix<C64>) -> f64 {
    (-hermitian_min_eigenvalue(m)).max(0.0)
}

fn propagators(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<SuiteOutput> {
    let l = cfg.lattice.build()?;
    let tol = cfg.tolerances.propagator;
    let m2 = cfg.masses.lattice.powi(2);
    let op = KleinGordonOp::constant_mass(&l, m2)?;
    let varying = build_operator(&l, &DensityFunction::on_lattice(&l, |_, _| m2 * rng.gen_range(0.5..1.5)))?;
    let ops = [&op, &varying];
    let ret = ops.iter().map(|o| identity_residual(o, &retarded(o), 0..l.n_t - 1)).fold(0.0, f64::max);
    let adv = ops.iter().map(|o| identity_residual(o, &advanced(o), 1..l.n_t)).fold(0.0, f64::max);
    let anti = ops
        .iter()
        .map(|o| {
            let d = causal(o).matrix;
            max_abs(&(&d + d.transpose()))
        })
        .fold(0.0, f64::max);
    let delta = causal(&op).matrix;
    let (vac, basis) = vacuum_two_point(&op)?;
    let (th, _) = kms_two_point(&op, cfg.beta)?;
    let checks = vec![
        CheckRecord::new("propagators.retarded_inverse", "retarded Green operator inverts P", None, ret, tol),
        CheckRecord::new("propagators.advanced_inverse", "advanced Green operator inverts P", None, adv, tol),
        CheckRecord::new("propagators.causal_antisymmetry", "causal propagator is antisymmetric", None, anti, tol),
        CheckRecord::new("propagators.hadamard_imaginary_part", "Im of the two-point function is half the causal propagator", None, anti_hermitian_gap(&vac, &delta), tol),
        CheckRecord::new("propagators.thermal_imaginary_part", "Im of the thermal two-point function is half the causal propagator", None, anti_hermitian_gap(&th, &delta), tol),
        CheckRecord::new("propagators.hadamard_positivity", "two-point function is of positive type", None, positivity_gap(&vac.matrix), tol),
        CheckRecord::new("propagators.thermal_positivity", "thermal two-point function is of positive type", None, positivity_gap(&th.matrix), tol),
    ];
    let table = Table::from_writer("lattice_modes", |out| {
        use std::io::Write;
        writeln!(out, "mode,k,omega,omega_tilde,amplitude")?;
        for m in &basis.modes {
            writeln!(out, "{},{:.12e},{:.12e},{:.12e},{:.12e}", m.mode, m.k.first().copied().unwrap_or(0.0), m.omega, m.omega_tilde, m.amplitude)?;
        }
        Ok(())
    })?;
    Ok(SuiteOutput::new(Suite::Propagators, checks, vec![table]))
}

/// Neumann diagnostics for a random mass on three slices, scaled to `|M| T^2 = 0.9`.
pub fn neumann_table(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<(ppalab_core::moller_classical::NeumannReport, Table)> {
    let l = cfg.lattice.build()?;
    let op = KleinGordonOp::constant_mass(&l, cfg.masses.lattice.powi(2))?;
    let raw = DensityFunction::on_lattice(&l, |t, _| if (2..5).contains(&t) { rng.gen_range(0.5..1.5) } else { 0.0 });
    let span = l.n_t as f64 * l.dt;
    let mass = raw.scaled(0.9 / (mass_norm(&l, &raw) * span * span));
    let probe = Field::from_fn(l, |_, _| c(rng.gen_range(-1.0..1.0)));
    let report = classical_moller_neumann(&op, &QuadraticPerturbation::mass_only(mass), 8, &probe)?;
    let table = Table::from_writer("neumann_decay", |out| report.write_csv(out))?;
    Ok((report, table))
}

fn moller(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<SuiteOutput> {
    let l = cfg.lattice.build()?;
    let tol = cfg.tolerances.classical;
    let op = KleinGordonOp::constant_mass(&l, cfg.masses.lattice.powi(2))?;
    let mass = DensityFunction::on_lattice(&l, |t, _| if t == 2 || t == 3 { rng.gen_range(-2.0..2.0) } else { 0.0 });
    let r = classical_moller_exact(&op, &QuadraticPerturbation::mass_only(mass))?;
    let (plus1, _) = vacuum_two_point(&op)?;
    let tk = pushforward_propagators(&r, &plus1.matrix);
    let transported = [
        max_abs(&(&tk.retarded - retarded(&r.op2).matrix)),
        max_abs(&(&tk.advanced - advanced(&r.op2).matrix)),
        max_abs(&(&tk.causal - causal(&r.op2).matrix)),
        max_abs(&((&tk.plus - tk.plus.transpose()) * C64::new(0.0, -1.0) - causal(&r.op2).matrix)),
        positivity_gap(&tk.plus),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let (neumann, neumann_csv) = neumann_table(cfg, rng)?;
    let over_bound = neumann.terms.iter().map(|t| if t.bound > 0.0 { (t.norm / t.bound - 1.0).max(0.0) } else { t.norm }).fold(0.0, f64::max);
    let last = neumann.terms.last().map(|t| t.error).unwrap_or(f64::NAN);

    let o = cfg.orders;
    let theory = Theory::lattice_vacuum(&op, o.lambda as usize)?;
    let p = PointSet::from_lattice(&l);
    let n = p.len();
    let nt = l.n_t;
    let f = coupled_local(&p, &density_on(rng, n, &on_slice(&l, nt - 2, &[1, 2]), -1.0, 1.0), 3, o)?;
    let v = coupled_local(&p, &density_on(rng, n, &on_slice(&l, nt / 2, &[0, 1]), -1.0, 1.0), 2, o)?;
    let g = coupled_local(&p, &density_on(rng, n, &on_slice(&l, 1, &[1, 2]), -1.0, 1.0), 3, o)?;
    let factorisation = causal_factorisation_residual(&theory, &f, &g, &v)?;
    let vq = coupled_local(&p, &density_on(rng, n, &on_slice(&l, 2, &[1, 2]), -1.0, 1.0), 4, o)?;
    let it = Interaction::new(&theory, &vq)?;
    let fq = PolyFunctional::local(&p, &density_on(rng, n, &on_slice(&l, nt - 2, &[1]), -1.0, 1.0), 2, o)?;
    let mut gsites = on_slice(&l, nt / 2, &[0]);
    gsites.extend(on_slice(&l, nt / 2, &[1]));
    let gq = PolyFunctional::linear(&p, &vec_on(rng, n, &gsites), o)?;
    let to_intertwining = time_ordered_intertwining_residual(&it, &fq, &gq)?;

    let checks = vec![
        CheckRecord::new("moller.inverse", "classical Moller map inverts 1 + Delta^R Q", None, r.inverse_residual(), tol),
        CheckRecord::new("moller.intertwining", "classical Moller map intertwines the wave operators", None, r.intertwining_residual(), tol),
        CheckRecord::new("moller.transported_kernels", "transported propagators equal the perturbed ones", None, transported, tol),
        CheckRecord::new("moller.neumann_bound", "Neumann terms obey the factorial bound", None, over_bound, 1e-12),
        CheckRecord::new("moller.neumann_convergence", "Neumann series converges to the exact Moller map", None, last, cfg.tolerances.neumann_error),
        CheckRecord::new("moller.causal_factorisation", "S-matrix causal factorisation", Some(o), factorisation, cfg.tolerances.identity),
        CheckRecord::new("moller.time_ordered_intertwining", "Moller map intertwines time-ordered products", Some(o), to_intertwining, cfg.tolerances.identity),
    ];
    Ok(SuiteOutput::new(Suite::Moller, checks, vec![neumann_csv]))
}

fn lattice_theory(cfg: &RunConfig) -> CliResult<(LatticeSpec, Theory, PointSet)> {
    let l = cfg.lattice.build()?;
    let op = KleinGordonOp::constant_mass(&l, cfg.masses.lattice.powi(2))?;
    let theory = Theory::lattice_vacuum(&op, cfg.orders.lambda as usize)?;
    Ok((l, theory, PointSet::from_lattice(&l)))
}

fn ppa(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<SuiteOutput> {
    let (l, theory, p) = lattice_theory(cfg)?;
    let o = cfg.orders;
    let n = p.len();
    let nt = l.n_t;
    let mass = density_on(rng, n, &on_slice(&l, 2, &[1, 2, 3]), 0.5, 1.5);
    let b = BetaMap::new(&theory, &mass, o)?;
    let mut lin_sites = on_slice(&l, nt - 3, &[0, 1]);
    lin_sites.extend(on_slice(&l, nt - 2, &[2]));
    let lin = PolyFunctional::linear(&p, &vec_on(rng, n, &lin_sites), o)?;
    let linear_shift = b.apply(&lin)?.distance(&lin);
    let mut quad_sites = on_slice(&l, nt - 3, &[1, 2]);
    quad_sites.extend(on_slice(&l, nt - 2, &[1]));
    let quad = PolyFunctional::local(&p, &density_on(rng, n, &quad_sites, -1.0, 1.0), 2, o)?;
    let mut quartic_sites = on_slice(&l, nt - 3, &[1]);
    quartic_sites.extend(on_slice(&l, nt - 2, &[1]));
    let quartic = PolyFunctional::local(&p, &density_on(rng, n, &quartic_sites, -1.0, 1.0), 4, o)?;
    let pair = |a: usize, b: usize| vec![l.index(0, a), l.index(nt - 2, b)];
    let f = separable(&p, vec![vec_on(rng, n, &pair(1, 1)), vec_on(rng, n, &pair(2, 2))], o)?;
    let mut g_sites = on_slice(&l, 0, &[0]);
    g_sites.extend(on_slice(&l, nt - 3, &[2]));
    g_sites.extend(on_slice(&l, nt - 1, &[3]));
    let g = PolyFunctional::linear(&p, &vec_on(rng, n, &g_sites), o)?;
    let psi = vec_on(rng, n, &quartic_sites);
    let checks = vec![
        CheckRecord::new("ppa.linear_fixed", "beta fixes linear fields", Some(o), linear_shift, cfg.tolerances.exact),
        CheckRecord::new("ppa.deformation_quadratic", "beta is the deformation by the Feynman difference (quadratic)", Some(o), deformation_check(&b, &quad)?, cfg.tolerances.deformation),
        CheckRecord::new("ppa.deformation_quartic", "beta is the deformation by the Feynman difference (quartic)", Some(o), deformation_check(&b, &quartic)?, cfg.tolerances.deformation),
        CheckRecord::new("ppa.structure_identity", "interacting two-point function decomposition", Some(o), structure_identity_residual(&b), cfg.tolerances.identity),
        CheckRecord::new("ppa.beta_intertwining", "beta intertwines the time-ordered products", Some(o), beta_intertwining_residual(&b, &f, &g)?, cfg.tolerances.identity),
        CheckRecord::new("ppa.phi_independence", "beta does not depend on the field configuration", Some(o), phi_independence_residual(&b, &quartic, &psi)?, cfg.tolerances.identity),
    ];
    Ok(SuiteOutput::new(Suite::Ppa, checks, vec![]))
}

fn gppa(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<SuiteOutput> {
    let (l, theory, p) = lattice_theory(cfg)?;
    let o = cfg.orders;
    let n = p.len();
    let nt = l.n_t;
    let m2 = density_on(rng, n, &on_slice(&l, 1, &[1, 2]), 0.5, 1.5);
    let m3 = density_on(rng, n, &on_slice(&l, 2, &[0, 1]), 0.5, 1.5);
    let quartic = PolyFunctional::local(&p, &density_on(rng, n, &on_slice(&l, nt - 2, &[1, 2]), -1.0, 1.0), 4, o)?;
    let zero = vec![0.0; n];
    let cocycle = cocycle_check(&theory, &m2, &m3, &quartic)?;
    let degenerate = cocycle_check(&theory, &zero, &m3, &quartic)?.max(cocycle_check(&theory, &m2, &m2, &quartic)?);
    let mass = density_on(rng, n, &on_slice(&l, 1, &[0, 1]), 0.5, 1.5);
    let v = coupled_local(&p, &density_on(rng, n, &on_slice(&l, nt / 2, &[1, 2]), -1.0, 1.0), 4, o)?;
    let f = PolyFunctional::linear(&p, &vec_on(rng, n, &on_slice(&l, nt - 2, &[1, 2])), o)?;
    let b = BetaMap::new(&theory, &mass, o)?;
    let b0 = BetaMap::new(&theory, &zero, o)?;
    let checks = vec![
        CheckRecord::new("gppa.cocycle", "cocycle law of the agreement maps", Some(o), cocycle, cfg.tolerances.cocycle),
        CheckRecord::new("gppa.cocycle_degenerate", "cocycle law with a trivial step", Some(o), degenerate, cfg.tolerances.exact),
        CheckRecord::new("gppa.agreement", "generalised perturbative agreement", Some(o), gppa_check(&b, &v, &f)?, cfg.tolerances.cocycle),
        CheckRecord::new("gppa.no_interaction", "generalised agreement with V = 0", Some(o), gppa_check(&b, &PolyFunctional::zero(n, o), &f)?, cfg.tolerances.exact),
        CheckRecord::new("gppa.no_quadratic_change", "generalised agreement with Q = 0", Some(o), gppa_check(&b0, &v, &f)?, cfg.tolerances.exact),
    ];
    Ok(SuiteOutput::new(Suite::Gppa, checks, vec![]))
}

fn kms_state(cfg: &RunConfig, mass2: f64) -> CliResult<ThermalState> {
    Ok(ThermalState::new(cfg.kms.torus()?, mass2, cfg.beta)?)
}

/// Clustering fits on `16/m`-wide tori, one per configured mass.
pub fn cluster_table(cfg: &RunConfig) -> CliResult<(Vec<(f64, f64)>, Table)> {
    let n = cfg.kms.cluster_sites;
    let fits = cfg
        .masses
        .cluster
        .iter()
        .map(|&m| {
            let torus = SpatialTorus::new(1, n, 16.0 / (m * n as f64))?;
            Ok((m, cluster_decay_fit(&ThermalState::new(torus, m * m, cfg.beta)?)?))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let table = Table::from_writer("cluster_decay", |out| {
        use std::io::Write;
        writeln!(out, "m,r,abs_kernel,fitted_rate")?;
        for (m, fit) in &fits {
            for (r, k) in &fit.samples {
                writeln!(out, "{m},{r:.12e},{k:.12e},{:.12e}", fit.rate)?;
            }
        }
        Ok(())
    })?;
    Ok((fits.iter().map(|(m, f)| (*m, f.rate)).collect(), table))
}

fn kms(cfg: &RunConfig) -> CliResult<SuiteOutput> {
    let k = &cfg.kms;
    let o = k.orders;
    let state = kms_state(cfg, cfg.masses.lattice.powi(2))?;
    let potential = LocalPotential::quartic(k.coupling);
    let chi = cfg.cutoffs.chi;
    let boundary = state.kms_boundary_residual(&[-1.3, 0.0, 0.4, 2.0]);

    let times: Vec<f64> = k.fields.iter().map(|f| f.0).collect();
    let grid = KmsGrid::new(state.torus(), &times, &[chi], k.rule)?;
    let theory = state.theory(&grid.points, o.lambda as usize)?;
    let idx = k.fields.iter().map(|&(t, s)| grid.observation_point(t, s)).collect::<ppalab_core::Result<Vec<_>>>()?;
    let f = field_product(&theory, &idx, o)?;
    let cut = CutoffInteraction::on_grid(&state, &theory, &grid, 0, &potential, o)?;
    let n_max = o.lambda as usize;
    let af = cut.interaction.forward(&f)?;
    let simplex = cut.interacting.expectation(&af, n_max, &k.rule)?;
    let ratio = cut.interacting.expectation_ratio(&af, n_max, &k.rule)?;
    let norm = cut.expectation(&PolyFunctional::one(grid.points.len(), o), n_max, &k.rule)?.distance(&FormalSeries::one(o));

    let ramp = chi_independence_check(&state, &potential, chi, cfg.cutoffs.chi_ramp, &k.fields, o, k.rule)?;
    let wide = chi_independence_check(&state, &potential, chi, cfg.cutoffs.chi_wide, &k.fields, o, k.rule)?;
    let (rates, table) = cluster_table(cfg)?;
    let cluster = rates.iter().map(|(m, r)| (r - m).abs() / m).fold(0.0, f64::max);
    let checks = vec![
        CheckRecord::new("kms.boundary", "free KMS boundary condition per mode", None, boundary, cfg.tolerances.kms_boundary),
        CheckRecord::new("kms.normalisation", "interacting state is normalised", Some(o), norm, 0.0),
        CheckRecord::new("kms.ratio_vs_simplex", "ratio and connected simplex forms of the interacting state agree", Some(o), simplex.distance(&ratio), cfg.tolerances.ratio_simplex),
        CheckRecord::new("kms.chi_independence", "interacting state does not depend on the cutoff ramp", Some(o), ramp.residual, cfg.tolerances.cutoff_independence),
        CheckRecord::new("kms.epsilon_independence", "interacting state does not depend on the cutoff scale", Some(o), wide.residual, cfg.tolerances.cutoff_independence),
        CheckRecord::new("kms.clustering", "thermal two-point function decays at the mass", None, cluster, cfg.tolerances.cluster_relative),
    ];
    Ok(SuiteOutput::new(Suite::Kms, checks, vec![table]))
}

/// Continuum coincidence values and thermal masses over the configured inverse temperatures.
pub fn thermal_table(cfg: &RunConfig) -> CliResult<(Vec<[f64; 4]>, Table)> {
    let rows = cfg
        .kms
        .betas
        .iter()
        .map(|&b| Ok([b, continuum_thermal_coincidence(b)?, continuum_thermal_coincidence_exact(b), continuum_thermal_mass2(b, cfg.kms.coupling)?]))
        .collect::<CliResult<Vec<_>>>()?;
    let table = Table::from_writer("thermal_mass_vs_beta", |out| {
        use std::io::Write;
        writeln!(out, "beta,coincidence,closed_form,m2_beta,m2_beta_times_beta2")?;
        for r in &rows {
            writeln!(out, "{},{:.12e},{:.12e},{:.12e},{:.12e}", r[0], r[1], r[2], r[3], r[3] * r[0] * r[0])?;
        }
        Ok(())
    })?;
    Ok((rows, table))
}

fn thermal(cfg: &RunConfig) -> CliResult<SuiteOutput> {
    let k = &cfg.kms;
    let (rows, table) = thermal_table(cfg)?;
    let coincidence = rows.iter().map(|r| (r[1] - r[2]).abs() / r[2]).fold(0.0, f64::max);
    let scaled: Vec<f64> = rows.iter().map(|r| r[3] * r[0] * r[0]).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let spread = scaled.iter().map(|s| (s - mean).abs() / mean).fold(0.0, f64::max);

    // torus thermal mass: the phi^2 coefficient of the thermal image is 12 lambda d(x, x)
    let state = kms_state(cfg, cfg.masses.lattice.powi(2))?;
    let torus = state.torus();
    let pts = PointSet::from_time_nodes(torus, &[(0.0, 1.0 / torus.cell())]);
    let profile: Vec<f64> = (0..pts.len()).map(|i| 1.0 + 0.25 * i as f64).collect();
    let tm = thermal_mass(&state, &pts, &profile, k.orders)?;
    let pattern = tm.m2.iter().map(|(p, m)| (m.get(1, 1).re - 12.0 * tm.d_coincidence[*p]).abs() / (12.0 * tm.d_coincidence[*p])).fold(0.0, f64::max);

    let massless = kms_state(cfg, 0.0)?;
    let potential = LocalPotential::quartic(k.coupling);
    let direct = virtual_mass_expectation(&massless, &potential, cfg.cutoffs.chi, &k.fields, None, k.orders, k.rule)?;
    let virtual_gap = cfg
        .masses
        .m_q
        .iter()
        .map(|m| Ok(virtual_mass_expectation(&massless, &potential, cfg.cutoffs.chi, &k.fields, Some(*m), k.orders, k.rule)?.physical().distance(&direct.physical())))
        .collect::<CliResult<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let checks = vec![
        CheckRecord::new("thermal-mass.continuum_coincidence", "massless thermal coincidence value 1/(12 beta^2)", None, coincidence, cfg.tolerances.coincidence_relative),
        CheckRecord::new("thermal-mass.beta_scaling", "thermal mass scales as 1/beta^2", None, spread, cfg.tolerances.scaling_relative),
        CheckRecord::new("thermal-mass.torus_coefficient", "thermal mass is 12 lambda d(x, x)", Some(k.orders), pattern, cfg.tolerances.exact),
        CheckRecord::new("thermal-mass.virtual_mass_independence", "massless KMS state does not depend on the virtual mass", Some(k.orders), virtual_gap, cfg.tolerances.virtual_mass),
    ];
    Ok(SuiteOutput::new(Suite::ThermalMass, checks, vec![table]))
}

fn mode_profile(cfg: &RunConfig, k: f64, m1: f64, mu: f64, switch: Switch) -> CliResult<FrequencyProfile> {
    Ok(FrequencyProfile::new(k, m1 * m1, cfg.masses.m2.powi(2), mu, switch)?)
}

/// Adiabatic convergence scan over the configured switching times and momenta.
pub fn mu_table(cfg: &RunConfig) -> CliResult<(f64, Table)> {
    let template = mode_profile(cfg, 1.0, cfg.masses.m1, 1.0, cfg.cutoffs.switch)?;
    let scan = adiabatic_convergence_scan(&template, &cfg.cutoffs.mus, &cfg.modes.ks)?;
    let table = Table::from_writer("mu_convergence", |out| scan.write_csv(out))?;
    Ok((scan.slope, table))
}

fn modes(cfg: &RunConfig) -> CliResult<SuiteOutput> {
    let mu = cfg.modes.series_mu;
    let mut drift: f64 = 0.0;
    let mut increment: f64 = 0.0;
    let mut infrared = f64::NEG_INFINITY;
    let mut series_err: f64 = 0.0;
    let mut dump = None;
    for switch in [Switch::Smoothstep, Switch::Ramp] {
        let p = mode_profile(cfg, 1.0, cfg.masses.m1, mu, switch)?;
        let grid = TimeGrid::for_profile(&p, 2.0, 4.0)?;
        let traj = integrate_mode(&p, &grid)?;
        drift = drift.max(traj.max_wronskian_drift());
        increment = increment.max(energy_monotonicity(&traj, &p)?.max_increment);
        let series = r_lambda_iterate(&p, &adiabatic_mode(&p, &grid)?, 3)?;
        series_err = series_err.max(series.partial_sum(3).iter().zip(&traj.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max));
        let cold = mode_profile(cfg, cfg.modes.infrared_k, 0.0, mu, switch)?;
        let cold_traj = integrate_mode(&cold, &TimeGrid::for_profile(&cold, 2.0, 4.0)?)?;
        drift = drift.max(cold_traj.max_wronskian_drift());
        let e = energy_monotonicity(&cold_traj, &cold)?;
        increment = increment.max(e.max_increment);
        infrared = infrared.max(e.infrared_excess.unwrap_or(f64::NAN));
        if switch == cfg.cutoffs.switch {
            dump = Some(Table::from_writer("mode_trajectory", |out| traj.write_csv(out))?);
        }
    }
    let (slope, scan) = mu_table(cfg)?;
    let checks = vec![
        CheckRecord::new("modes.wronskian", "mode Wronskian is conserved", None, drift, cfg.tolerances.wronskian),
        CheckRecord::new("modes.energy_monotone", "E / omega^2 is monotone for growing frequencies", None, increment, cfg.tolerances.energy),
        CheckRecord::new("modes.infrared_bound", "|T_k|^2 <= 1/k for massless starts", None, infrared.max(0.0), cfg.tolerances.energy),
        CheckRecord::new("modes.mu_convergence", "adiabatic limit converges like 1/mu", None, (slope + 1.0).abs(), cfg.tolerances.slope),
        CheckRecord::new("modes.r_lambda_series", "three-term R_lambda series reproduces the mode", None, series_err, cfg.tolerances.series),
    ];
    let mut tables = vec![scan];
    tables.extend(dump);
    Ok(SuiteOutput::new(Suite::Modes, checks, tables))
}
