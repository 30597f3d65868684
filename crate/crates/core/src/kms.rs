//! Thermal Wick calculus: the free KMS state, connected correlators at imaginary-time
//! offsets, interacting KMS expectations built from the cocycle generator, cutoff
//! independence, clustering and the thermal mass.
//!
//! Continuous-time computations run on Gauss–Legendre time nodes times torus sites. The
//! kernels there are exact mode sums, so cutoff identities are limited by quadrature only.
//! An imaginary offset `u` of a vertex is carried by the contraction edges: a slot `p` of
//! vertex `j` and a slot `q` of a later vertex `k` contract with `Delta+(t_p - t_q + i (u_k - u_j))`.

use std::f64::consts::PI;
use std::io::Write;
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{alpha, star_product, KernelSeries, Monomial, PolyFunctional};
use crate::lattice::{LatticeSpec, PointSet, SpatialTorus, TemporalCutoff};
use crate::moller_classical::Theory;
use crate::moller_quantum::{BetaMap, Interaction};
use crate::propagators::{ModeBasis, ModeKernel, TimeStepping};
use crate::quadrature::QuadratureRule;
use crate::series::{FormalSeries, Orders, C64};

fn ci(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Two-point function a functional is normal ordered against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    Thermal,
    Vacuum,
}

/// Free KMS state of a Klein–Gordon field on the torus, with its vacuum for reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalState {
    pub beta: f64,
    pub mass2: f64,
    pub thermal: ModeBasis,
    pub vacuum: ModeBasis,
}

impl ThermalState {
    /// Continuous-time state; the massless zero mode is left out.
    pub fn new(torus: SpatialTorus, mass2: f64, beta: f64) -> Result<Self> {
        Self::with_stepping(torus, mass2, beta, TimeStepping::Continuous)
    }

    pub fn with_stepping(torus: SpatialTorus, mass2: f64, beta: f64, stepping: TimeStepping) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidBeta(beta));
        }
        let massless = mass2 == 0.0;
        let thermal = ModeBasis::new(torus, mass2, stepping, Some(beta), massless)?;
        let vacuum = ModeBasis::new(torus, mass2, stepping, None, massless)?;
        Ok(Self { beta, mass2, thermal, vacuum })
    }

    pub fn torus(&self) -> SpatialTorus {
        self.thermal.torus
    }

    pub fn mass(&self) -> f64 {
        self.mass2.sqrt()
    }

    pub fn kernel(&self) -> ModeKernel {
        self.thermal.kernel()
    }

    fn check_points(&self, points: &PointSet) -> Result<()> {
        if points.torus != self.torus() {
            return Err(Error::Mismatch("point set lives on a different torus".into()));
        }
        Ok(())
    }

    /// Theory with the thermal Hadamard kernel and the retarded part of its commutator.
    pub fn theory(&self, points: &PointSet, max_lambda: usize) -> Result<Theory> {
        self.check_points(points)?;
        let k = self.kernel();
        Theory::new(points.clone(), KernelSeries::constant(k.matrix(points)), KernelSeries::constant(k.retarded_matrix(points)), max_lambda)
    }

    /// `d = Delta+_beta - Delta+_vacuum` on the points.
    pub fn thermal_difference(&self, points: &PointSet) -> Result<KernelSeries> {
        self.check_points(points)?;
        Ok(KernelSeries::constant(self.kernel().matrix(points) - self.vacuum.kernel().matrix(points)))
    }

    /// `alpha_d`: re-expresses a vacuum-ordered functional in thermal ordering.
    pub fn to_thermal_ordering(&self, points: &PointSet, f: &PolyFunctional) -> Result<PolyFunctional> {
        alpha(f, &self.thermal_difference(points)?)
    }

    /// Largest per-mode violation of `Delta+_k(tau + i beta) = Delta+_k(-tau)` over `taus`.
    pub fn kms_boundary_residual(&self, taus: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for m in &self.thermal.modes {
            let (w, c, n) = (m.omega_tilde, m.amplitude, m.n_beta);
            for &tau in taus {
                let continued = C64::from_polar(c * (1.0 + n) * (-w * self.beta).exp(), w * tau) + C64::from_polar(c * n * (w * self.beta).exp(), -w * tau);
                let swapped = C64::from_polar(c * (1.0 + n), -w * tau) + C64::from_polar(c * n, w * tau);
                worst = worst.max((continued - swapped).norm());
            }
        }
        worst
    }
}

/// Sum over perfect pairings of `slots` with pair weight `k`.
fn pairing_sum(slots: &[usize], k: &impl Fn(usize, usize) -> C64) -> C64 {
    if slots.is_empty() {
        return ci(1.0, 0.0);
    }
    let mut acc = ci(0.0, 0.0);
    for j in 1..slots.len() {
        let mut rest = slots[1..].to_vec();
        rest.remove(j - 1);
        acc += k(slots[0], slots[j]) * pairing_sum(&rest, k);
    }
    acc
}

/// `omega_beta(F)` for `F` normal ordered against `ordering`: the constant term plus, for
/// vacuum ordering, every perfect pairing of each monomial's slots with `d`.
pub fn gaussian_expectation(state: &ThermalState, points: &PointSet, f: &PolyFunctional, ordering: Ordering) -> Result<FormalSeries> {
    state.check_points(points)?;
    if f.points() != points.len() {
        return Err(Error::Mismatch("functional and point set sizes differ".into()));
    }
    let mut out = FormalSeries::zero(f.orders());
    let support = f.support();
    let d = match ordering {
        Ordering::Thermal => None,
        Ordering::Vacuum => Some(state.kernel().block_shifted(points, &support, &support, 0.0) - state.vacuum.kernel().block_shifted(points, &support, &support, 0.0)),
    };
    for (m, c) in f.terms() {
        if m.is_empty() {
            out.add_assign(c);
            continue;
        }
        let Some(d) = &d else { continue };
        if m.len() % 2 == 1 {
            continue;
        }
        let slots: Vec<usize> = m.iter().map(|p| support.binary_search(p).expect("support covers monomials")).collect();
        let z = pairing_sum(&slots, &|a, b| 0.5 * (d[(a, b)] + d[(b, a)]));
        out.add_shifted(c, (m.len() / 2) as i32, &[z]);
    }
    Ok(out)
}

/// A functional placed at imaginary-time offset `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalVertex {
    pub functional: PolyFunctional,
    pub offset: f64,
}

/// Vertices with offsets `0 <= u_0 <= u_1 <= ... <= beta`, read as `A_0 star alpha_{iu_1}(A_1) star ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalVertexList {
    vertices: Vec<ThermalVertex>,
}

impl ThermalVertexList {
    pub fn new(vertices: Vec<ThermalVertex>, beta: f64) -> Result<Self> {
        let mut prev = 0.0;
        for v in &vertices {
            if !(0.0..=beta).contains(&v.offset) {
                return Err(Error::OffsetOutOfRange { u: v.offset, beta });
            }
            if v.offset < prev {
                return Err(Error::InvalidArgument(format!("offset {} follows the larger offset {prev}", v.offset)));
            }
            prev = v.offset;
        }
        if let Some(first) = vertices.first() {
            if vertices.iter().any(|v| v.functional.points() != first.functional.points() || v.functional.orders() != first.functional.orders()) {
                return Err(Error::Mismatch("vertices differ in point set or orders".into()));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[ThermalVertex] {
        &self.vertices
    }

    fn split(&self) -> (Vec<&PolyFunctional>, Vec<f64>) {
        (self.vertices.iter().map(|v| &v.functional).collect(), self.vertices.iter().map(|v| v.offset).collect())
    }
}

/// Perfect matchings of `slots` (vertex labels, sorted) without edges inside a vertex.
fn cross_matchings(labels: &[usize], used: &mut [bool], current: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
    let Some(first) = used.iter().position(|u| !u) else {
        out.push(current.clone());
        return;
    };
    used[first] = true;
    for j in first + 1..labels.len() {
        if used[j] || labels[j] == labels[first] {
            continue;
        }
        used[j] = true;
        current.push((first, j));
        cross_matchings(labels, used, current, out);
        current.pop();
        used[j] = false;
    }
    used[first] = false;
}

fn is_connected(n: usize, labels: &[usize], edges: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (root(&mut parent, labels[a]), root(&mut parent, labels[b]));
        parent[ra] = rb;
    }
    let r = root(&mut parent, 0);
    (1..n).all(|v| root(&mut parent, v) == r)
}

/// `sum_nodes w omega(A_0 @ u_0 star ... star A_n @ u_n)`, over all or over connected
/// contraction graphs. Each node lists one offset per vertex.
fn correlate(kernel: &ModeKernel, points: &PointSet, functionals: &[&PolyFunctional], nodes: &[(Vec<f64>, f64)], connected: bool) -> Result<FormalSeries> {
    let Some(first) = functionals.first() else {
        return Err(Error::InvalidArgument("a correlator needs at least one vertex".into()));
    };
    let orders = first.orders();
    if functionals.iter().any(|f| f.orders() != orders || f.points() != points.len()) {
        return Err(Error::Mismatch("vertices differ in orders or point set".into()));
    }
    let nv = functionals.len();
    if nodes.iter().any(|(u, _)| u.len() != nv) {
        return Err(Error::Mismatch("every node needs one offset per vertex".into()));
    }
    let supports: Vec<Vec<u32>> = functionals.iter().map(|f| f.support()).collect();
    let pair = |j: usize, k: usize| j * nv + k;
    // blocks[node][pair(j, k)] for j < k
    let blocks: Vec<Vec<Option<DMatrix<C64>>>> = nodes
        .par_iter()
        .map(|(u, _)| {
            let mut row = vec![None; nv * nv];
            for j in 0..nv {
                for k in j + 1..nv {
                    row[pair(j, k)] = Some(kernel.block_shifted(points, &supports[j], &supports[k], u[k] - u[j]));
                }
            }
            row
        })
        .collect();
    let terms: Vec<Vec<(&Monomial, &FormalSeries, u32)>> = functionals
        .iter()
        .map(|f| f.terms().filter_map(|(m, c)| c.lowest_lambda().map(|l| (m, c, l))).collect())
        .collect();
    let max_l = orders.lambda;

    let eval_tuple = |tuple: &[(&Monomial, &FormalSeries, u32)]| -> Option<FormalSeries> {
        let mut labels = Vec::new();
        let mut local = Vec::new();
        let mut degrees = vec![0usize; nv];
        for (v, (m, _, _)) in tuple.iter().enumerate() {
            for p in m.iter() {
                labels.push(v);
                local.push(supports[v].binary_search(p).expect("support covers monomials"));
            }
            degrees[v] = m.len();
        }
        let total = labels.len();
        if total % 2 == 1 || degrees.iter().any(|d| 2 * d > total) {
            return None;
        }
        if connected && nv > 1 && degrees.contains(&0) {
            return None;
        }
        let mut matchings = Vec::new();
        cross_matchings(&labels, &mut vec![false; total], &mut Vec::new(), &mut matchings);
        if connected && nv > 1 {
            matchings.retain(|e| is_connected(nv, &labels, e));
        }
        if matchings.is_empty() {
            return None;
        }
        let mut weight = ci(0.0, 0.0);
        for ((_, w), row) in nodes.iter().zip(&blocks) {
            let mut s = ci(0.0, 0.0);
            for edges in &matchings {
                let mut prod = ci(1.0, 0.0);
                for &(a, b) in edges {
                    let block = row[pair(labels[a], labels[b])].as_ref().expect("ordered pair");
                    prod *= block[(local[a], local[b])];
                }
                s += prod;
            }
            weight += s * *w;
        }
        let mut coeff = tuple[0].1.clone();
        for t in &tuple[1..] {
            coeff = coeff.mul(t.1);
        }
        let mut out = FormalSeries::zero(orders);
        out.add_shifted(&coeff, (total / 2) as i32, &[weight]);
        Some(out)
    };

    /// A monomial with its coefficient and coupling power.
    type Term<'a> = (&'a Monomial, &'a FormalSeries, u32);

    fn walk<'a>(
        terms: &[Vec<Term<'a>>],
        level: usize,
        lambda: u32,
        max_l: u32,
        tuple: &mut Vec<Term<'a>>,
        visit: &mut dyn FnMut(&[Term<'a>]),
    ) {
        if level == terms.len() {
            visit(tuple);
            return;
        }
        for t in &terms[level] {
            if lambda + t.2 > max_l {
                continue;
            }
            tuple.push(*t);
            walk(terms, level + 1, lambda + t.2, max_l, tuple, visit);
            tuple.pop();
        }
    }

    let pieces: Vec<FormalSeries> = terms[0]
        .par_iter()
        .filter(|t| t.2 <= max_l)
        .map(|t0| {
            let mut acc = FormalSeries::zero(orders);
            let mut tuple = vec![*t0];
            walk(&terms, 1, t0.2, max_l, &mut tuple, &mut |tp| {
                if let Some(x) = eval_tuple(tp) {
                    acc.add_assign(&x);
                }
            });
            acc
        })
        .collect();
    let mut total = FormalSeries::zero(orders);
    for p in &pieces {
        total.add_assign(p);
    }
    Ok(total)
}

/// Truncated correlation function `omega_c(A_0 star alpha_{iu_1}(A_1) star ...)`: connected
/// contraction graphs only.
pub fn connected_correlator(state: &ThermalState, points: &PointSet, list: &ThermalVertexList) -> Result<FormalSeries> {
    let (fs, u) = list.split();
    correlate(&state.kernel(), points, &fs, &[(u, 1.0)], true)
}

/// Full correlation function over every contraction graph.
pub fn full_correlator(state: &ThermalState, points: &PointSet, list: &ThermalVertexList) -> Result<FormalSeries> {
    let (fs, u) = list.split();
    correlate(&state.kernel(), points, &fs, &[(u, 1.0)], false)
}

/// Polynomial potential `lambda sum_k c_k int g phi^k`, smeared with a temporal profile `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPotential {
    pub terms: Vec<(u32, f64)>,
    pub ordering: Ordering,
}

impl LocalPotential {
    /// `lambda coupling int g phi^4`, vacuum ordered.
    pub fn quartic(coupling: f64) -> Self {
        Self { terms: vec![(4, coupling)], ordering: Ordering::Vacuum }
    }

    /// The smeared potential in thermal ordering, at first order in the coupling.
    pub fn smeared(&self, state: &ThermalState, points: &PointSet, profile: &[f64], orders: Orders) -> Result<PolyFunctional> {
        if profile.len() != points.len() {
            return Err(Error::Mismatch("profile length".into()));
        }
        let mut v = PolyFunctional::zero(points.len(), orders);
        for &(k, c) in &self.terms {
            let density: Vec<f64> = profile.iter().map(|g| g * c).collect();
            v = v.add(&PolyFunctional::local(points, &density, k, orders)?)?;
        }
        let v = v.shift(0, &[ci(0.0, 0.0), ci(1.0, 0.0)]);
        match self.ordering {
            Ordering::Thermal => Ok(v),
            Ordering::Vacuum => state.to_thermal_ordering(points, &v),
        }
    }
}

/// Continuous-time point set for cutoff computations: observation times first, then for
/// each cutoff Gauss–Legendre nodes on the pieces between its kinks and the observation times.
#[derive(Clone, Debug, PartialEq)]
pub struct KmsGrid {
    pub points: PointSet,
    pub observation_times: Vec<f64>,
    pub cutoffs: Vec<(TemporalCutoff, Range<usize>)>,
}

impl KmsGrid {
    pub fn new(torus: SpatialTorus, observation_times: &[f64], cutoffs: &[TemporalCutoff], rule: QuadratureRule) -> Result<Self> {
        rule.validate()?;
        let mut times = observation_times.to_vec();
        times.sort_by(f64::total_cmp);
        times.dedup();
        for c in cutoffs {
            c.validate()?;
            if let Some(t) = times.iter().find(|t| t.abs() >= c.epsilon) {
                return Err(Error::InvalidArgument(format!("observation time {t} lies outside (-{e}, {e})", e = c.epsilon)));
            }
        }
        let unit: Vec<(f64, f64)> = times.iter().map(|t| (*t, 1.0 / torus.cell())).collect();
        let mut points = PointSet::from_time_nodes(torus, &unit);
        let mut parts = Vec::new();
        for c in cutoffs {
            let mut breaks = vec![-c.outer, -c.inner, c.inner, c.outer];
            breaks.extend(&times);
            breaks.sort_by(f64::total_cmp);
            breaks.dedup();
            let mut nodes = Vec::new();
            for w in breaks.windows(2) {
                nodes.extend(rule.nodes(w[0], w[1])?);
            }
            let part = PointSet::from_time_nodes(torus, &nodes);
            let start = points.extend(&part)?;
            parts.push((*c, start..start + part.len()));
        }
        Ok(Self { points, observation_times: times, cutoffs: parts })
    }

    /// Index of the observation point at `time` and spatial `site`.
    pub fn observation_point(&self, time: f64, site: usize) -> Result<usize> {
        let ns = self.points.torus.sites();
        let t = self
            .observation_times
            .iter()
            .position(|x| *x == time)
            .ok_or_else(|| Error::InvalidArgument(format!("{time} is not an observation time")))?;
        if site >= ns {
            return Err(Error::InvalidArgument(format!("site {site} outside the torus")));
        }
        Ok(t * ns + site)
    }

    /// `f(cutoff, t)` on the nodes of cutoff `part`, zero elsewhere.
    pub fn profile(&self, part: usize, f: impl Fn(&TemporalCutoff, f64) -> f64) -> Vec<f64> {
        let (c, range) = &self.cutoffs[part];
        (0..self.points.len()).map(|p| if range.contains(&p) { f(c, self.points.times[p]) } else { 0.0 }).collect()
    }
}

/// `phi(x_1) star ... star phi(x_n)` in the algebra of `theory`.
pub fn field_product(theory: &Theory, indices: &[usize], orders: Orders) -> Result<PolyFunctional> {
    let n = theory.dim();
    let mut f = PolyFunctional::one(n, orders);
    for &p in indices {
        if p >= n {
            return Err(Error::InvalidArgument(format!("point {p} outside the point set")));
        }
        f = star_product(&f, &PolyFunctional::monomial(n, vec![p as u32], FormalSeries::one(orders)), &theory.plus)?;
    }
    Ok(f)
}

/// The free KMS state perturbed through a cocycle generator `K`.
#[derive(Clone, Debug)]
pub struct InteractingState {
    pub state: ThermalState,
    pub points: PointSet,
    pub generator: PolyFunctional,
}

impl InteractingState {
    fn check(&self, a: &PolyFunctional, n_max: usize, rule: &QuadratureRule) -> Result<()> {
        rule.validate()?;
        if n_max > a.orders().lambda as usize {
            return Err(Error::InvalidArgument(format!("n_max = {n_max} exceeds the coupling order {}", a.orders().lambda)));
        }
        if a.orders() != self.generator.orders() {
            return Err(Error::OrderMismatch("observable and generator".into()));
        }
        Ok(())
    }

    /// `-K / hbar`, the vertex of the simplex expansion.
    fn vertex(&self) -> PolyFunctional {
        self.generator.shift(-1, &[ci(-1.0, 0.0)])
    }

    /// `sum_{n <= n_max} (-1/hbar)^n int_{beta S_n} omega_c(A star alpha_{iu_1}(K) star ... ) dU`.
    pub fn expectation(&self, a: &PolyFunctional, n_max: usize, rule: &QuadratureRule) -> Result<FormalSeries> {
        self.check(a, n_max, rule)?;
        let kernel = self.state.kernel();
        let k = self.vertex();
        let mut total = FormalSeries::zero(a.orders());
        for n in 0..=n_max {
            let mut fs = vec![a];
            fs.extend(std::iter::repeat(&k).take(n));
            let nodes: Vec<(Vec<f64>, f64)> = rule.simplex(n, self.state.beta)?.into_iter().map(|(u, w)| (std::iter::once(0.0).chain(u).collect(), w)).collect();
            total.add_assign(&correlate(&kernel, &self.points, &fs, &nodes, true)?);
        }
        Ok(total)
    }

    /// `omega(A star U(i beta)) / omega(U(i beta))` with full correlators.
    pub fn expectation_ratio(&self, a: &PolyFunctional, n_max: usize, rule: &QuadratureRule) -> Result<FormalSeries> {
        self.check(a, n_max, rule)?;
        let kernel = self.state.kernel();
        let k = self.vertex();
        let orders = a.orders();
        let mut num = FormalSeries::zero(orders);
        let mut den = FormalSeries::one(orders);
        for n in 0..=n_max {
            let simplex = rule.simplex(n, self.state.beta)?;
            let mut fs = vec![a];
            fs.extend(std::iter::repeat(&k).take(n));
            let nodes: Vec<(Vec<f64>, f64)> = simplex.iter().map(|(u, w)| (std::iter::once(0.0).chain(u.iter().copied()).collect(), *w)).collect();
            num.add_assign(&correlate(&kernel, &self.points, &fs, &nodes, false)?);
            if n > 0 {
                den.add_assign(&correlate(&kernel, &self.points, &fs[1..], &simplex, false)?);
            }
        }
        Ok(num.mul(&den.inverse()?))
    }
}

/// Interaction `V(chi)` with its cocycle generator `K = r_{V(chi)}(V(chi'^-))`.
#[derive(Clone, Debug)]
pub struct CutoffInteraction {
    pub interaction: Interaction,
    pub interacting: InteractingState,
}

impl CutoffInteraction {
    pub fn new(state: &ThermalState, theory: &Theory, v: &PolyFunctional, v_past_derivative: &PolyFunctional) -> Result<Self> {
        let interaction = Interaction::new(theory, v)?;
        let generator = interaction.forward(v_past_derivative)?;
        Ok(Self { interaction, interacting: InteractingState { state: state.clone(), points: theory.points.clone(), generator } })
    }

    /// The interaction of cutoff `part` of a grid.
    pub fn on_grid(state: &ThermalState, theory: &Theory, grid: &KmsGrid, part: usize, potential: &LocalPotential, orders: Orders) -> Result<Self> {
        let v = potential.smeared(state, &grid.points, &grid.profile(part, |c, t| c.value(t)), orders)?;
        let vdot = potential.smeared(state, &grid.points, &grid.profile(part, |c, t| c.past_derivative(t)), orders)?;
        Self::new(state, theory, &v, &vdot)
    }

    /// `omega_{V(chi)}(r_{V(chi)}(F))`.
    pub fn expectation(&self, f: &PolyFunctional, n_max: usize, rule: &QuadratureRule) -> Result<FormalSeries> {
        self.interacting.expectation(&self.interaction.forward(f)?, n_max, rule)
    }
}

/// `E_chi` for a product of fields, in the grid's theory.
pub fn interacting_kms_expectation(
    state: &ThermalState,
    potential: &LocalPotential,
    chi: TemporalCutoff,
    fields: &[(f64, usize)],
    orders: Orders,
    rule: QuadratureRule,
) -> Result<FormalSeries> {
    let times: Vec<f64> = fields.iter().map(|f| f.0).collect();
    let grid = KmsGrid::new(state.torus(), &times, &[chi], rule)?;
    let theory = state.theory(&grid.points, orders.lambda as usize)?;
    let f = observation(&grid, &theory, fields, orders)?;
    CutoffInteraction::on_grid(state, &theory, &grid, 0, potential, orders)?.expectation(&f, orders.lambda as usize, &rule)
}

fn observation(grid: &KmsGrid, theory: &Theory, fields: &[(f64, usize)], orders: Orders) -> Result<PolyFunctional> {
    let idx = fields.iter().map(|&(t, s)| grid.observation_point(t, s)).collect::<Result<Vec<_>>>()?;
    field_product(theory, &idx, orders)
}

/// Expectations of the same observable under two cutoffs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CutoffComparison {
    pub first: FormalSeries,
    pub second: FormalSeries,
    pub residual: f64,
}

/// `|E_chi - E_chi'|` for `F = phi(x_1) star ... star phi(x_n)`, at the kept orders.
pub fn chi_independence_check(
    state: &ThermalState,
    potential: &LocalPotential,
    chi: TemporalCutoff,
    chi2: TemporalCutoff,
    fields: &[(f64, usize)],
    orders: Orders,
    rule: QuadratureRule,
) -> Result<CutoffComparison> {
    let times: Vec<f64> = fields.iter().map(|f| f.0).collect();
    let grid = KmsGrid::new(state.torus(), &times, &[chi, chi2], rule)?;
    let theory = state.theory(&grid.points, orders.lambda as usize)?;
    let f = observation(&grid, &theory, fields, orders)?;
    let n_max = orders.lambda as usize;
    let first = CutoffInteraction::on_grid(state, &theory, &grid, 0, potential, orders)?.expectation(&f, n_max, &rule)?;
    let second = CutoffInteraction::on_grid(state, &theory, &grid, 1, potential, orders)?.expectation(&f, n_max, &rule)?;
    let residual = first.physical().distance(&second.physical());
    Ok(CutoffComparison { first, second, residual })
}

/// `E_chi` routed through an auxiliary theory with virtual mass `m_q`:
/// `r_{1,V} = R o r_{2, beta(V - Q)} o beta` with `Q = (lambda/2) int m_q^2 chi phi^2`,
/// applied to the observable and to the generator. `None` computes `E_chi` directly.
pub fn virtual_mass_expectation(
    state: &ThermalState,
    potential: &LocalPotential,
    chi: TemporalCutoff,
    fields: &[(f64, usize)],
    m_q: Option<f64>,
    orders: Orders,
    rule: QuadratureRule,
) -> Result<FormalSeries> {
    let Some(m_q) = m_q else {
        return interacting_kms_expectation(state, potential, chi, fields, orders, rule);
    };
    if !(m_q > 0.0) {
        return Err(Error::InvalidArgument(format!("virtual mass {m_q} must be positive")));
    }
    let times: Vec<f64> = fields.iter().map(|f| f.0).collect();
    let grid = KmsGrid::new(state.torus(), &times, &[chi], rule)?;
    let theory = state.theory(&grid.points, orders.lambda as usize)?;
    let f = observation(&grid, &theory, fields, orders)?;
    let v = potential.smeared(state, &grid.points, &grid.profile(0, |c, t| c.value(t)), orders)?;
    let vdot = potential.smeared(state, &grid.points, &grid.profile(0, |c, t| c.past_derivative(t)), orders)?;
    let mass = grid.profile(0, |c, t| m_q * m_q * c.value(t));
    let beta = BetaMap::new(&theory, &mass, orders)?;
    let inner = Interaction::new(&beta.theory2, &beta.apply(&v.sub(&beta.q)?)?)?;
    let route = |x: &PolyFunctional| -> Result<PolyFunctional> { beta.classical.pullback(&inner.forward(&beta.apply(x)?)?) };
    let interacting = InteractingState { state: state.clone(), points: grid.points.clone(), generator: route(&vdot)? };
    interacting.expectation(&route(&f)?, orders.lambda as usize, &rule)
}

/// Cocycle of the interacting time evolution on the time-sliced lattice.
///
/// `U(t) = E star alpha_1(E) star ... star alpha_{t-1}(E)` with the step factor
/// `E = exp_star(i dt K / hbar)`, so that `U(t + s) = U(t) star alpha_t(U(s))` and `U` is unitary.
#[derive(Clone, Debug)]
pub struct Cocycle {
    pub lattice: LatticeSpec,
    pub theory: Theory,
    pub generator: PolyFunctional,
    step: PolyFunctional,
}

impl Cocycle {
    /// `center` is the lattice time at which the cutoff is centred.
    pub fn new(state: &ThermalState, lattice: &LatticeSpec, potential: &LocalPotential, cutoff: TemporalCutoff, center: f64, orders: Orders) -> Result<Self> {
        cutoff.validate()?;
        if state.thermal.stepping != (TimeStepping::Lattice { dt: lattice.dt }) || state.torus() != lattice.torus {
            return Err(Error::Mismatch("state and lattice use different discretisations".into()));
        }
        let points = PointSet::from_lattice(lattice);
        let theory = state.theory(&points, orders.lambda as usize)?;
        let dt = lattice.dt;
        let chi = |t: f64| cutoff.value(t - center);
        let profile: Vec<f64> = points.times.iter().map(|&t| chi(t)).collect();
        // one-sided differences on the negative-time ramp
        let past: Vec<f64> = points.times.iter().map(|&t| if t < center { (chi(t + dt) - chi(t)) / dt } else { 0.0 }).collect();
        let v = potential.smeared(state, &points, &profile, orders)?;
        let vdot = potential.smeared(state, &points, &past, orders)?;
        let generator = Interaction::new(&theory, &v)?.forward(&vdot)?;
        let x = generator.shift(-1, &[ci(0.0, dt)]);
        let mut step = PolyFunctional::one(points.len(), orders);
        let mut power = step.clone();
        for n in 1..=orders.lambda {
            power = star_product(&power, &x, &theory.plus)?.scale(ci(1.0 / n as f64, 0.0));
            step = step.add(&power)?;
        }
        Ok(Self { lattice: *lattice, theory, generator, step })
    }

    /// `alpha_{steps dt}`: the functional evaluated on the field shifted to later times.
    pub fn translate(&self, f: &PolyFunctional, steps: usize) -> Result<PolyFunctional> {
        let shift = (steps * self.lattice.spatial_sites()) as u32;
        f.reindex(f.points(), |p| p.checked_sub(shift))
            .map_err(|_| Error::InvalidArgument(format!("translation by {steps} steps leaves the lattice")))
    }

    pub fn unitary(&self, steps: usize) -> Result<PolyFunctional> {
        let mut u = PolyFunctional::one(self.theory.dim(), self.step.orders());
        for j in 0..steps {
            u = star_product(&u, &self.translate(&self.step, j)?, &self.theory.plus)?;
        }
        Ok(u)
    }

    /// `|U(t + s) - U(t) star alpha_t(U(s))|`.
    pub fn cocycle_residual(&self, t: usize, s: usize) -> Result<f64> {
        let rhs = star_product(&self.unitary(t)?, &self.translate(&self.unitary(s)?, t)?, &self.theory.plus)?;
        Ok(self.unitary(t + s)?.distance(&rhs))
    }

    /// `|U(t) star U(t)* - 1|`.
    pub fn unitarity_residual(&self, t: usize) -> Result<f64> {
        let u = self.unitary(t)?;
        let one = PolyFunctional::one(u.points(), u.orders());
        Ok(star_product(&u, &u.conj(), &self.theory.plus)?.distance(&one))
    }

    /// First-order part of `|(U(dt) - 1) / dt - i K / hbar|`.
    pub fn generator_residual(&self) -> Result<f64> {
        let u = self.unitary(1)?;
        let one = PolyFunctional::one(u.points(), u.orders());
        let lhs = u.sub(&one)?.scale(ci(1.0 / self.lattice.dt, 0.0));
        let rhs = self.generator.shift(-1, &[ci(0.0, 1.0)]);
        Ok(lhs.lambda_layer(1).distance(&rhs.lambda_layer(1)))
    }
}

/// `U(t)` for a cutoff interaction on the lattice.
pub fn cocycle_unitary(
    state: &ThermalState,
    lattice: &LatticeSpec,
    potential: &LocalPotential,
    cutoff: TemporalCutoff,
    center: f64,
    t: usize,
    orders: Orders,
) -> Result<PolyFunctional> {
    Cocycle::new(state, lattice, potential, cutoff, center, orders)?.unitary(t)
}

/// `alpha_d(lambda int f phi^4) = V + Q + C` with `Q = (1/2) int f m2_beta phi^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThermalMass {
    /// `d(x, x)` per point.
    pub d_coincidence: Vec<f64>,
    /// `m2_beta` at each point where `f` is nonzero.
    pub m2: Vec<(usize, FormalSeries)>,
    pub quartic: PolyFunctional,
    pub quadratic: PolyFunctional,
    pub constant: FormalSeries,
}

pub fn thermal_mass(state: &ThermalState, points: &PointSet, f: &[f64], orders: Orders) -> Result<ThermalMass> {
    let v = PolyFunctional::local(points, f, 4, orders)?.shift(0, &[ci(0.0, 0.0), ci(1.0, 0.0)]);
    let d = state.thermal_difference(points)?;
    let mapped = alpha(&v, &d)?;
    let n = points.len();
    let mut parts = [PolyFunctional::zero(n, orders), PolyFunctional::zero(n, orders), PolyFunctional::zero(n, orders)];
    for (m, c) in mapped.terms() {
        let slot = match m.len() {
            4 => 0,
            2 => 1,
            0 => 2,
            k => return Err(Error::InvalidArgument(format!("unexpected degree {k} in the thermal image"))),
        };
        parts[slot].add_monomial(m.clone(), c);
    }
    let [quartic, quadratic, constant_part] = parts;
    let m2 = (0..n)
        .filter(|&p| f[p] != 0.0)
        .map(|p| (p, quadratic.coefficient(&[p as u32, p as u32]).scale(ci(2.0 / (points.weights[p] * f[p]), 0.0))))
        .collect();
    let layer = d.layer(0);
    Ok(ThermalMass {
        d_coincidence: (0..n).map(|p| layer[(p, p)].re).collect(),
        m2,
        quartic,
        quadratic,
        constant: constant_part.coefficient(&[]),
    })
}

/// `int d^3k / (2 pi)^3 n(k) / k` for the massless continuum field, by panel refinement.
pub fn continuum_thermal_coincidence(beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidBeta(beta));
    }
    let kmax = 80.0 / beta;
    let mut prev: Option<f64> = None;
    for panels in [2, 4, 8, 16, 32, 64] {
        let v = QuadratureRule::new(16, panels)?.integrate(0.0, kmax, |k| k / (beta * k).exp_m1())? / (2.0 * PI * PI);
        if let Some(p) = prev {
            if (v - p).abs() <= 1e-13 * v.abs() {
                return Ok(v);
            }
        }
        prev = Some(v);
    }
    Err(Error::Quadrature("thermal coincidence integral did not settle".into()))
}

/// Closed form `1 / (12 beta^2)` of the continuum coincidence value.
pub fn continuum_thermal_coincidence_exact(beta: f64) -> f64 {
    1.0 / (12.0 * beta * beta)
}

/// Continuum thermal mass `m2_beta = 12 coupling d(x, x)` of `coupling int phi^4`, in units `hbar = 1`.
pub fn continuum_thermal_mass2(beta: f64, coupling: f64) -> Result<f64> {
    Ok(12.0 * coupling * continuum_thermal_coincidence(beta)?)
}

/// Log-linear fit of the equal-time spatial decay of `|Delta+_beta(0, r)|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterFit {
    pub rate: f64,
    pub expected: f64,
    /// `(r, |Delta+_beta(0, r)|)`.
    pub samples: Vec<(f64, f64)>,
}

impl ClusterFit {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r,abs_kernel")?;
        for (r, k) in &self.samples {
            writeln!(out, "{r},{k}")?;
        }
        Ok(())
    }
}

/// Fits the decay over `r` in `[2/m, half period]` along the first axis.
pub fn cluster_decay_fit(state: &ThermalState) -> Result<ClusterFit> {
    let m = state.mass();
    if !(m > 0.0) {
        return Err(Error::InvalidArgument("clustering needs a positive mass".into()));
    }
    let torus = state.torus();
    if torus.period() < 8.0 / m {
        return Err(Error::InvalidArgument(format!("torus period {} is below 8/m = {}", torus.period(), 8.0 / m)));
    }
    let kernel = state.kernel();
    let mut samples = Vec::new();
    for j in 0..=torus.n_x / 2 {
        let r = j as f64 * torus.dx;
        if r + 1e-12 < 2.0 / m || r > 0.5 * torus.period() + 1e-12 {
            continue;
        }
        let mut coords = vec![0usize; torus.d];
        coords[0] = j;
        samples.push((r, kernel.value(0.0, torus.site(&coords), 0).norm()));
    }
    if samples.len() < 3 {
        return Err(Error::Resolution("fewer than three separations in the fit window".into()));
    }
    let max = samples.iter().map(|s| s.1).fold(0.0, f64::max);
    let min = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || (max / min).log10() < 2.0 {
        return Err(Error::Fit(format!("dynamic range {:.2} decades is below 2", (max / min).log10())));
    }
    let n = samples.len() as f64;
    let mx = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let my = samples.iter().map(|s| s.1.ln()).sum::<f64>() / n;
    let sxy: f64 = samples.iter().map(|s| (s.0 - mx) * (s.1.ln() - my)).sum();
    let sxx: f64 = samples.iter().map(|s| (s.0 - mx).powi(2)).sum();
    Ok(ClusterFit { rate: -sxy / sxx, expected: m, samples })
}
