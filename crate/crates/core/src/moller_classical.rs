//! Classical Moller maps for quadratic perturbations.
//!
//! For `Q = 1/2 int (M phi^2 - 2 j phi) dmu` the map `R = 1 - Delta^R_2 o Q'` sends solutions of
//! the unperturbed dynamics to solutions of the perturbed one. On the lattice it is the
//! exact field map `R phi = phi - mu G_2 (M phi - j)` with inverse `phi + mu G_1 (M phi - j)`
//! restricted to the homogeneous part, and it transports every propagator of theory 1 to
//! theory 2. The same maps are also provided as coupling series for the quantum checks.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{KernelSeries, LinearSubstitution, PolyFunctional};
use crate::lattice::{spatial_fourier, DensityFunction, Field, LatticeSpec, PointSet};
use crate::propagators::{kms_two_point, retarded, vacuum_two_point, KleinGordonOp};
use crate::series::{FormalSeries, LambdaPoly, Orders, C64};

fn real_to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// `Q(phi) = 1/2 int (M phi^2 - 2 j phi) dmu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticPerturbation {
    pub mass: DensityFunction,
    pub source: Option<DensityFunction>,
}

impl QuadraticPerturbation {
    pub fn mass_only(mass: DensityFunction) -> Self {
        Self { mass, source: None }
    }

    /// `Q` as a functional carrying one power of the coupling.
    pub fn functional(&self, points: &PointSet, orders: Orders) -> Result<PolyFunctional> {
        let lambda = FormalSeries::term(orders, 0, 1, C64::new(1.0, 0.0));
        let quad = PolyFunctional::from_kernel(
            points,
            &crate::functionals::MonomialKernel::Local { density: self.mass.values.iter().map(|m| 0.5 * m).collect(), power: 2 },
            &lambda,
        )?;
        match &self.source {
            None => Ok(quad),
            Some(j) => {
                let lin = PolyFunctional::from_kernel(
                    points,
                    &crate::functionals::MonomialKernel::Local { density: j.values.iter().map(|x| -x).collect(), power: 1 },
                    &lambda,
                )?;
                quad.add(&lin)
            }
        }
    }
}

/// Exact Moller map of a quadratic perturbation at unit coupling.
#[derive(Clone, Debug, PartialEq)]
pub struct MollerOperator {
    pub op1: KleinGordonOp,
    pub op2: KleinGordonOp,
    /// Linear part `1 - mu G_2 M`.
    pub forward: DMatrix<f64>,
    /// Inverse of the linear part, `1 + mu G_1 M`.
    pub inverse: DMatrix<f64>,
    /// Affine shift `mu G_2 j`.
    pub shift: DVector<f64>,
}

/// Builds `R` from the retarded kernel of `P_1 + M` and its inverse from that of `P_1`.
pub fn classical_moller_exact(op1: &KleinGordonOp, q: &QuadraticPerturbation) -> Result<MollerOperator> {
    let l = op1.lattice;
    let op2 = op1.perturbed(&q.mass)?;
    let mu = l.measure();
    let g1 = retarded(op1).matrix.map(|z| z.re);
    let g2 = retarded(&op2).matrix.map(|z| z.re);
    let d = DMatrix::from_diagonal(&DVector::from_vec(q.mass.values.clone()));
    let n = l.sites();
    let forward = DMatrix::identity(n, n) - &g2 * &d * mu;
    let inverse = DMatrix::identity(n, n) + &g1 * &d * mu;
    let shift = match &q.source {
        Some(j) => {
            if j.values.len() != n {
                return Err(Error::Mismatch("source length".into()));
            }
            &g2 * DVector::from_vec(j.values.clone()) * mu
        }
        None => DVector::zeros(n),
    };
    Ok(MollerOperator { op1: op1.clone(), op2, forward, inverse, shift })
}

impl MollerOperator {
    /// `R phi`.
    pub fn apply(&self, phi: &Field) -> Field {
        let v = DVector::from_vec(phi.values.clone());
        let out = real_to_complex(&self.forward) * v + self.shift.map(|x| C64::new(x, 0.0));
        Field { lattice: phi.lattice, values: out.iter().cloned().collect() }
    }

    /// Adjoint with respect to the weighted pairing; uniform weights make it the transpose.
    pub fn adjoint(&self) -> DMatrix<f64> {
        self.forward.transpose()
    }

    /// `max(|R R^-1 - 1|, |R^-1 R - 1|)`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.forward.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        ((&self.forward * &self.inverse - &id).amax()).max((&self.inverse * &self.forward - &id).amax())
    }

    /// `|P_2 R - P_1|` on rows whose successor slice exists.
    pub fn intertwining_residual(&self) -> f64 {
        let l = self.op1.lattice;
        let diff = self.op2.matrix() * &self.forward - self.op1.matrix();
        let rows = (l.n_t - 1) * l.spatial_sites();
        let scale = self.op1.matrix().amax();
        diff.rows(0, rows).amax() / scale
    }
}

/// Lattice causal future of a set of sites: `(t, x)` lies in it when some `(s, y)` of the set
/// has `s < t` and lattice distance from `y` to `x` at most `t - s - 1` hops.
pub fn causal_future(lattice: &LatticeSpec, support: &[usize]) -> Vec<bool> {
    let torus = lattice.torus;
    let hops = |a: usize, b: usize| -> usize {
        let (ca, cb) = (torus.coords(a), torus.coords(b));
        ca.iter()
            .zip(cb.iter())
            .map(|(x, y)| {
                let d = x.abs_diff(*y);
                d.min(torus.n_x - d)
            })
            .sum()
    };
    (0..lattice.sites())
        .map(|i| {
            let (t, x) = (lattice.time_index(i), lattice.spatial_index(i));
            support.iter().any(|&j| {
                let (s, y) = (lattice.time_index(j), lattice.spatial_index(j));
                s < t && hops(x, y) < t - s
            })
        })
        .collect()
}

/// Propagators of theory 2 obtained by transport with `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportedKernels {
    pub retarded: DMatrix<C64>,
    pub advanced: DMatrix<C64>,
    pub causal: DMatrix<C64>,
    pub plus: DMatrix<C64>,
}

/// `Delta^R_2 = R Delta^R_1`, `Delta^A_2 = Delta^A_1 R^T`, `Delta_2 = R Delta_1 R^T`,
/// `Delta+_2 = R Delta+_1 R^T`.
pub fn pushforward_propagators(r: &MollerOperator, plus1: &DMatrix<C64>) -> TransportedKernels {
    let rc = real_to_complex(&r.forward);
    let rt = rc.transpose();
    let g1 = retarded(&r.op1).matrix;
    let retarded2 = &rc * &g1;
    let advanced2 = g1.transpose() * &rt;
    let causal1 = &g1 - g1.transpose();
    TransportedKernels { retarded: retarded2, advanced: advanced2, causal: &rc * causal1 * &rt, plus: &rc * plus1 * &rt }
}

/// One row of the Neumann-series diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeumannTerm {
    pub n: usize,
    /// Mixed mode-space norm of `r^n phi`.
    pub norm: f64,
    /// `(T^2 |M|)^n / n! |phi|`.
    pub bound: f64,
    /// Largest entry of the partial sum minus the exact inverse.
    pub error: f64,
}

/// Partial sums `sum_{k<=n} r^k` of `R = (1 - r)^-1`, `r = -mu G_1 M`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeumannReport {
    pub partial_sum: DMatrix<f64>,
    pub terms: Vec<NeumannTerm>,
}

impl NeumannReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,norm,bound,error")?;
        for t in &self.terms {
            writeln!(out, "{},{:.12e},{:.12e},{:.12e}", t.n, t.norm, t.bound, t.error)?;
        }
        Ok(())
    }
}

/// `sum_k max_t |hat psi(t, k)|` with the unitary spatial transform.
pub fn mixed_norm(field: &Field) -> f64 {
    let modes = spatial_fourier(field);
    let l = field.lattice;
    let ns = l.spatial_sites();
    (0..ns).map(|k| (0..l.n_t).map(|t| modes.values[t * ns + k].norm()).fold(0.0, f64::max)).sum()
}

/// `sum_q max_t |m_q(t)|` with the averaged Fourier coefficients `m_q = n_s^-1 sum_x e^{-iqx} M`.
pub fn mass_norm(lattice: &LatticeSpec, mass: &DensityFunction) -> f64 {
    let field = Field { lattice: *lattice, values: mass.values.iter().map(|m| C64::new(*m, 0.0)).collect() };
    mixed_norm(&field) / (lattice.spatial_sites() as f64).sqrt()
}

/// Neumann partial sums with their term norms against the factorial bound.
pub fn classical_moller_neumann(op1: &KleinGordonOp, q: &QuadraticPerturbation, n_terms: usize, probe: &Field) -> Result<NeumannReport> {
    if n_terms < 1 {
        return Err(Error::InvalidArgument("n_terms must be at least 1".into()));
    }
    let exact = classical_moller_exact(op1, q)?;
    let l = op1.lattice;
    let mu = l.measure();
    let g1 = retarded(op1).matrix.map(|z| z.re);
    let d = DMatrix::from_diagonal(&DVector::from_vec(q.mass.values.clone()));
    let r = -(&g1 * &d) * mu;
    let n = l.sites();
    let span = l.n_t as f64 * l.dt;
    let m_norm = mass_norm(&l, &q.mass);
    let phi_norm = mixed_norm(probe);
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut partial = DMatrix::<f64>::identity(n, n);
    let mut probe_power = DVector::from_vec(probe.values.clone());
    let rc = real_to_complex(&r);
    let mut terms = vec![NeumannTerm { n: 0, norm: phi_norm, bound: phi_norm, error: (&partial - &exact.forward).amax() }];
    let mut factorial = 1.0;
    for k in 1..=n_terms {
        power = &power * &r;
        partial += &power;
        probe_power = &rc * probe_power;
        factorial *= k as f64;
        let field = Field { lattice: l, values: probe_power.iter().cloned().collect() };
        terms.push(NeumannTerm {
            n: k,
            norm: mixed_norm(&field),
            bound: (span * span * m_norm).powi(k as i32) / factorial * phi_norm,
            error: (&partial - &exact.forward).amax(),
        });
    }
    Ok(NeumannReport { partial_sum: partial, terms })
}

/// Free theory on a point set: Hadamard and retarded kernels as coupling series.
#[derive(Clone, Debug, PartialEq)]
pub struct Theory {
    pub points: PointSet,
    pub max_lambda: usize,
    pub plus: KernelSeries,
    pub retarded: KernelSeries,
}

impl Theory {
    pub fn new(points: PointSet, plus: KernelSeries, retarded: KernelSeries, max_lambda: usize) -> Result<Self> {
        if plus.dim() != points.len() || retarded.dim() != points.len() {
            return Err(Error::Mismatch("kernel and point-set sizes differ".into()));
        }
        Ok(Self { points, max_lambda, plus: plus.truncate(max_lambda), retarded: retarded.truncate(max_lambda) })
    }

    /// Lattice theory in the vacuum state of `op`.
    pub fn lattice_vacuum(op: &KleinGordonOp, max_lambda: usize) -> Result<Self> {
        let (plus, _) = vacuum_two_point(op)?;
        Self::new(PointSet::from_lattice(&op.lattice), KernelSeries::constant(plus.matrix), KernelSeries::constant(retarded(op).matrix), max_lambda)
    }

    /// Lattice theory in the thermal state of `op`.
    pub fn lattice_thermal(op: &KleinGordonOp, beta: f64, max_lambda: usize) -> Result<Self> {
        let (plus, _) = kms_two_point(op, beta)?;
        Self::new(PointSet::from_lattice(&op.lattice), KernelSeries::constant(plus.matrix), KernelSeries::constant(retarded(op).matrix), max_lambda)
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn advanced(&self) -> KernelSeries {
        self.retarded.transpose()
    }

    pub fn causal(&self) -> KernelSeries {
        self.retarded.sub(&self.advanced())
    }

    /// `Delta^F = Delta+ + i Delta^A`.
    pub fn feynman(&self) -> KernelSeries {
        self.plus.add(&self.advanced().scale(C64::new(0.0, 1.0)))
    }

    /// Moller series of `Q = lambda/2 int M phi^2` relative to this theory.
    pub fn mass_moller(&self, mass: &[f64]) -> Result<MollerSeries> {
        let n = self.dim();
        if mass.len() != n {
            return Err(Error::Mismatch("mass profile length".into()));
        }
        // r = -lambda Delta^R W M
        let dm = DMatrix::from_diagonal(&DVector::from_iterator(n, mass.iter().map(|m| C64::new(*m, 0.0))));
        let base = KernelSeries::constant(dm);
        let gd = self.retarded.compose(&base, &self.points.weights, self.max_lambda);
        let mut layers = vec![DMatrix::zeros(n, n)];
        layers.extend(gd.layers.iter().map(|m| -m));
        let r = KernelSeries::from_layers(layers).truncate(self.max_lambda);
        let identity = KernelSeries::identity(n);
        let mut forward = identity.clone();
        let mut power = identity.clone();
        for _ in 0..self.max_lambda {
            power = power.matmul(&r, self.max_lambda);
            forward = forward.add(&power);
        }
        Ok(MollerSeries { forward, inverse: identity.sub(&r) })
    }

    /// Theory 2 obtained by transporting the kernels with `R`.
    pub fn transported(&self, r: &MollerSeries) -> Self {
        let l = self.max_lambda;
        let rt = r.forward.transpose();
        Self {
            points: self.points.clone(),
            max_lambda: l,
            plus: r.forward.matmul(&self.plus, l).matmul(&rt, l),
            retarded: r.forward.matmul(&self.retarded, l),
        }
    }
}

/// Field maps `R` and `R^-1` as coupling series.
#[derive(Clone, Debug, PartialEq)]
pub struct MollerSeries {
    pub forward: KernelSeries,
    pub inverse: KernelSeries,
}

impl MollerSeries {
    pub fn identity(n: usize) -> Self {
        Self { forward: KernelSeries::identity(n), inverse: KernelSeries::identity(n) }
    }

    /// `F o R`.
    pub fn pullback(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        f.substitute(&LinearSubstitution::from_kernel(&self.forward))
    }

    /// `F o R^-1`.
    pub fn pullback_inverse(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        f.substitute(&LinearSubstitution::from_kernel(&self.inverse))
    }

    /// `R phi` for numerical values.
    pub fn apply(&self, phi: &[C64]) -> Vec<LambdaPoly> {
        LinearSubstitution::from_kernel(&self.forward).apply(phi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{star_product, MonomialKernel};
    use crate::lattice::build_lattice;
    use crate::propagators::{advanced, causal, hermitian_min_eigenvalue, max_abs};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice() -> LatticeSpec {
        build_lattice(8, 0.1, 1, 8, 0.2).unwrap()
    }

    fn two_slice_mass(l: &LatticeSpec, rng: &mut ChaCha8Rng, scale: f64) -> DensityFunction {
        DensityFunction::on_lattice(l, |t, _| if t == 2 || t == 3 { rng.gen_range(-scale..scale) } else { 0.0 })
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let l = lattice();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let r = classical_moller_exact(&op, &QuadraticPerturbation::mass_only(DensityFunction::zeros(l.sites()))).unwrap();
        assert_eq!(r.forward, DMatrix::identity(l.sites(), l.sites()));
    }

    #[test]
    fn forward_and_inverse_compose_to_identity() {
        let l = lattice();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QuadraticPerturbation::mass_only(two_slice_mass(&l, &mut rng, 3.0));
        let r = classical_moller_exact(&op, &q).unwrap();
        assert!(r.inverse_residual() < 1e-12);
        // dense solve oracle for the forward map
        let solved = r.inverse.clone().lu().solve(&DMatrix::identity(l.sites(), l.sites())).unwrap();
        assert!((solved - &r.forward).amax() < 1e-12);
        assert!(r.intertwining_residual() < 1e-12);
    }

    #[test]
    fn source_only_is_affine_shift() {
        let l = lattice();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let j = DensityFunction::on_lattice(&l, |t, s| if t == 1 && s < 3 { 1.0 } else { 0.0 });
        let q = QuadraticPerturbation { mass: DensityFunction::zeros(l.sites()), source: Some(j) };
        let r = classical_moller_exact(&op, &q).unwrap();
        assert_eq!(r.forward, DMatrix::identity(l.sites(), l.sites()));
        assert!(r.shift.amax() > 0.0);
        let phi = Field::zeros(l);
        assert_eq!(r.apply(&phi).values[0], C64::new(0.0, 0.0));
    }

    #[test]
    fn identity_outside_causal_future() {
        let l = lattice();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let mass = DensityFunction::on_lattice(&l, |t, s| if t == 3 && s == 4 { 2.0 } else { 0.0 });
        let support = mass.support();
        let r = classical_moller_exact(&op, &QuadraticPerturbation::mass_only(mass)).unwrap();
        let future = causal_future(&l, &support);
        let mut inside = 0;
        for i in 0..l.sites() {
            let row_diff: f64 = (0..l.sites()).map(|j| (r.forward[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs()).fold(0.0, f64::max);
            if future[i] {
                inside += 1;
                assert!(row_diff > 0.0, "row {i} should feel the perturbation");
            } else {
                assert_eq!(row_diff, 0.0);
            }
        }
        assert!(inside > 0);
    }

    #[test]
    fn transported_kernels_match_direct() {
        let l = lattice();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = QuadraticPerturbation::mass_only(two_slice_mass(&l, &mut rng, 2.0));
        let r = classical_moller_exact(&op, &q).unwrap();
        let (plus1, _) = vacuum_two_point(&op).unwrap();
        let t = pushforward_propagators(&r, &plus1.matrix);
        assert!(max_abs(&(&t.retarded - retarded(&r.op2).matrix)) < 1e-10);
        assert!(max_abs(&(&t.advanced - advanced(&r.op2).matrix)) < 1e-10);
        assert!(max_abs(&(&t.causal - causal(&r.op2).matrix)) < 1e-10);
        assert!(hermitian_min_eigenvalue(&t.plus) > -1e-12);
        let anti = (&t.plus - t.plus.transpose()) * C64::new(0.0, -1.0);
        assert!(max_abs(&(anti - causal(&r.op2).matrix)) < 1e-10);
    }

    #[test]
    fn neumann_series_converges_within_bound() {
        let l = lattice();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scale in [1.0, -1.0] {
            let mass = DensityFunction::on_lattice(&l, |t, _| if (2..5).contains(&t) { scale * rng.gen_range(0.5..1.5) } else { 0.0 });
            let probe = Field::from_fn(l, |_, _| C64::new(rng.gen_range(-1.0..1.0), 0.0));
            let report = classical_moller_neumann(&op, &QuadraticPerturbation::mass_only(mass), 8, &probe).unwrap();
            for t in &report.terms {
                assert!(t.norm <= t.bound * (1.0 + 1e-12), "term {} norm {} bound {}", t.n, t.norm, t.bound);
            }
            assert!(report.terms[8].error < 1e-8);
            assert!(report.terms[1].error < report.terms[0].error);
        }
    }

    #[test]
    fn series_moller_matches_exact_at_unit_coupling() {
        let l = build_lattice(5, 0.1, 1, 4, 0.2).unwrap();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mass = DensityFunction::on_lattice(&l, |t, _| if t == 1 { rng.gen_range(0.0..1.0) } else { 0.0 });
        // one perturbed slice: r^2 vanishes, so the second-order series is exact
        let theory = Theory::lattice_vacuum(&op, 2).unwrap();
        let ms = theory.mass_moller(&mass.values).unwrap();
        let exact = classical_moller_exact(&op, &QuadraticPerturbation::mass_only(mass)).unwrap();
        assert!((ms.forward.evaluate(1.0).map(|z| z.re) - &exact.forward).amax() < 1e-12);
        assert!((ms.inverse.evaluate(1.0).map(|z| z.re) - &exact.inverse).amax() < 1e-12);
        let t2 = theory.transported(&ms);
        assert!(max_abs(&(t2.retarded.evaluate(1.0) - retarded(&exact.op2).matrix)) < 1e-12);
    }

    #[test]
    fn pullback_intertwines_star_products() {
        let l = build_lattice(4, 0.1, 1, 4, 0.2).unwrap();
        let op = KleinGordonOp::constant_mass(&l, 1.0).unwrap();
        let pts = PointSet::from_lattice(&l);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mass: Vec<f64> = (0..l.sites()).map(|i| if l.time_index(i) == 1 && i % 2 == 0 { rng.gen_range(0.5..1.0) } else { 0.0 }).collect();
        let o = Orders::new(2, 2);
        let t1 = Theory::lattice_vacuum(&op, 2).unwrap();
        let ms = t1.mass_moller(&mass).unwrap();
        let t2 = t1.transported(&ms);
        let vec_on = |rng: &mut ChaCha8Rng, lo: usize| -> Vec<C64> { (0..l.sites()).map(|i| if (lo..lo + 3).contains(&i) { C64::new(rng.gen_range(-1.0..1.0), 0.0) } else { C64::new(0.0, 0.0) }).collect() };
        let f = PolyFunctional::from_kernel(&pts, &MonomialKernel::Separable { vectors: vec![vec_on(&mut rng, 9), vec_on(&mut rng, 10)], weight: C64::new(1.0, 0.0) }, &FormalSeries::one(o)).unwrap();
        let g = PolyFunctional::from_kernel(&pts, &MonomialKernel::Separable { vectors: vec![vec_on(&mut rng, 12), vec_on(&mut rng, 13)], weight: C64::new(1.0, 0.0) }, &FormalSeries::one(o)).unwrap();
        let lhs = ms.pullback(&star_product(&f, &g, &t2.plus).unwrap()).unwrap();
        let rhs = star_product(&ms.pullback(&f).unwrap(), &ms.pullback(&g).unwrap(), &t1.plus).unwrap();
        assert!(lhs.distance(&rhs) < 1e-10);
        // linear functional: pullback is the functional of R^T f
        let fv = vec_on(&mut rng, 8);
        let lin = PolyFunctional::linear(&pts, &fv, o).unwrap();
        let pulled = ms.pullback(&lin).unwrap();
        let phi: Vec<C64> = (0..l.sites()).map(|_| C64::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
        let direct = lin.evaluate_series(&ms.apply(&phi)).unwrap();
        assert!(pulled.evaluate_values(&phi).unwrap().distance(&direct) < 1e-13);
        // inverse undoes the pullback on a quartic
        let h: Vec<f64> = (0..l.sites()).map(|i| if i == 9 || i == 13 { 1.0 } else { 0.0 }).collect();
        let quartic = PolyFunctional::local(&pts, &h, 4, o).unwrap();
        let back = ms.pullback_inverse(&ms.pullback(&quartic).unwrap()).unwrap();
        assert!(back.distance(&quartic) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn intertwining_holds_for_random_masses(seed in 0u64..500) {
            let l = lattice();
            let op = KleinGordonOp::constant_mass(&l, 0.5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = QuadraticPerturbation::mass_only(two_slice_mass(&l, &mut rng, 2.0));
            let r = classical_moller_exact(&op, &q).unwrap();
            prop_assert!(r.intertwining_residual() < 1e-12);
            prop_assert!(r.inverse_residual() < 1e-10);
        }
    }
}
