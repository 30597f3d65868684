//! S-matrices, the quantum Moller map and its inverse, the beta map comparing the
//! perturbative and the exact treatment of a quadratic interaction, and residuals of
//! the identities these maps satisfy.
//!
//! Every map is a truncated series in the Planck constant and the coupling. Each
//! identity is checked coefficient-wise against an independently computed side.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::functionals::{alpha, star_product, time_ordered_product, KernelSeries, PolyFunctional};
use crate::lattice::PointSet;
use crate::moller_classical::{MollerSeries, Theory};
use crate::series::{FormalSeries, Orders, C64};

fn ci(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// `Q = (lambda / 2) int M phi^2`.
pub fn quadratic_functional(points: &PointSet, mass: &[f64], orders: Orders) -> Result<PolyFunctional> {
    let half: Vec<f64> = mass.iter().map(|m| 0.5 * m).collect();
    Ok(PolyFunctional::local(points, &half, 2, orders)?.shift(0, &[ci(0.0, 0.0), ci(1.0, 0.0)]))
}

/// The S-matrix `exp_T(i V / hbar)` and its star inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct SMatrix {
    pub value: PolyFunctional,
    pub star_inverse: PolyFunctional,
}

impl SMatrix {
    pub fn new(v: &PolyFunctional, theory: &Theory) -> Result<Self> {
        let value = smatrix(v, theory)?;
        let star_inverse = smatrix_star_inverse(&value, theory)?;
        Ok(Self { value, star_inverse })
    }
}

fn check_perturbative(v: &PolyFunctional) -> Result<()> {
    match v.lowest_lambda() {
        Some(0) => Err(Error::NotPerturbative),
        _ => Ok(()),
    }
}

/// `sum_n (i / hbar)^n / n! V .T ... .T V`; terms beyond the coupling order vanish.
///
/// Powers are taken of `i V / hbar` so that every intermediate product stays inside the
/// exact truncation window.
pub fn smatrix(v: &PolyFunctional, theory: &Theory) -> Result<PolyFunctional> {
    check_perturbative(v)?;
    let feynman = theory.feynman();
    let orders = v.orders();
    let w = v.shift(-1, &[ci(0.0, 1.0)]);
    let mut total = PolyFunctional::one(v.points(), orders);
    let mut power = PolyFunctional::one(v.points(), orders);
    for n in 1..=orders.lambda {
        power = time_ordered_product(&power, &w, &feynman)?.scale(ci(1.0 / n as f64, 0.0));
        if power.is_empty() {
            break;
        }
        total = total.add(&power)?;
    }
    Ok(total)
}

/// Star inverse `sum_n (1 - S)^{star n}` of an S-matrix starting at `1`.
pub fn smatrix_star_inverse(s: &PolyFunctional, theory: &Theory) -> Result<PolyFunctional> {
    let orders = s.orders();
    let one = PolyFunctional::one(s.points(), orders);
    let x = one.sub(s)?;
    check_perturbative(&x)?;
    let mut total = one.clone();
    let mut power = one;
    for _ in 0..orders.lambda {
        power = star_product(&power, &x, &theory.plus)?;
        if power.is_empty() {
            break;
        }
        total = total.add(&power)?;
    }
    Ok(total)
}

/// Image of a functional under a quantum Moller map, with its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractingObservable {
    pub value: PolyFunctional,
    pub interaction: PolyFunctional,
    pub argument: PolyFunctional,
}

/// A theory with an interaction `V`; caches `S_V`, its star inverse and `S_{-V}`.
#[derive(Clone, Debug)]
pub struct Interaction {
    pub theory: Theory,
    pub v: PolyFunctional,
    pub s: SMatrix,
    pub s_neg: PolyFunctional,
    feynman: KernelSeries,
}

impl Interaction {
    pub fn new(theory: &Theory, v: &PolyFunctional) -> Result<Self> {
        if v.points() != theory.dim() {
            return Err(Error::Mismatch("interaction and theory sizes differ".into()));
        }
        let s = SMatrix::new(v, theory)?;
        let s_neg = smatrix(&v.neg(), theory)?;
        Ok(Self { theory: theory.clone(), v: v.clone(), s, s_neg, feynman: theory.feynman() })
    }

    /// `S^-1 star (S .T F)`.
    pub fn forward(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        let inner = time_ordered_product(&self.s.value, f, &self.feynman)?;
        star_product(&self.s.star_inverse, &inner, &self.theory.plus)
    }

    /// `S_{-V} .T (S_V star F)`.
    pub fn inverse(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        let inner = star_product(&self.s.value, f, &self.theory.plus)?;
        time_ordered_product(&self.s_neg, &inner, &self.feynman)
    }

    pub fn observable(&self, f: &PolyFunctional) -> Result<InteractingObservable> {
        Ok(InteractingObservable { value: self.forward(f)?, interaction: self.v.clone(), argument: f.clone() })
    }

    pub fn time_ordered(&self, f: &PolyFunctional, g: &PolyFunctional) -> Result<PolyFunctional> {
        time_ordered_product(f, g, &self.feynman)
    }
}

/// `r_V(F)` in the given theory.
pub fn quantum_moller(theory: &Theory, v: &PolyFunctional, f: &PolyFunctional) -> Result<InteractingObservable> {
    Interaction::new(theory, v)?.observable(f)
}

/// `r_V^-1(F)` in the given theory.
pub fn quantum_moller_inverse(theory: &Theory, v: &PolyFunctional, f: &PolyFunctional) -> Result<PolyFunctional> {
    Interaction::new(theory, v)?.inverse(f)
}

/// The beta map of a mass perturbation `Q = (lambda / 2) int M phi^2`, with the data of
/// both theories.
#[derive(Clone, Debug)]
pub struct BetaMap {
    pub theory1: Theory,
    pub theory2: Theory,
    pub mass: Vec<f64>,
    pub q: PolyFunctional,
    pub classical: MollerSeries,
    pub quantum: Interaction,
}

impl BetaMap {
    pub fn new(theory: &Theory, mass: &[f64], orders: Orders) -> Result<Self> {
        let classical = theory.mass_moller(mass)?;
        let theory2 = theory.transported(&classical);
        let q = quadratic_functional(&theory.points, mass, orders)?;
        let quantum = Interaction::new(theory, &q)?;
        Ok(Self { theory1: theory.clone(), theory2, mass: mass.to_vec(), q, classical, quantum })
    }

    pub fn orders(&self) -> Orders {
        self.q.orders()
    }

    /// `R^-1 o r_Q`.
    pub fn apply(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        self.classical.pullback_inverse(&self.quantum.forward(f)?)
    }

    /// `r_Q^-1 o R`.
    pub fn inverse(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        self.quantum.inverse(&self.classical.pullback(f)?)
    }

    /// `lambda diag(mu M)`, the operator `Q^(1)` with the measure absorbed.
    fn mass_operator(&self) -> KernelSeries {
        let n = self.theory1.dim();
        let diag = DMatrix::from_diagonal(&DVector::from_iterator(n, (0..n).map(|p| ci(self.mass[p] * self.theory1.points.weights[p], 0.0))));
        KernelSeries::from_layers(vec![DMatrix::zeros(n, n), diag]).truncate(self.theory1.max_lambda)
    }

    /// `d = sum_n i^n [sum_{p>=1} ((F - D-) Q)^p D+ (Q (F - D+))^(n-p) + F (Q (F - D+))^n]`,
    /// built from theory-1 kernels only.
    pub fn deformation_kernel(&self) -> KernelSeries {
        let l = self.theory1.max_lambda;
        let plus = &self.theory1.plus;
        let feyn = self.theory1.feynman();
        let q = self.mass_operator();
        let left = feyn.sub(&plus.transpose()).matmul(&q, l);
        let right = q.matmul(&feyn.sub(plus), l);
        let n = self.theory1.dim();
        let mut left_pow = vec![KernelSeries::identity(n)];
        let mut right_pow = vec![KernelSeries::identity(n)];
        for k in 1..=l {
            left_pow.push(left_pow[k - 1].matmul(&left, l));
            right_pow.push(right_pow[k - 1].matmul(&right, l));
        }
        let mut d = KernelSeries::zeros(n);
        let mut phase = ci(1.0, 0.0);
        for order in 1..=l {
            phase *= ci(0.0, 1.0);
            let mut term = feyn.matmul(&right_pow[order], l);
            for p in 1..=order {
                term = term.add(&left_pow[p].matmul(plus, l).matmul(&right_pow[order - p], l));
            }
            d = d.add(&term.scale(phase));
        }
        d.truncate(l)
    }

    /// `alpha_d(F)`.
    pub fn deformation(&self, f: &PolyFunctional) -> Result<PolyFunctional> {
        alpha(f, &self.deformation_kernel())
    }

    /// `Delta+_{1,Q} = Delta^F_1 - i Delta^A_2`.
    pub fn interacting_plus(&self) -> KernelSeries {
        self.theory1.feynman().sub(&self.theory2.advanced().scale(ci(0.0, 1.0)))
    }

    /// The star product of the interacting algebra as a contraction exponential.
    pub fn interacting_star(&self, f: &PolyFunctional, g: &PolyFunctional) -> Result<PolyFunctional> {
        star_product(f, g, &self.interacting_plus())
    }

    /// `r_Q^-1(r_Q(F) star_1 r_Q(G))`.
    pub fn conjugated_star(&self, f: &PolyFunctional, g: &PolyFunctional) -> Result<PolyFunctional> {
        let prod = star_product(&self.quantum.forward(f)?, &self.quantum.forward(g)?, &self.theory1.plus)?;
        self.quantum.inverse(&prod)
    }

    /// `F_f + F_{r'f} + F_{r'r'f} + ...` with `r' = -Q^(1) Delta^A`.
    pub fn yang_feldman(&self, f: &[C64], orders: Orders) -> Result<PolyFunctional> {
        let n = self.theory1.dim();
        if f.len() != n {
            return Err(Error::Mismatch("test function length".into()));
        }
        let l = self.theory1.max_lambda;
        let mass = KernelSeries::constant(DMatrix::from_diagonal(&DVector::from_iterator(n, self.mass.iter().map(|m| ci(*m, 0.0)))));
        let w = KernelSeries::constant(DMatrix::from_diagonal(&DVector::from_iterator(n, self.theory1.points.weights.iter().map(|x| ci(*x, 0.0)))));
        let step = mass.matmul(&self.theory1.advanced(), l).matmul(&w, l).scale(ci(-1.0, 0.0));
        let mut layers = vec![DMatrix::zeros(n, n)];
        layers.extend(step.layers.iter().cloned());
        let step = KernelSeries::from_layers(layers).truncate(l);
        let mut sum = KernelSeries::identity(n);
        let mut power = KernelSeries::identity(n);
        for _ in 0..l {
            power = power.matmul(&step, l);
            sum = sum.add(&power);
        }
        let mut out = PolyFunctional::zero(n, orders);
        for p in 0..n {
            let mut c = FormalSeries::zero(orders);
            for (k, layer) in sum.layers.iter().enumerate().take(orders.lambda as usize + 1) {
                let z: C64 = (0..n).map(|q| layer[(p, q)] * f[q]).sum();
                c.add_term(0, k as u32, z * self.theory1.points.weights[p]);
            }
            out.add_monomial(std::iter::once(p as u32).collect(), &c);
        }
        Ok(out)
    }

    /// Time-ordered product of theory 2.
    pub fn time_ordered_2(&self, f: &PolyFunctional, g: &PolyFunctional) -> Result<PolyFunctional> {
        time_ordered_product(f, g, &self.theory2.feynman())
    }
}

/// `|beta(F) - alpha_d(F)|` with `d` from the structural expansion.
pub fn deformation_check(beta: &BetaMap, f: &PolyFunctional) -> Result<f64> {
    Ok(beta.apply(f)?.distance(&beta.deformation(f)?))
}

/// `|Delta^F_1 - i Delta^A_2 - (Delta+_2 + Delta^F_1 - Delta^F_2)|`.
pub fn structure_identity_residual(beta: &BetaMap) -> f64 {
    let rhs = beta.theory2.plus.add(&beta.theory1.feynman()).sub(&beta.theory2.feynman());
    beta.interacting_plus().distance(&rhs)
}

/// `|F star_{1,Q} G - r^-1(r(F) star_1 r(G))|`.
pub fn interacting_star_residual(beta: &BetaMap, f: &PolyFunctional, g: &PolyFunctional) -> Result<f64> {
    Ok(beta.interacting_star(f, g)?.distance(&beta.conjugated_star(f, g)?))
}

/// `|beta_{1,Q3} - beta_{2,Q3-Q2} o beta_{1,Q2}|` applied to `F`.
pub fn cocycle_check(theory: &Theory, mass2: &[f64], mass3: &[f64], f: &PolyFunctional) -> Result<f64> {
    let o = f.orders();
    let b13 = BetaMap::new(theory, mass3, o)?;
    let b12 = BetaMap::new(theory, mass2, o)?;
    let delta: Vec<f64> = mass3.iter().zip(mass2).map(|(a, b)| a - b).collect();
    let b23 = BetaMap::new(&b12.theory2, &delta, o)?;
    Ok(b13.apply(f)?.distance(&b23.apply(&b12.apply(f)?)?))
}

/// `|r_{1,Q+V}(F) - R(r_{2,beta(V)}(beta(F)))|`, with local `V` so that `T_1(V) = V`.
pub fn gppa_check(beta: &BetaMap, v: &PolyFunctional, f: &PolyFunctional) -> Result<f64> {
    let lhs = Interaction::new(&beta.theory1, &beta.q.add(v)?)?.forward(f)?;
    let inner = Interaction::new(&beta.theory2, &beta.apply(v)?)?.forward(&beta.apply(f)?)?;
    Ok(lhs.distance(&beta.classical.pullback(&inner)?))
}

/// `|S_{F+G+V} - S_{F+V} star S_V^-1 star S_{V+G}|`, for `F` later than `G`.
pub fn causal_factorisation_residual(theory: &Theory, f: &PolyFunctional, g: &PolyFunctional, v: &PolyFunctional) -> Result<f64> {
    let lhs = smatrix(&f.add(g)?.add(v)?, theory)?;
    let sv = SMatrix::new(v, theory)?;
    let sfv = smatrix(&f.add(v)?, theory)?;
    let svg = smatrix(&v.add(g)?, theory)?;
    let rhs = star_product(&star_product(&sfv, &sv.star_inverse, &theory.plus)?, &svg, &theory.plus)?;
    Ok(lhs.distance(&rhs))
}

/// `|r(F .T G) - r(F) star r(G)|`, for `F` later than `G`.
pub fn time_ordered_intertwining_residual(interaction: &Interaction, f: &PolyFunctional, g: &PolyFunctional) -> Result<f64> {
    let lhs = interaction.forward(&interaction.time_ordered(f, g)?)?;
    let rhs = star_product(&interaction.forward(f)?, &interaction.forward(g)?, &interaction.theory.plus)?;
    Ok(lhs.distance(&rhs))
}

/// `|beta(beta^-1(F) .T1 beta^-1(G)) - F .T2 G|`.
pub fn beta_intertwining_residual(beta: &BetaMap, f: &PolyFunctional, g: &PolyFunctional) -> Result<f64> {
    let inner = beta.quantum.time_ordered(&beta.inverse(f)?, &beta.inverse(g)?)?;
    Ok(beta.apply(&inner)?.distance(&beta.time_ordered_2(f, g)?))
}

/// `|beta(F)' psi - beta(F' psi)|`.
pub fn phi_independence_residual(beta: &BetaMap, f: &PolyFunctional, psi: &[C64]) -> Result<f64> {
    Ok(beta.apply(f)?.directional(psi).distance(&beta.apply(&f.directional(psi))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::{commutator, MonomialKernel};
    use crate::lattice::{build_lattice, LatticeSpec};
    use crate::propagators::KleinGordonOp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice() -> LatticeSpec {
        build_lattice(4, 0.1, 1, 4, 0.2).unwrap()
    }

    fn theory(l: &LatticeSpec) -> Theory {
        Theory::lattice_vacuum(&KleinGordonOp::constant_mass(l, 1.0).unwrap(), 2).unwrap()
    }

    fn pts(l: &LatticeSpec) -> PointSet {
        PointSet::from_lattice(l)
    }

    /// Random real values on the listed points, zero elsewhere.
    fn vec_on(rng: &mut ChaCha8Rng, n: usize, sites: &[usize]) -> Vec<C64> {
        (0..n).map(|i| if sites.contains(&i) { ci(rng.gen_range(-1.0..1.0), 0.0) } else { ci(0.0, 0.0) }).collect()
    }

    fn density_on(rng: &mut ChaCha8Rng, n: usize, sites: &[usize], lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|i| if sites.contains(&i) { rng.gen_range(lo..hi) } else { 0.0 }).collect()
    }

    /// `lambda int h phi^k`.
    fn coupled_local(p: &PointSet, h: &[f64], k: u32, o: Orders) -> PolyFunctional {
        PolyFunctional::local(p, h, k, o).unwrap().shift(0, &[ci(0.0, 0.0), ci(1.0, 0.0)])
    }

    #[test]
    fn smatrix_basics() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        assert_eq!(smatrix(&PolyFunctional::zero(n, o), &t).unwrap(), PolyFunctional::one(n, o));
        let unperturbed = PolyFunctional::local(&p, &[1.0; 16], 2, o).unwrap();
        assert!(matches!(smatrix(&unperturbed, &t), Err(Error::NotPerturbative)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = coupled_local(&p, &density_on(&mut rng, n, &[5, 6], -1.0, 1.0), 4, o);
        let s = SMatrix::new(&v, &t).unwrap();
        let one = PolyFunctional::one(n, o);
        assert!(star_product(&s.star_inverse, &s.value, &t.plus).unwrap().distance(&one) < 1e-12);
        assert!(star_product(&s.value, &s.star_inverse, &t.plus).unwrap().distance(&one) < 1e-12);
        // S_{F+G} = S_F .T S_G
        let g = coupled_local(&p, &density_on(&mut rng, n, &[9], -1.0, 1.0), 2, o);
        let lhs = smatrix(&v.add(&g).unwrap(), &t).unwrap();
        let rhs = time_ordered_product(&s.value, &smatrix(&g, &t).unwrap(), &t.feynman()).unwrap();
        assert!(lhs.distance(&rhs) < 1e-12);
    }

    #[test]
    fn causal_factorisation_on_separated_slices() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = coupled_local(&p, &density_on(&mut rng, n, &[13, 14], -1.0, 1.0), 3, o);
        let v = coupled_local(&p, &density_on(&mut rng, n, &[8, 9], -1.0, 1.0), 2, o);
        let g = coupled_local(&p, &density_on(&mut rng, n, &[1, 2], -1.0, 1.0), 3, o);
        assert!(causal_factorisation_residual(&t, &f, &g, &v).unwrap() < 1e-10);
        // the ordering matters: swapping F and G breaks the identity
        assert!(causal_factorisation_residual(&t, &g, &f, &v).unwrap() > 1e-6);
    }

    #[test]
    fn forward_and_inverse_are_mutually_inverse() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = coupled_local(&p, &density_on(&mut rng, n, &[5, 6], -1.0, 1.0), 4, o);
        let it = Interaction::new(&t, &v).unwrap();
        let f = PolyFunctional::local(&p, &density_on(&mut rng, n, &[10, 13], -1.0, 1.0), 2, o).unwrap();
        let r = it.forward(&f).unwrap();
        assert!(it.inverse(&r).unwrap().distance(&f) < 1e-11);
        assert!(it.forward(&it.inverse(&f).unwrap()).unwrap().distance(&f) < 1e-11);
        // lowest coupling order is the identity
        assert!(r.lambda_layer(0).distance(&f) < 1e-14);
        // mismatched orders are rejected
        let other = PolyFunctional::one(n, Orders::new(1, 2));
        assert!(matches!(it.forward(&other), Err(Error::OrderMismatch(_))));
    }

    #[test]
    fn linear_fields_follow_yang_feldman() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mass = density_on(&mut rng, n, &[4, 5, 9], 0.5, 1.5);
        let b = BetaMap::new(&t, &mass, o).unwrap();
        let fv = vec_on(&mut rng, n, &[12, 13, 14]);
        let lin = PolyFunctional::linear(&p, &fv, o).unwrap();
        let quantum = b.quantum.forward(&lin).unwrap();
        let yf = b.yang_feldman(&fv, o).unwrap();
        assert!(quantum.distance(&yf) < 1e-12);
        assert!(quantum.distance(&b.classical.pullback(&lin).unwrap()) < 1e-12);
        assert!(b.apply(&lin).unwrap().distance(&lin) < 1e-12);
        assert!(deformation_check(&b, &lin).unwrap() < 1e-12);
    }

    #[test]
    fn classical_layer_is_the_classical_pullback() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 1);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mass = density_on(&mut rng, n, &[5, 6], 0.5, 1.5);
        let b = BetaMap::new(&Theory { max_lambda: 1, ..t.clone() }, &mass, o).unwrap();
        let quartic = PolyFunctional::local(&p, &density_on(&mut rng, n, &[9, 14], -1.0, 1.0), 4, o).unwrap();
        let r = b.quantum.forward(&quartic).unwrap();
        assert!(r.classical().distance(&b.classical.pullback(&quartic).unwrap()) < 1e-12);
        // beta is the identity at zeroth order in the Planck constant
        assert!(b.apply(&quartic).unwrap().classical().distance(&quartic) < 1e-12);
    }

    #[test]
    fn moller_map_intertwines_time_ordering() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = coupled_local(&p, &density_on(&mut rng, n, &[5, 6], -1.0, 1.0), 4, o);
        let it = Interaction::new(&t, &v).unwrap();
        let f = PolyFunctional::local(&p, &density_on(&mut rng, n, &[13], -1.0, 1.0), 2, o).unwrap();
        let g = PolyFunctional::linear(&p, &vec_on(&mut rng, n, &[8, 9]), o).unwrap();
        assert!(time_ordered_intertwining_residual(&it, &f, &g).unwrap() < 1e-10);
    }

    #[test]
    fn beta_is_the_deformation_by_the_feynman_difference() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mass = density_on(&mut rng, n, &[4, 5, 6], 0.5, 1.5);
        let b = BetaMap::new(&t, &mass, o).unwrap();
        // structural kernel against the transported-kernel oracle
        let oracle = b.theory2.feynman().sub(&t.feynman());
        let d = b.deformation_kernel();
        assert!(d.distance(&oracle) < 1e-12);
        assert_eq!(crate::propagators::max_abs(&d.layer(0)), 0.0);
        // local quadratic: beta shifts by hbar sum h d(x,x) mu
        let h = density_on(&mut rng, n, &[9, 10, 13], -1.0, 1.0);
        let quad = PolyFunctional::local(&p, &h, 2, o).unwrap();
        let shifted = b.apply(&quad).unwrap().sub(&quad).unwrap();
        let mut expected = FormalSeries::zero(o);
        for x in 0..n {
            for k in 1..=2usize {
                expected.add_term(1, k as u32, oracle.layer(k)[(x, x)] * h[x] * p.weights[x]);
            }
        }
        assert!(shifted.distance(&PolyFunctional::constant(n, expected)) < 1e-12);
        // separable quadratic and local quartic
        let sep = PolyFunctional::from_kernel(&p, &MonomialKernel::Separable { vectors: vec![vec_on(&mut rng, n, &[8, 12]), vec_on(&mut rng, n, &[10, 14])], weight: ci(1.0, 0.0) }, &FormalSeries::one(o)).unwrap();
        assert!(deformation_check(&b, &sep).unwrap() < 1e-10);
        let quartic = PolyFunctional::local(&p, &density_on(&mut rng, n, &[9, 13], -1.0, 1.0), 4, o).unwrap();
        assert!(deformation_check(&b, &quartic).unwrap() < 1e-9);
        // beta and its inverse
        assert!(b.inverse(&b.apply(&quartic).unwrap()).unwrap().distance(&quartic) < 1e-11);
        let back = alpha(&b.apply(&quartic).unwrap(), &d.scale(ci(-1.0, 0.0))).unwrap();
        assert!(back.distance(&quartic) < 1e-11);
    }

    #[test]
    fn interacting_star_product() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mass = density_on(&mut rng, n, &[4, 5, 6, 7], 0.5, 1.5);
        let b = BetaMap::new(&t, &mass, o).unwrap();
        assert!(structure_identity_residual(&b) < 1e-12);
        let fv = vec_on(&mut rng, n, &[1, 9, 14]);
        let gv = vec_on(&mut rng, n, &[2, 11, 12]);
        let ff = PolyFunctional::linear(&p, &fv, o).unwrap();
        let fg = PolyFunctional::linear(&p, &gv, o).unwrap();
        let comm = commutator(&ff, &fg, &b.interacting_plus()).unwrap();
        let causal2 = b.theory2.causal();
        let mut expected = FormalSeries::zero(o);
        for k in 0..=2usize {
            let c = causal2.layer(k);
            let z: C64 = (0..n).flat_map(|x| (0..n).map(move |y| (x, y))).map(|(x, y)| fv[x] * c[(x, y)] * gv[y] * p.weights[x] * p.weights[y]).sum();
            expected.add_term(1, k as u32, ci(0.0, 1.0) * z);
        }
        assert!(comm.distance(&PolyFunctional::constant(n, expected)) < 1e-12);
        let f = PolyFunctional::from_kernel(&p, &MonomialKernel::Separable { vectors: vec![vec_on(&mut rng, n, &[1, 13]), vec_on(&mut rng, n, &[2, 14])], weight: ci(1.0, 0.0) }, &FormalSeries::one(o)).unwrap();
        let g = PolyFunctional::from_kernel(&p, &MonomialKernel::Separable { vectors: vec![vec_on(&mut rng, n, &[0, 12]), vec_on(&mut rng, n, &[3, 15])], weight: ci(1.0, 0.0) }, &FormalSeries::one(o)).unwrap();
        assert!(interacting_star_residual(&b, &f, &g).unwrap() < 1e-10);
    }

    #[test]
    fn beta_intertwines_time_ordered_products_and_derivatives() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mass = density_on(&mut rng, n, &[4, 5, 6], 0.5, 1.5);
        let b = BetaMap::new(&t, &mass, o).unwrap();
        let f = PolyFunctional::from_kernel(&p, &MonomialKernel::Separable { vectors: vec![vec_on(&mut rng, n, &[1, 13]), vec_on(&mut rng, n, &[2, 14])], weight: ci(1.0, 0.0) }, &FormalSeries::one(o)).unwrap();
        let g = PolyFunctional::linear(&p, &vec_on(&mut rng, n, &[0, 10, 15]), o).unwrap();
        assert!(beta_intertwining_residual(&b, &f, &g).unwrap() < 1e-10);
        // multilinear agreement: T_2 of linear fields is beta of T_1
        let h = PolyFunctional::linear(&p, &vec_on(&mut rng, n, &[3, 9]), o).unwrap();
        let t1 = b.quantum.time_ordered(&g, &h).unwrap();
        assert!(b.apply(&t1).unwrap().distance(&b.time_ordered_2(&g, &h).unwrap()) < 1e-10);
        let quartic = PolyFunctional::local(&p, &density_on(&mut rng, n, &[9, 13], -1.0, 1.0), 4, o).unwrap();
        let psi = vec_on(&mut rng, n, &[9, 10, 13]);
        assert!(phi_independence_residual(&b, &quartic, &psi).unwrap() < 1e-10);
    }

    #[test]
    fn cocycle_law() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m2 = density_on(&mut rng, n, &[4, 5], 0.5, 1.5);
        let m3 = density_on(&mut rng, n, &[8, 9], 0.5, 1.5);
        let quartic = PolyFunctional::local(&p, &density_on(&mut rng, n, &[13, 14], -1.0, 1.0), 4, o).unwrap();
        assert!(cocycle_check(&t, &m2, &m2, &quartic).unwrap() < 1e-12);
        assert!(cocycle_check(&t, &m2, &m3, &quartic).unwrap() < 1e-9);
        // no mass in the intermediate theory: reduces to beta_{1,Q3}
        let zero = vec![0.0; n];
        assert!(cocycle_check(&t, &zero, &m3, &quartic).unwrap() < 1e-12);
    }

    #[test]
    fn generalised_agreement() {
        let l = lattice();
        let t = theory(&l);
        let p = pts(&l);
        let o = Orders::new(2, 2);
        let n = p.len();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mass = density_on(&mut rng, n, &[4, 5], 0.5, 1.5);
        let v = coupled_local(&p, &density_on(&mut rng, n, &[9, 10], -1.0, 1.0), 4, o);
        let f = PolyFunctional::linear(&p, &vec_on(&mut rng, n, &[13, 14]), o).unwrap();
        let b = BetaMap::new(&t, &mass, o).unwrap();
        assert!(gppa_check(&b, &v, &f).unwrap() < 1e-9);
        assert!(gppa_check(&b, &PolyFunctional::zero(n, o), &f).unwrap() < 1e-13);
        let b0 = BetaMap::new(&t, &vec![0.0; n], o).unwrap();
        assert_eq!(gppa_check(&b0, &v, &f).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn deformation_holds_for_random_masses(seed in 0u64..1000) {
            let l = lattice();
            let t = theory(&l);
            let p = pts(&l);
            let o = Orders::new(2, 2);
            let n = p.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mass = density_on(&mut rng, n, &[4, 5, 6, 7], -1.5, 1.5);
            let b = BetaMap::new(&t, &mass, o).unwrap();
            let quad = PolyFunctional::local(&p, &density_on(&mut rng, n, &[8, 12, 13], -1.0, 1.0), 2, o).unwrap();
            prop_assert!(deformation_check(&b, &quad).unwrap() < 1e-10);
            prop_assert!(structure_identity_residual(&b) < 1e-12);
        }
    }
}
