//! Polynomial functionals of the field and their contraction-exponential products.
//!
//! A functional is a finite sum of monomials `c * phi_{p1} ... phi_{pn}` over the points of
//! a point set, with [`FormalSeries`] coefficients. Functional derivatives are taken with
//! respect to the measure, `delta / delta phi(p) = (1 / w_p) d / d phi_p`, so a kernel
//! contraction `<K, F'' >` over the measure reduces to `sum_{p,q} K(p, q) d_p d_q F` and
//! every product below is an exact finite sum.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::lattice::{Field, PointSet};
use crate::series::{poly_mul, FormalSeries, LambdaPoly, Orders, C64};

/// Sorted list of point indices with repetition.
pub type Monomial = SmallVec<[u32; 8]>;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

fn is_zero_poly(p: &[C64]) -> bool {
    p.iter().all(|z| z.re == 0.0 && z.im == 0.0)
}

fn falling(n: u32, k: u32) -> f64 {
    (0..k).map(|i| (n - i) as f64).product()
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Two-point kernel whose entries are polynomials in the coupling; `layers[l]` is the
/// coefficient of `lambda^l`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSeries {
    pub layers: Vec<DMatrix<C64>>,
}

impl KernelSeries {
    pub fn constant(m: DMatrix<C64>) -> Self {
        Self { layers: vec![m] }
    }

    pub fn zeros(n: usize) -> Self {
        Self::constant(DMatrix::zeros(n, n))
    }

    pub fn from_layers(layers: Vec<DMatrix<C64>>) -> Self {
        assert!(!layers.is_empty(), "kernel series needs at least one layer");
        Self { layers }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].nrows()
    }

    /// Coefficient of `lambda^l`, zero beyond the stored layers.
    pub fn layer(&self, l: usize) -> DMatrix<C64> {
        self.layers.get(l).cloned().unwrap_or_else(|| DMatrix::zeros(self.dim(), self.dim()))
    }

    /// Entry `(p, q)` as a coupling polynomial with trailing zeros removed.
    pub fn entry(&self, p: usize, q: usize) -> LambdaPoly {
        let mut out: LambdaPoly = self.layers.iter().map(|m| m[(p, q)]).collect();
        while out.last().is_some_and(|z| z.re == 0.0 && z.im == 0.0) {
            out.pop();
        }
        out
    }

    fn zip(&self, other: &Self, f: impl Fn(&DMatrix<C64>, &DMatrix<C64>) -> DMatrix<C64>) -> Self {
        let n = self.layers.len().max(other.layers.len());
        Self { layers: (0..n).map(|l| f(&self.layer(l), &other.layer(l))).collect() }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, z: C64) -> Self {
        Self { layers: self.layers.iter().map(|m| m * z).collect() }
    }

    pub fn transpose(&self) -> Self {
        Self { layers: self.layers.iter().map(|m| m.transpose()).collect() }
    }

    /// Entrywise complex conjugate.
    pub fn conj(&self) -> Self {
        Self { layers: self.layers.iter().map(|m| m.map(|z| z.conj())).collect() }
    }

    pub fn symmetric_part(&self) -> Self {
        self.add(&self.transpose()).scale(C64::new(0.5, 0.0))
    }

    /// Keeps coupling powers up to `l`.
    pub fn truncate(&self, l: usize) -> Self {
        Self { layers: self.layers.iter().take(l + 1).cloned().collect() }
    }

    /// Composition `(A o B)(p, q) = sum_r A(p, r) w_r B(r, q)`, truncated at `max_lambda`.
    pub fn compose(&self, other: &Self, weights: &[f64], max_lambda: usize) -> Self {
        let n = self.dim();
        let w = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, weights.iter().map(|x| C64::new(*x, 0.0))));
        let len = (self.layers.len() + other.layers.len() - 1).min(max_lambda + 1);
        let mut layers = vec![DMatrix::zeros(n, n); len];
        for (i, a) in self.layers.iter().enumerate() {
            let aw = a * &w;
            for (j, b) in other.layers.iter().enumerate() {
                if i + j < len {
                    layers[i + j] += &aw * b;
                }
            }
        }
        Self { layers }
    }

    /// Plain matrix product `A B` without measure weights, truncated at `max_lambda`.
    pub fn matmul(&self, other: &Self, max_lambda: usize) -> Self {
        self.compose(other, &vec![1.0; self.dim()], max_lambda)
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    /// Largest entry modulus over every layer.
    pub fn max_abs(&self) -> f64 {
        self.layers.iter().flat_map(|m| m.iter()).map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest layer-wise entry distance.
    pub fn distance(&self, other: &Self) -> f64 {
        self.sub(other).max_abs()
    }

    /// The layers multiplied out at a numerical coupling.
    pub fn evaluate(&self, lambda: f64) -> DMatrix<C64> {
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (l, m) in self.layers.iter().enumerate() {
            out += m * C64::new(lambda.powi(l as i32), 0.0);
        }
        out
    }
}

/// Constructor descriptors for monomial kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MonomialKernel {
    /// `int h phi^power dmu`.
    Local { density: Vec<f64>, power: u32 },
    /// `weight * <v_1, phi> ... <v_n, phi>`.
    Separable { vectors: Vec<Vec<C64>>, weight: C64 },
}

/// Polynomial functional with formal-series coefficients over `points` field values.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyFunctional {
    points: usize,
    orders: Orders,
    terms: BTreeMap<Monomial, FormalSeries>,
}

impl PolyFunctional {
    pub fn zero(points: usize, orders: Orders) -> Self {
        Self { points, orders, terms: BTreeMap::new() }
    }

    pub fn constant(points: usize, c: FormalSeries) -> Self {
        let mut f = Self::zero(points, c.orders());
        f.add_monomial(Monomial::new(), &c);
        f
    }

    pub fn one(points: usize, orders: Orders) -> Self {
        Self::constant(points, FormalSeries::one(orders))
    }

    /// Expands a kernel descriptor with coefficient `coeff`.
    pub fn from_kernel(points: &PointSet, kernel: &MonomialKernel, coeff: &FormalSeries) -> Result<Self> {
        let n = points.len();
        let mut f = Self::zero(n, coeff.orders());
        match kernel {
            MonomialKernel::Local { density, power } => {
                if density.len() != n {
                    return Err(Error::Mismatch(format!("density has {} values for {n} points", density.len())));
                }
                for (p, h) in density.iter().enumerate() {
                    if *h != 0.0 {
                        let m: Monomial = std::iter::repeat(p as u32).take(*power as usize).collect();
                        f.add_monomial(m, &coeff.scale(C64::new(h * points.weights[p], 0.0)));
                    }
                }
            }
            MonomialKernel::Separable { vectors, weight } => {
                let mut acc: BTreeMap<Monomial, C64> = BTreeMap::from([(Monomial::new(), *weight)]);
                for v in vectors {
                    if v.len() != n {
                        return Err(Error::Mismatch(format!("vector has {} values for {n} points", v.len())));
                    }
                    let mut next = BTreeMap::new();
                    for (m, z) in &acc {
                        for (p, vp) in v.iter().enumerate() {
                            if vp.re == 0.0 && vp.im == 0.0 {
                                continue;
                            }
                            let mut key = m.clone();
                            let pos = key.partition_point(|x| *x <= p as u32);
                            key.insert(pos, p as u32);
                            *next.entry(key).or_insert(zero()) += z * vp * points.weights[p];
                        }
                    }
                    acc = next;
                }
                for (m, z) in acc {
                    f.add_monomial(m, &coeff.scale(z));
                }
            }
        }
        Ok(f)
    }

    /// `int h phi^power dmu` with unit coefficient.
    pub fn local(points: &PointSet, density: &[f64], power: u32, orders: Orders) -> Result<Self> {
        Self::from_kernel(points, &MonomialKernel::Local { density: density.to_vec(), power }, &FormalSeries::one(orders))
    }

    /// Linear field `F_f(phi) = <f, phi>`.
    pub fn linear(points: &PointSet, f: &[C64], orders: Orders) -> Result<Self> {
        Self::from_kernel(points, &MonomialKernel::Separable { vectors: vec![f.to_vec()], weight: C64::new(1.0, 0.0) }, &FormalSeries::one(orders))
    }

    /// The raw monomial `phi_{p1} ... phi_{pn}` with coefficient `coeff`.
    pub fn monomial(points: usize, mut indices: Vec<u32>, coeff: FormalSeries) -> Self {
        indices.sort_unstable();
        let mut f = Self::zero(points, coeff.orders());
        f.add_monomial(indices.into_iter().collect(), &coeff);
        f
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn orders(&self) -> Orders {
        self.orders
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &FormalSeries)> {
        self.terms.iter()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, m: &[u32]) -> FormalSeries {
        let key: Monomial = m.iter().cloned().collect();
        self.terms.get(&key).cloned().unwrap_or_else(|| FormalSeries::zero(self.orders))
    }

    pub fn add_monomial(&mut self, m: Monomial, c: &FormalSeries) {
        if c.is_zero() {
            return;
        }
        match self.terms.get_mut(&m) {
            Some(x) => {
                x.add_assign(c);
                if x.is_zero() {
                    self.terms.remove(&m);
                }
            }
            None => {
                self.terms.insert(m, c.clone());
            }
        }
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.points != other.points {
            return Err(Error::Mismatch(format!("functionals over {} and {} points", self.points, other.points)));
        }
        if self.orders != other.orders {
            return Err(Error::OrderMismatch(format!("{:?} vs {:?}", self.orders, other.orders)));
        }
        Ok(())
    }

    /// Highest polynomial degree.
    pub fn degree(&self) -> usize {
        self.terms.keys().map(|m| m.len()).max().unwrap_or(0)
    }

    /// Points appearing in some monomial.
    pub fn support(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.terms.keys().flat_map(|m| m.iter().cloned()).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_monomial(m.clone(), c);
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        self.scale(C64::new(-1.0, 0.0))
    }

    pub fn scale(&self, z: C64) -> Self {
        self.map_coefficients(|c| c.scale(z))
    }

    /// Multiplies every coefficient by a formal series.
    pub fn scale_series(&self, s: &FormalSeries) -> Self {
        self.map_coefficients(|c| c.mul(s))
    }

    /// Multiplies every coefficient by `hbar^shift poly(lambda)`.
    pub fn shift(&self, shift: i32, poly: &[C64]) -> Self {
        self.map_coefficients(|c| {
            let mut out = FormalSeries::zero(c.orders());
            out.add_shifted(c, shift, poly);
            out
        })
    }

    /// Relabels the points of every monomial into a set of `points` points.
    pub fn reindex(&self, points: usize, map: impl Fn(u32) -> Option<u32>) -> Result<Self> {
        let mut out = Self::zero(points, self.orders);
        for (m, c) in &self.terms {
            let mut key = Monomial::new();
            for p in m {
                let q = map(*p).filter(|q| (*q as usize) < points).ok_or_else(|| Error::InvalidArgument(format!("point {p} has no image")))?;
                key.push(q);
            }
            key.sort_unstable();
            out.add_monomial(key, c);
        }
        Ok(out)
    }

    pub fn map_coefficients(&self, f: impl Fn(&FormalSeries) -> FormalSeries) -> Self {
        let mut out = Self::zero(self.points, self.orders);
        for (m, c) in &self.terms {
            out.add_monomial(m.clone(), &f(c));
        }
        out
    }

    /// The involution: complex conjugation of every coefficient.
    pub fn conj(&self) -> Self {
        self.map_coefficients(|c| c.conj())
    }

    pub fn physical(&self) -> Self {
        self.map_coefficients(|c| c.physical())
    }

    pub fn lambda_layer(&self, l: u32) -> Self {
        self.map_coefficients(|c| c.lambda_layer(l))
    }

    pub fn truncate_lambda(&self, l: u32) -> Self {
        self.map_coefficients(|c| c.truncate_lambda(l))
    }

    /// The `hbar^0` layer.
    pub fn classical(&self) -> Self {
        let o = self.orders;
        self.map_coefficients(|c| {
            let mut out = FormalSeries::zero(o);
            for (a, l, z) in c.terms() {
                if a == 0 {
                    out.add_term(a, l, z);
                }
            }
            out
        })
    }

    /// Largest coefficient-wise distance over all monomials and series layers.
    pub fn distance(&self, other: &Self) -> f64 {
        let zero = FormalSeries::zero(self.orders);
        let mut worst: f64 = 0.0;
        for (m, c) in &self.terms {
            worst = worst.max(c.distance(other.terms.get(m).unwrap_or(&zero)));
        }
        for (m, c) in &other.terms {
            if !self.terms.contains_key(m) {
                worst = worst.max(c.max_abs());
            }
        }
        worst
    }

    /// Largest coefficient modulus.
    pub fn max_abs(&self) -> f64 {
        self.terms.values().map(|c| c.max_abs()).fold(0.0, f64::max)
    }

    /// Lowest coupling power present.
    pub fn lowest_lambda(&self) -> Option<u32> {
        self.terms.values().filter_map(|c| c.lowest_lambda()).min()
    }

    /// Value at a configuration `phi` given by raw point values.
    pub fn evaluate_values(&self, phi: &[C64]) -> Result<FormalSeries> {
        if phi.len() != self.points {
            return Err(Error::Mismatch(format!("configuration has {} values for {} points", phi.len(), self.points)));
        }
        let mut out = FormalSeries::zero(self.orders);
        for (m, c) in &self.terms {
            let v: C64 = m.iter().map(|p| phi[*p as usize]).product();
            out.add_shifted(c, 0, &[v]);
        }
        Ok(out)
    }

    /// Value at a lattice field.
    pub fn evaluate(&self, phi: &Field) -> Result<FormalSeries> {
        self.evaluate_values(&phi.values)
    }

    /// Value at a configuration whose entries are coupling polynomials.
    pub fn evaluate_series(&self, phi: &[LambdaPoly]) -> Result<FormalSeries> {
        if phi.len() != self.points {
            return Err(Error::Mismatch("configuration length".into()));
        }
        let max_l = self.orders.lambda as usize;
        let mut out = FormalSeries::zero(self.orders);
        for (m, c) in &self.terms {
            let mut v: LambdaPoly = SmallVec::from_slice(&[C64::new(1.0, 0.0)]);
            for p in m {
                v = poly_mul(&v, &phi[*p as usize], max_l);
            }
            out.add_shifted(c, 0, &v);
        }
        Ok(out)
    }

    /// Directional derivative `<F', psi> = sum_p d_p F psi_p`.
    pub fn directional(&self, psi: &[C64]) -> Self {
        let mut out = Self::zero(self.points, self.orders);
        for (m, c) in &self.terms {
            for (i, p) in m.iter().enumerate() {
                if i > 0 && m[i - 1] == *p {
                    continue;
                }
                let mult = m.iter().filter(|x| *x == p).count() as f64;
                let z = psi[*p as usize] * mult;
                if z.re == 0.0 && z.im == 0.0 {
                    continue;
                }
                let mut rest = m.clone();
                rest.remove(i);
                out.add_monomial(rest, &c.scale(z));
            }
        }
        out
    }

    /// Partial derivative `d F / d phi_p`.
    pub fn partial(&self, p: u32) -> Self {
        let mut out = Self::zero(self.points, self.orders);
        for (m, c) in &self.terms {
            let mult = m.iter().filter(|x| **x == p).count();
            if mult > 0 {
                let mut rest = m.clone();
                let pos = rest.iter().position(|x| *x == p).expect("present");
                rest.remove(pos);
                out.add_monomial(rest, &c.scale(C64::new(mult as f64, 0.0)));
            }
        }
        out
    }

    /// Order-`m` derivative as a tensor over ordered point tuples.
    pub fn derivative(&self, order: usize) -> DerivativeTensor {
        let mut entries: BTreeMap<SmallVec<[u32; 4]>, PolyFunctional> = BTreeMap::from([(SmallVec::new(), self.clone())]);
        for _ in 0..order {
            let mut next = BTreeMap::new();
            for (tuple, f) in &entries {
                for p in f.support() {
                    let d = f.partial(p);
                    if !d.is_empty() {
                        let mut t = tuple.clone();
                        t.push(p);
                        next.insert(t, d);
                    }
                }
            }
            entries = next;
        }
        DerivativeTensor { order, points: self.points, orders: self.orders, entries }
    }

    /// Pointwise (classical) product.
    pub fn pointwise(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        Ok(exp_product(self, other, None))
    }

    /// Substitutes `phi_p -> sum_q map_p[q] phi_q` with coupling-polynomial coefficients.
    pub fn substitute(&self, map: &LinearSubstitution) -> Result<Self> {
        if map.rows.len() != self.points {
            return Err(Error::Mismatch("substitution size".into()));
        }
        let max_l = self.orders.lambda as usize;
        let terms: Vec<(&Monomial, &FormalSeries)> = self.terms.iter().collect();
        let pieces: Vec<BTreeMap<Monomial, FormalSeries>> = terms
            .par_iter()
            .map(|(m, c)| {
                let mut acc: BTreeMap<Monomial, LambdaPoly> = BTreeMap::from([(Monomial::new(), SmallVec::from_slice(&[C64::new(1.0, 0.0)]))]);
                for p in m.iter() {
                    let mut next: BTreeMap<Monomial, LambdaPoly> = BTreeMap::new();
                    let offset = map.offsets.get(*p as usize).filter(|o| !is_zero_poly(o));
                    for (key, poly) in &acc {
                        let row = map.rows[*p as usize].iter().map(|(q, c)| (Some(*q), c)).chain(offset.map(|o| (None, o)));
                        for (q, coeff) in row {
                            let prod = poly_mul(poly, coeff, max_l);
                            if is_zero_poly(&prod) {
                                continue;
                            }
                            let mut k = key.clone();
                            if let Some(q) = q {
                                let pos = k.partition_point(|x| *x <= q);
                                k.insert(pos, q);
                            }
                            let slot = next.entry(k).or_default();
                            if slot.len() < prod.len() {
                                slot.resize(prod.len(), zero());
                            }
                            for (s, z) in slot.iter_mut().zip(prod.iter()) {
                                *s += z;
                            }
                        }
                    }
                    acc = next;
                }
                let mut out = BTreeMap::new();
                for (key, poly) in acc {
                    let mut s = FormalSeries::zero(c.orders());
                    s.add_shifted(c, 0, &poly);
                    out.insert(key, s);
                }
                out
            })
            .collect();
        let mut out = Self::zero(self.points, self.orders);
        for piece in pieces {
            for (m, c) in piece {
                out.add_monomial(m, &c);
            }
        }
        Ok(out)
    }

    /// Serializes monomials and coefficients.
    pub fn to_json(&self) -> Result<String> {
        let repr = FunctionalRepr { points: self.points, orders: self.orders, terms: self.terms.iter().map(|(m, c)| (m.to_vec(), c.clone())).collect() };
        Ok(serde_json::to_string(&repr)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: FunctionalRepr = serde_json::from_str(text)?;
        let mut f = Self::zero(repr.points, repr.orders);
        for (mut m, c) in repr.terms {
            if m.iter().any(|p| *p as usize >= repr.points) {
                return Err(Error::InvalidArgument("monomial index out of range".into()));
            }
            m.sort_unstable();
            f.add_monomial(m.into_iter().collect(), &c);
        }
        Ok(f)
    }
}

#[derive(Serialize, Deserialize)]
struct FunctionalRepr {
    points: usize,
    orders: Orders,
    terms: Vec<(Vec<u32>, FormalSeries)>,
}

/// Affine field substitution `phi_p -> sum_q A_pq(lambda) phi_q + b_p(lambda)`, stored by
/// sparse rows; `offsets` may be empty for a linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSubstitution {
    pub rows: Vec<Vec<(u32, LambdaPoly)>>,
    pub offsets: Vec<LambdaPoly>,
}

impl LinearSubstitution {
    /// Sparse rows of a kernel series, dropping entries below `1e-300`.
    pub fn from_kernel(k: &KernelSeries) -> Self {
        let n = k.dim();
        let rows = (0..n)
            .map(|p| {
                (0..n)
                    .filter_map(|q| {
                        let e = k.entry(p, q);
                        (!e.is_empty() && e.iter().any(|z| z.norm() > 1e-300)).then_some((q as u32, e))
                    })
                    .collect()
            })
            .collect();
        Self { rows, offsets: Vec::new() }
    }

    /// Adds a constant shift `b_p(lambda)` to every row.
    pub fn with_offsets(mut self, offsets: Vec<LambdaPoly>) -> Self {
        self.offsets = offsets;
        self
    }

    /// Applies the substitution to numerical point values.
    pub fn apply(&self, phi: &[C64]) -> Vec<LambdaPoly> {
        self.rows
            .iter()
            .enumerate()
            .map(|(p, row)| {
                let len = row.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
                let offset = self.offsets.get(p).cloned().unwrap_or_default();
                let mut out: LambdaPoly = SmallVec::from_elem(zero(), len.max(offset.len()));
                for (o, z) in out.iter_mut().zip(offset.iter()) {
                    *o += z;
                }
                for (q, poly) in row {
                    for (o, z) in out.iter_mut().zip(poly.iter()) {
                        *o += z * phi[*q as usize];
                    }
                }
                out
            })
            .collect()
    }
}

/// Derivative of a functional as a map from ordered point tuples to functionals.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeTensor {
    pub order: usize,
    points: usize,
    orders: Orders,
    pub entries: BTreeMap<SmallVec<[u32; 4]>, PolyFunctional>,
}

impl DerivativeTensor {
    /// `int F^(m)(x_1..x_m) psi_1(x_1)..psi_m(x_m) dmu^m`.
    pub fn contract_fields(&self, fields: &[&[C64]]) -> Result<PolyFunctional> {
        if fields.len() != self.order {
            return Err(Error::Mismatch(format!("{} fields for a derivative of order {}", fields.len(), self.order)));
        }
        let mut out = PolyFunctional::zero(self.points, self.orders);
        for (tuple, f) in &self.entries {
            let z: C64 = tuple.iter().zip(fields.iter()).map(|(p, psi)| psi[*p as usize]).product();
            out = out.add(&f.scale(z))?;
        }
        Ok(out)
    }

    /// `int int K(x, y) F''(x, y) dmu dmu` for a second derivative.
    pub fn contract_kernel(&self, kernel: &DMatrix<C64>) -> Result<PolyFunctional> {
        if self.order != 2 {
            return Err(Error::Mismatch("kernel contraction needs a second derivative".into()));
        }
        let mut out = PolyFunctional::zero(self.points, self.orders);
        for (tuple, f) in &self.entries {
            out = out.add(&f.scale(kernel[(tuple[0] as usize, tuple[1] as usize)]))?;
        }
        Ok(out)
    }
}

/// Distinct points of a monomial with multiplicities.
fn factors(m: &[u32]) -> SmallVec<[(u32, u32); 8]> {
    let mut out: SmallVec<[(u32, u32); 8]> = SmallVec::new();
    for p in m {
        match out.last_mut() {
            Some((q, k)) if q == p => *k += 1,
            _ => out.push((*p, 1)),
        }
    }
    out
}

/// Contraction channel between factor slots `i` and `j`; `i == j` is a self-contraction
/// that consumes two units of the slot's multiplicity.
struct PairKernel<'a> {
    i: usize,
    j: usize,
    /// Powers `K^k / k!` for `k = 0..`.
    powers: &'a [LambdaPoly],
}

fn powers_of(k: &LambdaPoly, cap: u32, scale: f64, max_l: usize) -> Vec<LambdaPoly> {
    let base: LambdaPoly = k.iter().map(|z| z * scale).collect();
    let mut out = vec![SmallVec::from_slice(&[C64::new(1.0, 0.0)])];
    for n in 1..=cap {
        let mut next = poly_mul(out.last().expect("nonempty"), &base, max_l);
        for z in next.iter_mut() {
            *z /= n as f64;
        }
        out.push(next);
    }
    out
}

/// Kernel-entry powers for every (row point, column point) pair of two supports.
struct PowerCache {
    row_index: Vec<u32>,
    col_index: Vec<u32>,
    cols: usize,
    table: Vec<Option<Vec<LambdaPoly>>>,
}

impl PowerCache {
    fn new(points: usize, rows: &[u32], cols: &[u32], kernel: &KernelSeries, cap: u32, diagonal_scale: f64, max_l: usize) -> Self {
        let mut row_index = vec![u32::MAX; points];
        let mut col_index = vec![u32::MAX; points];
        for (i, p) in rows.iter().enumerate() {
            row_index[*p as usize] = i as u32;
        }
        for (j, q) in cols.iter().enumerate() {
            col_index[*q as usize] = j as u32;
        }
        let mut table = Vec::with_capacity(rows.len() * cols.len());
        for p in rows {
            for q in cols {
                let e = kernel.entry(*p as usize, *q as usize);
                let scale = if p == q { diagonal_scale } else { 1.0 };
                table.push((!e.is_empty() && cap > 0).then(|| powers_of(&e, cap, scale, max_l)));
            }
        }
        Self { row_index, col_index, cols: cols.len(), table }
    }

    fn get(&self, p: u32, q: u32) -> Option<&[LambdaPoly]> {
        let (i, j) = (self.row_index[p as usize], self.col_index[q as usize]);
        self.table[i as usize * self.cols + j as usize].as_deref()
    }
}

/// Depth-first enumeration of contraction counts over `pairs`.
#[allow(clippy::too_many_arguments)]
fn enumerate_patterns(
    pairs: &[PairKernel],
    idx: usize,
    used: &mut [u32],
    cap: &[u32],
    n: u32,
    n_max: u32,
    poly: &LambdaPoly,
    max_l: usize,
    emit: &mut dyn FnMut(u32, &[u32], &LambdaPoly),
) {
    if idx == pairs.len() {
        emit(n, used, poly);
        return;
    }
    let pk = &pairs[idx];
    let (i, j) = (pk.i, pk.j);
    enumerate_patterns(pairs, idx + 1, used, cap, n, n_max, poly, max_l, emit);
    let mut k = 1u32;
    while (k as usize) < pk.powers.len() && n + k <= n_max {
        let fits = if i == j { used[i] + 2 <= cap[i] } else { used[i] < cap[i] && used[j] < cap[j] };
        if !fits {
            break;
        }
        if i == j {
            used[i] += 2;
        } else {
            used[i] += 1;
            used[j] += 1;
        }
        let p = poly_mul(poly, &pk.powers[k as usize], max_l);
        if !is_zero_poly(&p) {
            enumerate_patterns(pairs, idx + 1, used, cap, n + k, n_max, &p, max_l, emit);
        }
        k += 1;
    }
    let taken = k - 1;
    if i == j {
        used[i] -= 2 * taken;
    } else {
        used[i] -= taken;
        used[j] -= taken;
    }
}

fn remaining(f: &[(u32, u32)], used: &[u32]) -> Monomial {
    let mut out = Monomial::new();
    for ((p, k), u) in f.iter().zip(used.iter()) {
        for _ in 0..(k - u) {
            out.push(*p);
        }
    }
    out
}

fn merge(a: &Monomial, b: &Monomial) -> Monomial {
    let mut out = Monomial::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] <= b[j]) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out
}

fn collect_pieces(points: usize, orders: Orders, pieces: Vec<BTreeMap<Monomial, FormalSeries>>) -> PolyFunctional {
    let mut out = PolyFunctional::zero(points, orders);
    for piece in pieces {
        for (m, c) in piece {
            out.add_monomial(m, &c);
        }
    }
    out
}

/// `F (x) G -> sum over cross contractions weighted by hbar^n K^k / k!`, the common core of
/// the pointwise, star and time-ordered products.
fn exp_product(f: &PolyFunctional, g: &PolyFunctional, kernel: Option<&KernelSeries>) -> PolyFunctional {
    let orders = f.orders;
    let total = (orders.hbar + orders.lambda) as i32;
    let max_l = orders.lambda as usize;
    let cap = (f.degree().min(g.degree()) as u32).min(2 * total.max(0) as u32);
    let cache = kernel.map(|k| PowerCache::new(f.points, &f.support(), &g.support(), k, cap, 1.0, max_l));
    let g_terms: Vec<(&Monomial, &FormalSeries, i32)> = g.terms.iter().filter_map(|(m, c)| c.slack().map(|s| (m, c, s))).collect();
    let f_terms: Vec<(&Monomial, &FormalSeries)> = f.terms.iter().collect();
    let pieces: Vec<BTreeMap<Monomial, FormalSeries>> = f_terms
        .par_iter()
        .map(|(ma, ca)| {
            let mut local: BTreeMap<Monomial, FormalSeries> = BTreeMap::new();
            let Some(slack_a) = ca.slack() else { return local };
            let fa = factors(ma);
            for (mb, cb, slack_b) in &g_terms {
                let budget = slack_a + slack_b - total;
                if budget < 0 {
                    continue;
                }
                let fb = factors(mb);
                let n_max = if cache.is_some() { (budget as u32).min(ma.len().min(mb.len()) as u32) } else { 0 };
                let mut pairs = Vec::new();
                if let (Some(cache), true) = (&cache, n_max > 0) {
                    for (i, (p, _)) in fa.iter().enumerate() {
                        for (j, (q, _)) in fb.iter().enumerate() {
                            if let Some(powers) = cache.get(*p, *q) {
                                pairs.push(PairKernel { i, j: fa.len() + j, powers });
                            }
                        }
                    }
                }
                let caps: SmallVec<[u32; 16]> = fa.iter().chain(fb.iter()).map(|(_, k)| *k).collect();
                let mut used: SmallVec<[u32; 16]> = SmallVec::from_elem(0, caps.len());
                let product = ca.mul(cb);
                if product.is_zero() {
                    continue;
                }
                let one: LambdaPoly = SmallVec::from_slice(&[C64::new(1.0, 0.0)]);
                let mut emit = |n: u32, u: &[u32], poly: &LambdaPoly| {
                    let w: f64 = caps.iter().zip(u).map(|(k, x)| falling(*k, *x)).product();
                    let scaled: LambdaPoly = poly.iter().map(|z| z * w).collect();
                    let key = merge(&remaining(&fa, &u[..fa.len()]), &remaining(&fb, &u[fa.len()..]));
                    let slot = local.entry(key).or_insert_with(|| FormalSeries::zero(orders));
                    slot.add_shifted(&product, n as i32, &scaled);
                };
                enumerate_patterns(&pairs, 0, &mut used, &caps, 0, n_max, &one, max_l, &mut emit);
            }
            local
        })
        .collect();
    collect_pieces(f.points, orders, pieces)
}

fn check_kernel(f: &PolyFunctional, k: &KernelSeries) -> Result<()> {
    if k.dim() != f.points {
        return Err(Error::Mismatch(format!("kernel of size {} for {} points", k.dim(), f.points)));
    }
    Ok(())
}

/// `F star G = sum_n hbar^n / n! <K^(x)n, F^(n) (x) G^(n)>` with two-point kernel `K`.
pub fn star_product(f: &PolyFunctional, g: &PolyFunctional, kernel: &KernelSeries) -> Result<PolyFunctional> {
    f.check(g)?;
    check_kernel(f, kernel)?;
    Ok(exp_product(f, g, Some(kernel)))
}

/// Time-ordered product: the same contraction exponential with the Feynman kernel.
pub fn time_ordered_product(f: &PolyFunctional, g: &PolyFunctional, feynman: &KernelSeries) -> Result<PolyFunctional> {
    star_product(f, g, feynman)
}

/// `[F, G]` for the star product with kernel `K`.
pub fn commutator(f: &PolyFunctional, g: &PolyFunctional, kernel: &KernelSeries) -> Result<PolyFunctional> {
    star_product(f, g, kernel)?.sub(&star_product(g, f, kernel)?)
}

/// `alpha_w(F) = exp((hbar / 2) sum_{p,q} w(p, q) d_p d_q) F`, using the symmetric part of `w`.
pub fn alpha(f: &PolyFunctional, w: &KernelSeries) -> Result<PolyFunctional> {
    check_kernel(f, w)?;
    let w = w.symmetric_part();
    let orders = f.orders;
    let max_l = orders.lambda as usize;
    let support = f.support();
    let cap = f.degree() as u32 / 2 + 1;
    let cache = PowerCache::new(f.points, &support, &support, &w, cap, 0.5, max_l);
    let terms: Vec<(&Monomial, &FormalSeries)> = f.terms.iter().collect();
    let pieces: Vec<BTreeMap<Monomial, FormalSeries>> = terms
        .par_iter()
        .map(|(m, c)| {
            let mut local: BTreeMap<Monomial, FormalSeries> = BTreeMap::new();
            let n_max = (c.slack().unwrap_or(0).max(0) as u32).min(m.len() as u32 / 2);
            let fa = factors(m);
            let caps: SmallVec<[u32; 8]> = fa.iter().map(|(_, k)| *k).collect();
            let mut pairs = Vec::new();
            if n_max > 0 {
                for i in 0..fa.len() {
                    for j in i..fa.len() {
                        if i == j && fa[i].1 < 2 {
                            continue;
                        }
                        if let Some(powers) = cache.get(fa[i].0, fa[j].0) {
                            pairs.push(PairKernel { i, j, powers });
                        }
                    }
                }
            }
            let mut used: SmallVec<[u32; 8]> = SmallVec::from_elem(0, fa.len());
            let one: LambdaPoly = SmallVec::from_slice(&[C64::new(1.0, 0.0)]);
            let mut emit = |n: u32, u: &[u32], poly: &LambdaPoly| {
                let wgt: f64 = caps.iter().zip(u).map(|(k, x)| falling(*k, *x)).product();
                let scaled: LambdaPoly = poly.iter().map(|z| z * wgt).collect();
                let slot = local.entry(remaining(&fa, u)).or_insert_with(|| FormalSeries::zero(orders));
                slot.add_shifted(c, n as i32, &scaled);
            };
            enumerate_patterns(&pairs, 0, &mut used, &caps, 0, n_max, &one, max_l, &mut emit);
            local
        })
        .collect();
    Ok(collect_pieces(f.points, orders, pieces))
}

/// Residual of the second-order unitarity relation
/// `(F .T G)* = F* star G* + G* star F* - F* .T G*`.
pub fn unitarity_residual(f: &PolyFunctional, g: &PolyFunctional, plus: &KernelSeries, feynman: &KernelSeries) -> Result<f64> {
    let lhs = time_ordered_product(f, g, feynman)?.conj();
    let (fs, gs) = (f.conj(), g.conj());
    let rhs = star_product(&fs, &gs, plus)?.add(&star_product(&gs, &fs, plus)?)?.sub(&time_ordered_product(&fs, &gs, feynman)?)?;
    Ok(lhs.distance(&rhs))
}

/// Residual of the involution law `(F star G)* = G* star F*`.
pub fn involution_residual(f: &PolyFunctional, g: &PolyFunctional, plus: &KernelSeries) -> Result<f64> {
    let lhs = star_product(f, g, plus)?.conj();
    let rhs = star_product(&g.conj(), &f.conj(), plus)?;
    Ok(lhs.distance(&rhs))
}

/// `1 / n!` helper exposed for callers assembling exponential series.
pub fn inverse_factorial(n: u32) -> f64 {
    1.0 / factorial(n)
}
