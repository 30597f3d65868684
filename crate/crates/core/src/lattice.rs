//! Discretised Minkowski torus: time grid times a periodic spatial lattice, fields,
//! measure-weighted pairings, spatial Fourier transforms and temporal cutoffs.
//!
//! Sites are indexed `i = t * n_s + s` with `n_s = n_x^d` spatial sites; the measure
//! weight of every site is `dt * dx^d`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::series::C64;

/// Periodic spatial lattice shared by the time-sliced lattice and by continuous-time point sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialTorus {
    pub d: usize,
    pub n_x: usize,
    pub dx: f64,
}

impl SpatialTorus {
    pub fn new(d: usize, n_x: usize, dx: f64) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidLattice(format!("spatial dimension {d} outside 1..=3")));
        }
        if n_x < 2 {
            return Err(Error::InvalidLattice(format!("n_x = {n_x} must be at least 2")));
        }
        if !(dx > 0.0) || !dx.is_finite() {
            return Err(Error::InvalidLattice(format!("spatial spacing {dx} must be positive")));
        }
        Ok(Self { d, n_x, dx })
    }

    pub fn sites(&self) -> usize {
        self.n_x.pow(self.d as u32)
    }

    /// Spatial volume element `dx^d`.
    pub fn cell(&self) -> f64 {
        self.dx.powi(self.d as i32)
    }

    /// Total spatial volume `(n_x dx)^d`.
    pub fn volume(&self) -> f64 {
        self.sites() as f64 * self.cell()
    }

    pub fn period(&self) -> f64 {
        self.n_x as f64 * self.dx
    }

    /// Integer coordinates of a spatial site, first axis fastest.
    pub fn coords(&self, s: usize) -> SmallVec<[usize; 3]> {
        let mut out = SmallVec::new();
        let mut rest = s;
        for _ in 0..self.d {
            out.push(rest % self.n_x);
            rest /= self.n_x;
        }
        out
    }

    pub fn site(&self, coords: &[usize]) -> usize {
        coords.iter().rev().fold(0, |acc, c| acc * self.n_x + c % self.n_x)
    }

    /// Mode integers `m` with momentum `2 pi m / (n_x dx)`, same indexing as sites.
    pub fn momentum(&self, mode: usize) -> SmallVec<[f64; 3]> {
        let l = self.period();
        self.coords(mode).iter().map(|&m| 2.0 * PI * m as f64 / l).collect()
    }

    /// Eigenvalue of the lattice Laplacian `-nabla^2` on a mode.
    pub fn laplacian_eigenvalue(&self, mode: usize) -> f64 {
        self.momentum(mode).iter().map(|k| 4.0 / (self.dx * self.dx) * (0.5 * k * self.dx).sin().powi(2)).sum()
    }

    /// Largest Laplacian eigenvalue, `4 d / dx^2` for even `n_x`.
    pub fn max_laplacian_eigenvalue(&self) -> f64 {
        (0..self.sites()).map(|m| self.laplacian_eigenvalue(m)).fold(0.0, f64::max)
    }

    /// Phase `k . (x - y)` between two spatial sites for a mode.
    pub fn phase(&self, mode: usize, s1: usize, s2: usize) -> f64 {
        let n = self.n_x as i64;
        let c1 = self.coords(s1);
        let c2 = self.coords(s2);
        let m = self.coords(mode);
        let mut acc = 0.0;
        for a in 0..self.d {
            let diff = (c1[a] as i64 - c2[a] as i64).rem_euclid(n);
            acc += 2.0 * PI * (m[a] as i64 * diff % n) as f64 / n as f64;
        }
        acc
    }

    /// Minimal-image distance between two spatial sites.
    pub fn distance(&self, s1: usize, s2: usize) -> f64 {
        let c1 = self.coords(s1);
        let c2 = self.coords(s2);
        let n = self.n_x as i64;
        let mut acc = 0.0;
        for a in 0..self.d {
            let diff = (c1[a] as i64 - c2[a] as i64).rem_euclid(n);
            let wrapped = diff.min(n - diff) as f64 * self.dx;
            acc += wrapped * wrapped;
        }
        acc.sqrt()
    }

    /// Site obtained by shifting `s` by integer steps along each axis.
    pub fn shift(&self, s: usize, steps: &[i64]) -> usize {
        let n = self.n_x as i64;
        let c: SmallVec<[usize; 3]> =
            self.coords(s).iter().zip(steps.iter().chain(std::iter::repeat(&0))).map(|(&x, &st)| (x as i64 + st).rem_euclid(n) as usize).collect();
        self.site(&c)
    }
}

/// Discretised `(1 + d)`-dimensional Minkowski torus with an open time direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub n_t: usize,
    pub dt: f64,
    pub torus: SpatialTorus,
}

/// Validates parameters and builds a lattice.
pub fn build_lattice(n_t: usize, dt: f64, d: usize, n_x: usize, dx: f64) -> Result<LatticeSpec> {
    if n_t < 3 {
        return Err(Error::InvalidLattice(format!("n_t = {n_t} must be at least 3")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidLattice(format!("time spacing {dt} must be positive")));
    }
    let torus = SpatialTorus::new(d, n_x, dx)?;
    Ok(LatticeSpec { n_t, dt, torus })
}

impl LatticeSpec {
    pub fn d(&self) -> usize {
        self.torus.d
    }

    pub fn n_x(&self) -> usize {
        self.torus.n_x
    }

    pub fn dx(&self) -> f64 {
        self.torus.dx
    }

    pub fn spatial_sites(&self) -> usize {
        self.torus.sites()
    }

    /// Total site count `n_t * n_x^d`.
    pub fn sites(&self) -> usize {
        self.n_t * self.spatial_sites()
    }

    /// Measure weight `dt * dx^d` of one site.
    pub fn measure(&self) -> f64 {
        self.dt * self.torus.cell()
    }

    pub fn index(&self, t: usize, s: usize) -> usize {
        t * self.spatial_sites() + s
    }

    pub fn time_index(&self, i: usize) -> usize {
        i / self.spatial_sites()
    }

    pub fn spatial_index(&self, i: usize) -> usize {
        i % self.spatial_sites()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.time_index(i) as f64 * self.dt
    }

    /// Time span `(n_t - 1) dt` of the grid.
    pub fn span(&self) -> f64 {
        (self.n_t - 1) as f64 * self.dt
    }
}

/// Complex field configuration on the lattice sites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub lattice: LatticeSpec,
    pub values: Vec<C64>,
}

impl Field {
    pub fn new(lattice: LatticeSpec, values: Vec<C64>) -> Result<Self> {
        if values.len() != lattice.sites() {
            return Err(Error::Mismatch(format!("field has {} values, lattice has {} sites", values.len(), lattice.sites())));
        }
        Ok(Self { lattice, values })
    }

    pub fn zeros(lattice: LatticeSpec) -> Self {
        Self { lattice, values: vec![C64::new(0.0, 0.0); lattice.sites()] }
    }

    pub fn constant(lattice: LatticeSpec, z: C64) -> Self {
        Self { lattice, values: vec![z; lattice.sites()] }
    }

    /// Field built from a function of (time index, spatial site).
    pub fn from_fn(lattice: LatticeSpec, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let values = (0..lattice.sites()).map(|i| f(lattice.time_index(i), lattice.spatial_index(i))).collect();
        Self { lattice, values }
    }

    pub fn indicator(lattice: LatticeSpec, site: usize) -> Self {
        let mut f = Self::zeros(lattice);
        f.values[site] = C64::new(1.0, 0.0);
        f
    }

    /// True when every imaginary part is below `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        self.values.iter().all(|z| z.im.abs() <= tol)
    }

    fn same_lattice(&self, other: &Field) -> Result<()> {
        if self.lattice != other.lattice {
            return Err(Error::Mismatch("fields live on different lattices".into()));
        }
        Ok(())
    }
}

/// Bilinear pairing `sum f g mu` (no conjugation).
pub fn pairing(f: &Field, g: &Field) -> Result<C64> {
    f.same_lattice(g)?;
    let mu = f.lattice.measure();
    Ok(f.values.iter().zip(g.values.iter()).map(|(a, b)| a * b).sum::<C64>() * mu)
}

/// Hermitian form `sum conj(f) g mu`.
pub fn hermitian(f: &Field, g: &Field) -> Result<C64> {
    f.same_lattice(g)?;
    let mu = f.lattice.measure();
    Ok(f.values.iter().zip(g.values.iter()).map(|(a, b)| a.conj() * b).sum::<C64>() * mu)
}

/// Field in the spatial mode basis: values indexed `t * n_s + mode`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeField {
    pub lattice: LatticeSpec,
    pub values: Vec<C64>,
}

/// Unitary spatial DFT per time slice: `hat f(t, k) = n_s^{-1/2} sum_x e^{-i k x} f(t, x)`.
pub fn spatial_fourier(field: &Field) -> ModeField {
    ModeField { lattice: field.lattice, values: dft_slices(&field.lattice, &field.values, -1.0) }
}

/// Inverse of [`spatial_fourier`].
pub fn inverse_spatial_fourier(modes: &ModeField) -> Field {
    Field { lattice: modes.lattice, values: dft_slices(&modes.lattice, &modes.values, 1.0) }
}

fn dft_slices(lattice: &LatticeSpec, values: &[C64], sign: f64) -> Vec<C64> {
    let torus = lattice.torus;
    let ns = torus.sites();
    let norm = 1.0 / (ns as f64).sqrt();
    let mut out = vec![C64::new(0.0, 0.0); values.len()];
    for t in 0..lattice.n_t {
        for k in 0..ns {
            let mut acc = C64::new(0.0, 0.0);
            for s in 0..ns {
                // phase(k, s, 0) = k . x_s
                acc += values[t * ns + s] * C64::from_polar(1.0, sign * torus.phase(k, s, 0));
            }
            out[t * ns + k] = acc * norm;
        }
    }
    out
}

/// Time translation by whole steps: `out(t) = in(t - steps)`, zero-padded at the ends.
pub fn time_translate(field: &Field, steps: i64) -> Result<Field> {
    let lattice = field.lattice;
    if steps.unsigned_abs() as usize >= lattice.n_t {
        return Err(Error::InvalidArgument(format!("shift {steps} exceeds the {} time slices", lattice.n_t)));
    }
    let ns = lattice.spatial_sites();
    let mut out = Field::zeros(lattice);
    for t in 0..lattice.n_t as i64 {
        let src = t - steps;
        if src < 0 || src >= lattice.n_t as i64 {
            continue;
        }
        for s in 0..ns {
            out.values[t as usize * ns + s] = field.values[src as usize * ns + s];
        }
    }
    Ok(out)
}

/// Real density over sample points (cutoff, mass profile, current).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityFunction {
    pub values: Vec<f64>,
}

impl DensityFunction {
    pub fn zeros(n: usize) -> Self {
        Self { values: vec![0.0; n] }
    }

    pub fn constant(n: usize, v: f64) -> Self {
        Self { values: vec![v; n] }
    }

    pub fn on_lattice(lattice: &LatticeSpec, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self { values: (0..lattice.sites()).map(|i| f(lattice.time_index(i), lattice.spatial_index(i))).collect() }
    }

    /// Indices where the density is nonzero.
    pub fn support(&self) -> Vec<usize> {
        self.values.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * c).collect() }
    }
}

/// Piecewise-linear temporal cutoff: one on `[-inner, inner]`, linear ramps to zero at `+-outer`.
///
/// Membership in the cutoff class for a given `epsilon` requires
/// `epsilon <= inner < outer < 2 epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalCutoff {
    pub epsilon: f64,
    pub inner: f64,
    pub outer: f64,
}

impl TemporalCutoff {
    pub fn new(epsilon: f64, inner: f64, outer: f64) -> Result<Self> {
        let c = Self { epsilon, inner, outer };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0 && self.inner >= self.epsilon && self.outer > self.inner && self.outer < 2.0 * self.epsilon;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "cutoff (inner {}, outer {}) is not one on (-{e}, {e}) with support inside (-{}, {})",
                self.inner,
                self.outer,
                2.0 * self.epsilon,
                2.0 * self.epsilon,
                e = self.epsilon
            )))
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let a = t.abs();
        if a <= self.inner {
            1.0
        } else if a >= self.outer {
            0.0
        } else {
            (self.outer - a) / (self.outer - self.inner)
        }
    }

    /// Derivative away from the kinks.
    pub fn derivative(&self, t: f64) -> f64 {
        let a = t.abs();
        if a <= self.inner || a >= self.outer {
            0.0
        } else {
            -t.signum() / (self.outer - self.inner)
        }
    }

    /// Past part of the derivative, `chi'(t) Theta(-t)`.
    pub fn past_derivative(&self, t: f64) -> f64 {
        if t < 0.0 {
            self.derivative(t)
        } else {
            0.0
        }
    }
}

/// Sample points of spacetime: a time, a spatial torus site and a quadrature weight each.
///
/// The time-sliced lattice is one instance; continuous-time quadrature nodes are another.
/// Every kernel and functional in the workbench is indexed by the points of one set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    pub torus: SpatialTorus,
    pub times: Vec<f64>,
    pub sites: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PointSet {
    pub fn from_lattice(lattice: &LatticeSpec) -> Self {
        let n = lattice.sites();
        Self {
            torus: lattice.torus,
            times: (0..n).map(|i| lattice.time(i)).collect(),
            sites: (0..n).map(|i| lattice.spatial_index(i)).collect(),
            weights: vec![lattice.measure(); n],
        }
    }

    /// Every spatial site at each `(time, time weight)` node.
    pub fn from_time_nodes(torus: SpatialTorus, nodes: &[(f64, f64)]) -> Self {
        let ns = torus.sites();
        let mut p = Self { torus, times: Vec::new(), sites: Vec::new(), weights: Vec::new() };
        for &(t, w) in nodes {
            for s in 0..ns {
                p.times.push(t);
                p.sites.push(s);
                p.weights.push(w * torus.cell());
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Appends the points of `other` and returns the index offset at which they start.
    pub fn extend(&mut self, other: &PointSet) -> Result<usize> {
        if self.torus != other.torus {
            return Err(Error::Mismatch("point sets on different tori".into()));
        }
        let offset = self.len();
        self.times.extend_from_slice(&other.times);
        self.sites.extend_from_slice(&other.sites);
        self.weights.extend_from_slice(&other.weights);
        Ok(offset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(lattice: LatticeSpec, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(lattice, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn lattice_examples() {
        let l = build_lattice(3, 0.1, 1, 2, 0.5).unwrap();
        assert_eq!(l.sites(), 6);
        assert!((l.measure() - 0.05).abs() < 1e-15);
        assert_eq!(build_lattice(8, 0.2, 1, 8, 0.2).unwrap().sites(), 64);
        assert_eq!(build_lattice(4, 0.1, 3, 4, 0.1).unwrap().sites(), 256);
    }

    #[test]
    fn lattice_rejects_bad_parameters() {
        assert!(build_lattice(2, 0.1, 1, 4, 0.1).is_err());
        assert!(build_lattice(4, 0.0, 1, 4, 0.1).is_err());
        assert!(build_lattice(4, 0.1, 1, 4, -0.1).is_err());
        assert!(build_lattice(4, 0.1, 1, 1, 0.1).is_err());
        assert!(build_lattice(4, 0.1, 4, 2, 0.1).is_err());
    }

    #[test]
    fn pairing_examples() {
        let l = build_lattice(4, 0.1, 1, 4, 0.25).unwrap();
        let e = Field::indicator(l, 5);
        assert!((pairing(&e, &e).unwrap().re - l.measure()).abs() < 1e-15);
        let one = Field::constant(l, C64::new(1.0, 0.0));
        assert!((pairing(&one, &one).unwrap().re - l.sites() as f64 * l.measure()).abs() < 1e-14);
        let other = build_lattice(5, 0.1, 1, 4, 0.25).unwrap();
        assert!(pairing(&one, &Field::zeros(other)).is_err());
    }

    #[test]
    fn pairing_matches_double_loop_oracle() {
        let l = build_lattice(5, 0.1, 2, 3, 0.3).unwrap();
        let f = random_field(l, 1);
        let g = random_field(l, 2);
        let mut oracle = C64::new(0.0, 0.0);
        for t in 0..l.n_t {
            for s in 0..l.spatial_sites() {
                oracle += f.values[l.index(t, s)] * g.values[l.index(t, s)] * l.dt * l.dx() * l.dx();
            }
        }
        assert!((pairing(&f, &g).unwrap() - oracle).norm() < 1e-14);
    }

    #[test]
    fn fourier_of_constant_and_impulse() {
        let l = build_lattice(3, 0.1, 2, 4, 0.5).unwrap();
        let ns = l.spatial_sites();
        let c = spatial_fourier(&Field::constant(l, C64::new(2.0, 0.0)));
        for t in 0..l.n_t {
            for k in 0..ns {
                let v = c.values[t * ns + k];
                if k == 0 {
                    assert!((v.re - 2.0 * (ns as f64).sqrt()).abs() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
        let imp = spatial_fourier(&Field::indicator(l, l.index(1, 5)));
        // direct DFT oracle: modulus n_s^{-1/2} on every mode of slice 1
        for k in 0..ns {
            let direct = C64::from_polar(1.0, -l.torus.phase(k, 5, 0)) / (ns as f64).sqrt();
            assert!((imp.values[ns + k] - direct).norm() < 1e-14);
            assert!((imp.values[ns + k].norm() - 1.0 / (ns as f64).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn laplacian_extremes() {
        let t = SpatialTorus::new(1, 8, 0.2).unwrap();
        assert!((t.max_laplacian_eigenvalue() - 100.0).abs() < 1e-9);
        assert_eq!(t.laplacian_eigenvalue(0), 0.0);
    }

    #[test]
    fn translation_examples() {
        let l = build_lattice(6, 0.1, 1, 3, 0.2).unwrap();
        let f = random_field(l, 4);
        assert_eq!(time_translate(&f, 0).unwrap(), f);
        let imp = Field::indicator(l, l.index(2, 1));
        let moved = time_translate(&imp, 3).unwrap();
        assert_eq!(moved.values[l.index(5, 1)], C64::new(1.0, 0.0));
        assert!(time_translate(&f, 6).is_err());
    }

    #[test]
    fn cutoff_class() {
        assert!(TemporalCutoff::new(1.0, 1.0, 1.5).is_ok());
        assert!(TemporalCutoff::new(1.0, 0.9, 1.5).is_err());
        assert!(TemporalCutoff::new(1.0, 1.2, 2.0).is_err());
        let c = TemporalCutoff::new(1.0, 1.2, 1.6).unwrap();
        assert_eq!(c.value(0.5), 1.0);
        assert!((c.value(-1.4) - 0.5).abs() < 1e-15);
        assert!((c.past_derivative(-1.4) - 2.5).abs() < 1e-12);
        assert_eq!(c.past_derivative(1.4), 0.0);
    }

    proptest! {
        #[test]
        fn fourier_round_trip(seed in 0u64..1000, d in 1usize..=3) {
            let l = build_lattice(3, 0.1, d, 3, 0.4).unwrap();
            let f = random_field(l, seed);
            let back = inverse_spatial_fourier(&spatial_fourier(&f));
            for (a, b) in back.values.iter().zip(f.values.iter()) {
                prop_assert!((a - b).norm() < 1e-13);
            }
        }

        #[test]
        fn pairing_symmetric_and_hermitian_positive(seed in 0u64..1000) {
            let l = build_lattice(4, 0.2, 1, 5, 0.3).unwrap();
            let f = random_field(l, seed);
            let g = random_field(l, seed + 7);
            prop_assert!((pairing(&f, &g).unwrap() - pairing(&g, &f).unwrap()).norm() < 1e-14);
            let h = hermitian(&f, &f).unwrap();
            prop_assert!(h.re > 0.0 && h.im.abs() < 1e-14);
        }

        #[test]
        fn translations_compose(a in -2i64..=2, b in -2i64..=2, seed in 0u64..100) {
            let l = build_lattice(9, 0.1, 1, 3, 0.3).unwrap();
            // support in the middle slice so no truncation occurs
            let f = Field::from_fn(l, |t, s| if t == 4 { C64::new(seed as f64 + s as f64, 1.0) } else { C64::new(0.0, 0.0) });
            let two = time_translate(&time_translate(&f, a).unwrap(), b).unwrap();
            let one = time_translate(&f, a + b).unwrap();
            prop_assert_eq!(two, one);
        }
    }
}
