//! Truncated bivariate series in the Planck constant and the coupling.
//!
//! Coefficients are stored for every power of the coupling `l <= lambda` and for
//! Planck powers `a` in the window `-l ..= hbar + lambda - l`. Negative Planck powers
//! appear in intermediate S-matrix expressions; the window is chosen so every stored
//! coefficient is exact for the final truncation `(hbar, lambda)`: a term dropped at
//! `(a, l)` can only feed terms `(a + b, l + m)` with `b >= -m`, which are dropped too.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Polynomial in the coupling with complex coefficients, index = power.
pub type LambdaPoly = SmallVec<[C64; 4]>;

/// Truncation orders: highest kept Planck power and highest kept coupling power.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orders {
    pub hbar: u32,
    pub lambda: u32,
}

impl Orders {
    pub const fn new(hbar: u32, lambda: u32) -> Self {
        Self { hbar, lambda }
    }

    fn width(&self) -> usize {
        (self.hbar + self.lambda + 1) as usize
    }

    fn len(&self) -> usize {
        (self.lambda as usize + 1) * self.width()
    }

    /// Largest Planck power stored at coupling order `l`.
    pub fn max_hbar(&self, l: u32) -> i32 {
        (self.hbar + self.lambda) as i32 - l as i32
    }

    fn index(&self, a: i32, l: u32) -> Option<usize> {
        if l > self.lambda || a < -(l as i32) || a > self.max_hbar(l) {
            return None;
        }
        Some(l as usize * self.width() + (a + l as i32) as usize)
    }

    fn coords(&self, idx: usize) -> (i32, u32) {
        let l = (idx / self.width()) as u32;
        let a = (idx % self.width()) as i32 - l as i32;
        (a, l)
    }
}

impl Default for Orders {
    fn default() -> Self {
        Self::new(2, 2)
    }
}

/// Truncated Laurent-in-Planck, polynomial-in-coupling series with complex coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct FormalSeries {
    orders: Orders,
    coeffs: SmallVec<[C64; 16]>,
}

impl FormalSeries {
    pub fn zero(orders: Orders) -> Self {
        Self { orders, coeffs: SmallVec::from_elem(C64::new(0.0, 0.0), orders.len()) }
    }

    pub fn one(orders: Orders) -> Self {
        Self::constant(orders, C64::new(1.0, 0.0))
    }

    pub fn constant(orders: Orders, z: C64) -> Self {
        Self::term(orders, 0, 0, z)
    }

    /// The single term `z hbar^a lambda^l`; zero if outside the stored window.
    pub fn term(orders: Orders, a: i32, l: u32, z: C64) -> Self {
        let mut s = Self::zero(orders);
        if let Some(i) = orders.index(a, l) {
            s.coeffs[i] = z;
        }
        s
    }

    pub fn orders(&self) -> Orders {
        self.orders
    }

    pub fn get(&self, a: i32, l: u32) -> C64 {
        self.orders.index(a, l).map_or(C64::new(0.0, 0.0), |i| self.coeffs[i])
    }

    /// Adds `z` to the coefficient of `hbar^a lambda^l` if that term is stored.
    pub fn add_term(&mut self, a: i32, l: u32, z: C64) {
        if let Some(i) = self.orders.index(a, l) {
            self.coeffs[i] += z;
        }
    }

    /// Nonzero terms as `(hbar power, coupling power, coefficient)`.
    pub fn terms(&self) -> impl Iterator<Item = (i32, u32, C64)> + '_ {
        self.coeffs.iter().enumerate().filter(|(_, z)| z.re != 0.0 || z.im != 0.0).map(|(i, z)| {
            let (a, l) = self.orders.coords(i);
            (a, l, *z)
        })
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    fn check(&self, other: &Self) {
        assert_eq!(self.orders, other.orders, "formal series with different truncation orders");
    }

    pub fn add_assign(&mut self, other: &Self) {
        self.check(other);
        for (x, y) in self.coeffs.iter_mut().zip(other.coeffs.iter()) {
            *x += *y;
        }
    }

    pub fn sub_assign(&mut self, other: &Self) {
        self.check(other);
        for (x, y) in self.coeffs.iter_mut().zip(other.coeffs.iter()) {
            *x -= *y;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut s = self.clone();
        s.add_assign(other);
        s
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut s = self.clone();
        s.sub_assign(other);
        s
    }

    pub fn scale(&self, z: C64) -> Self {
        let mut s = self.clone();
        s.scale_assign(z);
        s
    }

    pub fn scale_assign(&mut self, z: C64) {
        for x in self.coeffs.iter_mut() {
            *x *= z;
        }
    }

    pub fn neg(&self) -> Self {
        self.scale(C64::new(-1.0, 0.0))
    }

    /// Complex conjugation of every coefficient (the involution).
    pub fn conj(&self) -> Self {
        let mut s = self.clone();
        for x in s.coeffs.iter_mut() {
            *x = x.conj();
        }
        s
    }

    /// Truncated product.
    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.orders);
        out.add_product(self, other, 0, &[C64::new(1.0, 0.0)]);
        out
    }

    /// `self += x * y * hbar^shift * poly(lambda)`, truncated.
    pub fn add_product(&mut self, x: &Self, y: &Self, shift: i32, poly: &[C64]) {
        self.check(x);
        self.check(y);
        let o = self.orders;
        for (i, zx) in x.coeffs.iter().enumerate() {
            if zx.re == 0.0 && zx.im == 0.0 {
                continue;
            }
            let (ax, lx) = o.coords(i);
            for (j, zy) in y.coeffs.iter().enumerate() {
                if zy.re == 0.0 && zy.im == 0.0 {
                    continue;
                }
                let (ay, ly) = o.coords(j);
                let z = zx * zy;
                for (p, c) in poly.iter().enumerate() {
                    if let Some(k) = o.index(ax + ay + shift, lx + ly + p as u32) {
                        self.coeffs[k] += z * c;
                    }
                }
            }
        }
    }

    /// `self += x * hbar^shift * poly(lambda)`, truncated.
    pub fn add_shifted(&mut self, x: &Self, shift: i32, poly: &[C64]) {
        self.check(x);
        let o = self.orders;
        for (i, zx) in x.coeffs.iter().enumerate() {
            if zx.re == 0.0 && zx.im == 0.0 {
                continue;
            }
            let (a, l) = o.coords(i);
            for (p, c) in poly.iter().enumerate() {
                if let Some(k) = o.index(a + shift, l + p as u32) {
                    self.coeffs[k] += zx * c;
                }
            }
        }
    }

    /// Largest number of further Planck powers any nonzero term can absorb before
    /// leaving the window; `None` for the zero series.
    pub fn slack(&self) -> Option<i32> {
        self.terms().map(|(a, l, _)| self.orders.max_hbar(l) - a).max()
    }

    /// Lowest coupling power with a nonzero coefficient.
    pub fn lowest_lambda(&self) -> Option<u32> {
        self.terms().map(|(_, l, _)| l).min()
    }

    pub fn max_abs(&self) -> f64 {
        self.coeffs.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient-wise distance.
    pub fn distance(&self, other: &Self) -> f64 {
        self.check(other);
        self.coeffs.iter().zip(other.coeffs.iter()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    /// Largest coefficient among negative Planck powers; zero for regular series.
    pub fn singular_part(&self) -> f64 {
        self.terms().filter(|(a, _, _)| *a < 0).map(|(_, _, z)| z.norm()).fold(0.0, f64::max)
    }

    /// Drops everything outside `0 <= a <= hbar`, the physically reported layers.
    pub fn physical(&self) -> Self {
        let mut s = self.clone();
        for (i, x) in s.coeffs.iter_mut().enumerate() {
            let (a, _) = self.orders.coords(i);
            if a < 0 || a > self.orders.hbar as i32 {
                *x = C64::new(0.0, 0.0);
            }
        }
        s
    }

    /// Keeps only the terms with coupling power `l`.
    pub fn lambda_layer(&self, l: u32) -> Self {
        let mut s = self.clone();
        for (i, x) in s.coeffs.iter_mut().enumerate() {
            if self.orders.coords(i).1 != l {
                *x = C64::new(0.0, 0.0);
            }
        }
        s
    }

    /// Keeps coupling powers up to `l`.
    pub fn truncate_lambda(&self, l: u32) -> Self {
        let mut s = self.clone();
        for (i, x) in s.coeffs.iter_mut().enumerate() {
            if self.orders.coords(i).1 > l {
                *x = C64::new(0.0, 0.0);
            }
        }
        s
    }

    /// The classical layer: coefficient of `hbar^0` per coupling power.
    pub fn classical(&self) -> Vec<C64> {
        (0..=self.orders.lambda).map(|l| self.get(0, l)).collect()
    }

    /// Numerical value at given Planck constant and coupling.
    pub fn evaluate(&self, hbar: f64, lambda: f64) -> C64 {
        self.terms().map(|(a, l, z)| z * hbar.powi(a) * lambda.powi(l as i32)).sum()
    }

    /// Inverse of a series whose coupling-zero layer is a nonzero constant.
    pub fn inverse(&self) -> Result<Self> {
        let c = self.get(0, 0);
        let rest_zero = self.terms().all(|(a, l, _)| l > 0 || a == 0);
        if c.norm() == 0.0 || !rest_zero {
            return Err(Error::InvalidArgument("series is not invertible by a coupling expansion".into()));
        }
        let inv_c = C64::new(1.0, 0.0) / c;
        let mut x = self.scale(inv_c);
        x.sub_assign(&Self::one(self.orders));
        let minus_x = x.neg();
        let mut out = Self::one(self.orders);
        let mut power = Self::one(self.orders);
        for _ in 0..self.orders.lambda {
            power = power.mul(&minus_x);
            out.add_assign(&power);
        }
        Ok(out.scale(inv_c))
    }
}

/// Serialized form: the orders plus a sparse term list `[hbar power, coupling power, re, im]`.
#[derive(Serialize, Deserialize)]
struct SeriesRepr {
    orders: Orders,
    terms: Vec<(i32, u32, f64, f64)>,
}

impl Serialize for FormalSeries {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = SeriesRepr { orders: self.orders, terms: self.terms().map(|(a, l, z)| (a, l, z.re, z.im)).collect() };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FormalSeries {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SeriesRepr::deserialize(deserializer)?;
        let mut s = FormalSeries::zero(repr.orders);
        for (a, l, re, im) in repr.terms {
            if repr.orders.index(a, l).is_none() {
                return Err(serde::de::Error::custom(format!("term hbar^{a} lambda^{l} outside the window")));
            }
            s.add_term(a, l, C64::new(re, im));
        }
        Ok(s)
    }
}

/// Truncated product of coupling polynomials.
pub fn poly_mul(x: &[C64], y: &[C64], max_power: usize) -> LambdaPoly {
    let mut out: LambdaPoly = SmallVec::from_elem(C64::new(0.0, 0.0), (x.len() + y.len()).saturating_sub(1).min(max_power + 1));
    for (i, a) in x.iter().enumerate() {
        if a.re == 0.0 && a.im == 0.0 {
            continue;
        }
        for (j, b) in y.iter().enumerate() {
            if i + j < out.len() {
                out[i + j] += a * b;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    /// Untruncated product on a dense grid, used as an independent oracle.
    fn dense_product(x: &FormalSeries, y: &FormalSeries) -> std::collections::BTreeMap<(i32, u32), C64> {
        let mut out = std::collections::BTreeMap::new();
        for (a1, l1, z1) in x.terms() {
            for (a2, l2, z2) in y.terms() {
                *out.entry((a1 + a2, l1 + l2)).or_insert(c(0.0, 0.0)) += z1 * z2;
            }
        }
        out
    }

    fn series_strategy(o: Orders) -> impl Strategy<Value = FormalSeries> {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), o.len()).prop_map(move |v| {
            let mut s = FormalSeries::zero(o);
            for (i, (re, im)) in v.into_iter().enumerate() {
                let (a, l) = o.coords(i);
                s.add_term(a, l, c(re, im));
            }
            s
        })
    }

    #[test]
    fn window_layout() {
        let o = Orders::new(2, 2);
        assert_eq!(o.len(), 15);
        assert_eq!(o.index(0, 0), Some(0));
        assert_eq!(o.index(-1, 0), None);
        assert_eq!(o.index(-2, 2), Some(10));
        assert_eq!(o.index(2, 2), Some(14));
        assert_eq!(o.index(3, 2), None);
        assert_eq!(o.index(4, 0), Some(4));
        for i in 0..o.len() {
            let (a, l) = o.coords(i);
            assert_eq!(o.index(a, l), Some(i));
        }
    }

    #[test]
    fn identity_and_constants() {
        let o = Orders::default();
        let x = FormalSeries::term(o, 1, 1, c(2.0, -1.0));
        assert_eq!(FormalSeries::one(o).mul(&x), x);
        assert_eq!(x.classical(), vec![c(0.0, 0.0); 3]);
        assert_eq!(FormalSeries::one(o).classical()[0], c(1.0, 0.0));
    }

    #[test]
    fn negative_powers_cancel_against_positive() {
        let o = Orders::new(2, 2);
        let x = FormalSeries::term(o, -1, 1, c(1.0, 0.0));
        let y = FormalSeries::term(o, 2, 1, c(3.0, 0.0));
        let p = x.mul(&y);
        assert_eq!(p.get(1, 2), c(3.0, 0.0));
        assert_eq!(p.singular_part(), 0.0);
    }

    #[test]
    fn inverse_of_unit_series() {
        let o = Orders::new(2, 3);
        let mut x = FormalSeries::one(o);
        x.add_term(1, 1, c(0.5, 0.2));
        x.add_term(-1, 2, c(0.1, 0.0));
        let inv = x.inverse().unwrap();
        assert!(inv.mul(&x).distance(&FormalSeries::one(o)) < 1e-15);
    }

    #[test]
    fn serde_round_trip() {
        let o = Orders::new(2, 2);
        let mut x = FormalSeries::zero(o);
        x.add_term(-2, 2, c(1.0, 2.0));
        x.add_term(1, 0, c(-0.5, 0.0));
        let text = serde_json::to_string(&x).unwrap();
        let back: FormalSeries = serde_json::from_str(&text).unwrap();
        assert_eq!(back, x);
    }

    proptest! {
        #[test]
        fn truncated_product_matches_dense_oracle(x in series_strategy(Orders::new(2, 2)), y in series_strategy(Orders::new(2, 2))) {
            let p = x.mul(&y);
            let dense = dense_product(&x, &y);
            for l in 0..=2u32 {
                for a in -(l as i32)..=(4 - l as i32) {
                    let expected = dense.get(&(a, l)).copied().unwrap_or(c(0.0, 0.0));
                    prop_assert!((p.get(a, l) - expected).norm() < 1e-12);
                }
            }
        }

        #[test]
        fn product_is_associative(x in series_strategy(Orders::new(1, 2)), y in series_strategy(Orders::new(1, 2)), z in series_strategy(Orders::new(1, 2))) {
            let left = x.mul(&y).mul(&z);
            let right = x.mul(&y.mul(&z));
            prop_assert!(left.distance(&right) < 1e-12);
        }

        #[test]
        fn product_distributes(x in series_strategy(Orders::new(2, 1)), y in series_strategy(Orders::new(2, 1)), z in series_strategy(Orders::new(2, 1))) {
            let left = x.mul(&y.add(&z));
            let right = x.mul(&y).add(&x.mul(&z));
            prop_assert!(left.distance(&right) < 1e-12);
        }
    }
}
