//! Gauss–Legendre rules on composite panels and on the ordered simplex.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Composite Gauss–Legendre rule: `panels` equal panels with `order` nodes each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub order: usize,
    pub panels: usize,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self { order: 16, panels: 1 }
    }
}

impl QuadratureRule {
    pub fn new(order: usize, panels: usize) -> Result<Self> {
        let r = Self { order, panels };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order < 2 || self.panels == 0 {
            return Err(Error::Quadrature(format!("rule needs order >= 2 and a panel, got order {} with {} panels", self.order, self.panels)));
        }
        Ok(())
    }

    /// `(node, weight)` pairs on `[a, b]`.
    pub fn nodes(&self, a: f64, b: f64) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let rule = GaussLegendre::new(NonZeroUsize::new(self.order).expect("order checked"));
        let h = (b - a) / self.panels as f64;
        let mut out = Vec::with_capacity(self.order * self.panels);
        for k in 0..self.panels {
            let lo = a + k as f64 * h;
            for (x, w) in rule.nodes().zip(rule.weights()) {
                out.push((lo + 0.5 * h * (x + 1.0), 0.5 * h * w));
            }
        }
        Ok(out)
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> Result<f64> {
        Ok(self.nodes(a, b)?.into_iter().map(|(x, w)| w * f(x)).sum())
    }

    /// Nodes on the ordered simplex `0 <= u_1 <= ... <= u_n <= beta` with Jacobian-weighted
    /// weights, from `u_n = beta x_n`, `u_j = u_{j+1} x_j`.
    pub fn simplex(&self, n: usize, beta: f64) -> Result<Vec<(Vec<f64>, f64)>> {
        let base = self.nodes(0.0, 1.0)?;
        let mut out = vec![(Vec::new(), 1.0)];
        if n == 0 {
            return Ok(out);
        }
        for _ in 0..n {
            let mut next = Vec::with_capacity(out.len() * base.len());
            for (xs, w) in &out {
                for &(x, wx) in &base {
                    let mut v = xs.clone();
                    v.push(x);
                    next.push((v, w * wx));
                }
            }
            out = next;
        }
        Ok(out
            .into_iter()
            .map(|(xs, w)| {
                let mut u = vec![0.0; n];
                u[n - 1] = beta * xs[n - 1];
                let mut jac = beta;
                for j in (0..n - 1).rev() {
                    jac *= u[j + 1];
                    u[j] = u[j + 1] * xs[j];
                }
                (u, w * jac)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rejects_low_order() {
        assert!(QuadratureRule::new(1, 1).is_err());
        assert!(QuadratureRule::new(4, 0).is_err());
    }

    #[test]
    fn polynomial_exactness_and_panels() {
        let r = QuadratureRule::new(4, 3).unwrap();
        assert_relative_eq!(r.integrate(-1.0, 2.0, |x| x.powi(7)).unwrap(), (256.0 - 1.0) / 8.0, max_relative = 1e-13);
        let e = QuadratureRule::new(16, 4).unwrap().integrate(0.0, 3.0, |x| (-5.0 * x).exp()).unwrap();
        assert_relative_eq!(e, (1.0 - (-15.0f64).exp()) / 5.0, max_relative = 1e-14);
    }

    #[test]
    fn simplex_volume_and_moment() {
        let r = QuadratureRule::default();
        for n in 1..=3 {
            let nodes = r.simplex(n, 2.0).unwrap();
            let vol: f64 = nodes.iter().map(|(_, w)| w).sum();
            let fact: f64 = (1..=n).map(|k| k as f64).product();
            assert_relative_eq!(vol, 2f64.powi(n as i32) / fact, max_relative = 1e-13);
            assert!(nodes.iter().all(|(u, _)| u.windows(2).all(|p| p[0] <= p[1]) && u.iter().all(|x| (0.0..=2.0).contains(x))));
        }
        // int_{0<=u1<=u2<=1} u1 du = 1/6
        let m: f64 = r.simplex(2, 1.0).unwrap().iter().map(|(u, w)| w * u[0]).sum();
        assert_relative_eq!(m, 1.0 / 6.0, max_relative = 1e-13);
    }
}
