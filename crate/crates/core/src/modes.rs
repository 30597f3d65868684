//! Single-mode dynamics under a switched mass: `(d_t^2 + omega^2(t)) T_k = 0` with
//! `omega^2(t) = k^2 + m1^2 + (m2^2 - m1^2) f(t / mu)`, Wronskian-normalised solutions,
//! adiabatic comparison modes and the `R_lambda` series linking the two, the energy bound,
//! the adiabatic limit in `mu`, the mode-space Neumann bound and the assembled
//! two-point kernel.
//!
//! Time grids here are fine continuum grids, independent of the lattice.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::QuadratureRule;
use crate::series::C64;

/// Largest tolerated `|W(t) - i|` along a trajectory.
pub const WRONSKIAN_TOLERANCE: f64 = 1e-8;
/// Drift budget the step selection aims for.
const DRIFT_BUDGET: f64 = 1e-10;

fn ci(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Which one-sided limit to take at a kink of the switching function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Shape of the switching density `chi` on `[0, 1]`, with unit integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Switch {
    /// `chi = 30 x^2 (1 - x)^2`, so `f` is the quintic smoothstep.
    Smoothstep,
    /// `chi = 2 (1 - x)`: switches on with a jump, off smoothly.
    Ramp,
}

impl Switch {
    fn inside(x: f64, side: Side) -> bool {
        match side {
            Side::Right => (0.0..1.0).contains(&x),
            Side::Left => x > 0.0 && x <= 1.0,
        }
    }

    pub fn chi(self, x: f64, side: Side) -> f64 {
        if !Self::inside(x, side) {
            return 0.0;
        }
        match self {
            Self::Smoothstep => 30.0 * x * x * (1.0 - x) * (1.0 - x),
            Self::Ramp => 2.0 * (1.0 - x),
        }
    }

    pub fn chi_dot(self, x: f64, side: Side) -> f64 {
        if !Self::inside(x, side) {
            return 0.0;
        }
        match self {
            Self::Smoothstep => 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x),
            Self::Ramp => -2.0,
        }
    }

    /// `f(x) = int_{-inf}^x chi`.
    pub fn f(self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        match self {
            Self::Smoothstep => x * x * x * (10.0 - 15.0 * x + 6.0 * x * x),
            Self::Ramp => 2.0 * x - x * x,
        }
    }
}

/// `omega^2(t) = k^2 + m1^2 + (m2^2 - m1^2) f(t / mu)`, switching on `[0, mu]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub k: f64,
    pub m1_sq: f64,
    pub m2_sq: f64,
    pub mu: f64,
    pub switch: Switch,
}

impl FrequencyProfile {
    pub fn new(k: f64, m1_sq: f64, m2_sq: f64, mu: f64, switch: Switch) -> Result<Self> {
        if !(k >= 0.0 && m1_sq >= 0.0 && m2_sq >= 0.0) || !(k.is_finite() && m1_sq.is_finite() && m2_sq.is_finite()) {
            return Err(Error::InvalidArgument(format!("need k, m1^2, m2^2 >= 0, got {k}, {m1_sq}, {m2_sq}")));
        }
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!("switching time mu = {mu} must be positive")));
        }
        Ok(Self { k, m1_sq, m2_sq, mu, switch })
    }

    pub fn with_k(&self, k: f64) -> Result<Self> {
        Self::new(k, self.m1_sq, self.m2_sq, self.mu, self.switch)
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        Self::new(self.k, self.m1_sq, self.m2_sq, mu, self.switch)
    }

    /// Times where `chi` may be non-smooth.
    pub fn breakpoints(&self) -> [f64; 2] {
        [0.0, self.mu]
    }

    pub fn f(&self, t: f64) -> f64 {
        self.switch.f(t / self.mu)
    }

    /// `chi_mu(t) = chi(t / mu) / mu`.
    pub fn chi(&self, t: f64, side: Side) -> f64 {
        self.switch.chi(t / self.mu, side) / self.mu
    }

    pub fn omega2(&self, t: f64) -> f64 {
        self.k * self.k + self.m1_sq + (self.m2_sq - self.m1_sq) * self.f(t)
    }

    pub fn omega(&self, t: f64) -> f64 {
        self.omega2(t).sqrt()
    }

    pub fn omega_initial(&self) -> f64 {
        (self.k * self.k + self.m1_sq).sqrt()
    }

    pub fn omega_final(&self) -> f64 {
        (self.k * self.k + self.m2_sq).sqrt()
    }

    /// `f` is monotone, so the extremes are the end values.
    pub fn omega_max(&self) -> f64 {
        self.omega_initial().max(self.omega_final())
    }

    pub fn omega_min(&self) -> f64 {
        self.omega_initial().min(self.omega_final())
    }

    fn omega_dot(&self, t: f64, side: Side) -> f64 {
        (self.m2_sq - self.m1_sq) * self.chi(t, side) / (2.0 * self.omega(t))
    }

    fn omega_ddot(&self, t: f64, side: Side) -> f64 {
        let w = self.omega(t);
        let wd = self.omega_dot(t, side);
        let w2dd = (self.m2_sq - self.m1_sq) * self.switch.chi_dot(t / self.mu, side) / (self.mu * self.mu);
        (w2dd - 2.0 * wd * wd) / (2.0 * w)
    }

    /// Regular part of `lambda = (1/2) omega'' / omega - (3/4) (omega' / omega)^2`.
    pub fn lambda(&self, t: f64, side: Side) -> f64 {
        let w = self.omega(t);
        let r = self.omega_dot(t, side) / w;
        0.5 * self.omega_ddot(t, side) / w - 0.75 * r * r
    }

    /// Point masses of `lambda` where `omega'` jumps: `(t, [omega'] / (2 omega))`.
    pub fn lambda_atoms(&self) -> Vec<(f64, f64)> {
        self.breakpoints()
            .into_iter()
            .filter_map(|t| {
                let jump = self.omega_dot(t, Side::Right) - self.omega_dot(t, Side::Left);
                (jump != 0.0).then(|| (t, 0.5 * jump / self.omega(t)))
            })
            .collect()
    }

    /// `sup |lambda|` over a uniform sampling of the support, one-sided at the ends.
    pub fn lambda_sup(&self, samples: usize) -> f64 {
        (0..=samples)
            .map(|j| {
                let t = self.mu * j as f64 / samples as f64;
                self.lambda(t, Side::Right).abs().max(self.lambda(t, Side::Left).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Vacuum mode `e^{-i w t} / sqrt(2 w)` and its derivative.
pub fn vacuum_mode(omega: f64, t: f64) -> (C64, C64) {
    let v = C64::from_polar(1.0 / (2.0 * omega).sqrt(), -omega * t);
    (v, ci(0.0, -omega) * v)
}

/// Uniform grid `t_i = t0 + i step`, `i < n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub step: f64,
    pub n: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, step: f64, n: usize) -> Result<Self> {
        if !(step > 0.0) || n < 2 {
            return Err(Error::InvalidArgument(format!("grid needs a positive step and two nodes, got {step} and {n}")));
        }
        Ok(Self { t0, step, n })
    }

    /// Grid covering `[-before, mu + after]` with nodes on `0` and `mu`. The step is
    /// `min(2 pi / (40 omega_max), mu / 200)`, refined until the RK4 Wronskian drift
    /// estimate `mu omega^6 h^5 / 72` over the switching window stays below `1e-10`.
    pub fn for_profile(p: &FrequencyProfile, before: f64, after: f64) -> Result<Self> {
        if !(before >= 0.0 && after >= 0.0) {
            return Err(Error::InvalidArgument("grid padding must be non-negative".into()));
        }
        let w = p.omega_max();
        let drift = (72.0 * DRIFT_BUDGET / (p.mu * w.powi(6))).powf(0.2);
        let target = (2.0 * PI / (40.0 * w)).min(p.mu / 200.0).min(drift);
        let step = p.mu / (p.mu / target).ceil();
        let lead = (before / step).ceil() as usize;
        let tail = (after / step).ceil() as usize;
        let inner = (p.mu / step).round() as usize;
        Self::new(-(lead as f64) * step, step, lead + inner + tail + 1)
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.step
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.time(i)).collect()
    }

    pub fn end(&self) -> f64 {
        self.time(self.n - 1)
    }

    /// Node index of `t`, if `t` is a node.
    fn node(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.step;
        let i = x.round();
        ((x - i).abs() < 1e-9 && i >= 0.0 && (i as usize) < self.n).then_some(i as usize)
    }

    /// Node ranges between breakpoints, inclusive at both ends.
    fn segments(&self, breaks: &[f64]) -> Vec<(usize, usize)> {
        let mut cuts: Vec<usize> = breaks.iter().filter_map(|b| self.node(*b)).filter(|i| *i > 0 && *i + 1 < self.n).collect();
        cuts.sort_unstable();
        cuts.dedup();
        let mut out = Vec::new();
        let mut a = 0;
        for c in cuts {
            out.push((a, c));
            a = c;
        }
        out.push((a, self.n - 1));
        out
    }
}

/// Samples of a mode and its time derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeTrajectory {
    pub grid: TimeGrid,
    pub values: Vec<C64>,
    pub derivatives: Vec<C64>,
}

impl ModeTrajectory {
    /// `W = conj(T') T - conj(T) T'`.
    pub fn wronskian(&self, i: usize) -> C64 {
        self.derivatives[i].conj() * self.values[i] - self.values[i].conj() * self.derivatives[i]
    }

    pub fn max_wronskian_drift(&self) -> f64 {
        (0..self.values.len()).map(|i| (self.wronskian(i) - ci(0.0, 1.0)).norm()).fold(0.0, f64::max)
    }

    /// `(alpha, beta)` in `T = alpha u + beta conj(u)` for the vacuum mode `u` of frequency
    /// `omega`, read off at node `i`.
    pub fn bogoliubov(&self, i: usize, omega: f64) -> (C64, C64) {
        let t = self.grid.time(i);
        let s = (2.0 * omega).sqrt() / 2.0;
        let (v, d) = (self.values[i], self.derivatives[i]);
        let a = (v + ci(0.0, 1.0) * d / omega) * s * C64::from_polar(1.0, omega * t);
        let b = (v - ci(0.0, 1.0) * d / omega) * s * C64::from_polar(1.0, -omega * t);
        (a, b)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,re_T,im_T,im_W")?;
        for i in 0..self.values.len() {
            let v = self.values[i];
            writeln!(out, "{:.12e},{:.12e},{:.12e},{:.12e}", self.grid.time(i), v.re, v.im, self.wronskian(i).im)?;
        }
        Ok(())
    }
}

fn rk4_step(p: &FrequencyProfile, t: f64, h: f64, y: (C64, C64)) -> Result<(C64, C64)> {
    let w2 = |s: f64| -> Result<f64> {
        let v = p.omega2(s);
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::NonPositiveFrequency(s))
        }
    };
    let (a, b, c) = (w2(t)?, w2(t + 0.5 * h)?, w2(t + h)?);
    let k1 = (y.1, -a * y.0);
    let k2 = (y.1 + 0.5 * h * k1.1, -b * (y.0 + 0.5 * h * k1.0));
    let k3 = (y.1 + 0.5 * h * k2.1, -b * (y.0 + 0.5 * h * k2.0));
    let k4 = (y.1 + h * k3.1, -c * (y.0 + h * k3.0));
    Ok((
        y.0 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        y.1 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    ))
}

/// Exact rotation where `omega` is constant over the step, RK4 elsewhere.
fn step(p: &FrequencyProfile, t: f64, h: f64, y: (C64, C64)) -> Result<(C64, C64)> {
    let free = p.m1_sq == p.m2_sq || t + h <= 0.0 || t >= p.mu;
    if !free {
        return rk4_step(p, t, h, y);
    }
    let w2 = p.omega2(t);
    if !(w2 > 0.0) {
        return Err(Error::NonPositiveFrequency(t));
    }
    let w = w2.sqrt();
    let (c, s) = ((w * h).cos(), (w * h).sin());
    Ok((y.0 * c + y.1 * (s / w), y.0 * (-w * s) + y.1 * c))
}

/// RK4 from the `m1` vacuum data at `t0` inside the switching window, exact free
/// propagation outside it.
pub fn integrate_mode(p: &FrequencyProfile, grid: &TimeGrid) -> Result<ModeTrajectory> {
    let w_max = p.omega_max();
    if grid.step > 2.0 * PI / (40.0 * w_max) * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!("step {} resolves fewer than 40 steps per period of omega = {w_max}", grid.step)));
    }
    let w1 = p.omega_initial();
    if !(w1 > 0.0) {
        return Err(Error::NonPositiveFrequency(grid.t0));
    }
    let mut y = vacuum_mode(w1, grid.t0);
    let mut values = Vec::with_capacity(grid.n);
    let mut derivatives = Vec::with_capacity(grid.n);
    values.push(y.0);
    derivatives.push(y.1);
    for i in 0..grid.n - 1 {
        y = step(p, grid.time(i), grid.step, y)?;
        values.push(y.0);
        derivatives.push(y.1);
    }
    let traj = ModeTrajectory { grid: *grid, values, derivatives };
    let drift = traj.max_wronskian_drift();
    if drift > WRONSKIAN_TOLERANCE {
        return Err(Error::Resolution(format!("Wronskian drift {drift:.3e} exceeds {WRONSKIAN_TOLERANCE:e}")));
    }
    Ok(traj)
}

/// The mode and its derivative at an arbitrary time inside the grid, by one partial step.
pub fn mode_at(p: &FrequencyProfile, traj: &ModeTrajectory, t: f64) -> Result<(C64, C64)> {
    let g = traj.grid;
    if t < g.t0 || t > g.end() + 1e-12 {
        return Err(Error::InvalidArgument(format!("time {t} outside the trajectory")));
    }
    let i = (((t - g.t0) / g.step).floor() as usize).min(g.n - 1);
    let h = t - g.time(i);
    let y = (traj.values[i], traj.derivatives[i]);
    if h.abs() < 1e-15 {
        return Ok(y);
    }
    step(p, g.time(i), h, y)
}

const PHASE_RULE: QuadratureRule = QuadratureRule { order: 8, panels: 1 };

/// `Phi(t) = int omega` normalised so that `Phi = omega_1 t` before the switch.
fn phases(p: &FrequencyProfile, grid: &TimeGrid) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(grid.n);
    let mut phi = p.omega(grid.t0) * grid.t0;
    out.push(phi);
    for i in 0..grid.n - 1 {
        phi += PHASE_RULE.integrate(grid.time(i), grid.time(i + 1), |t| p.omega(t))?;
        out.push(phi);
    }
    Ok(out)
}

fn adiabatic_value(p: &FrequencyProfile, phi: f64, t: f64) -> C64 {
    C64::from_polar(1.0 / (2.0 * p.omega(t)).sqrt(), -phi)
}

/// `T_a = e^{-i Phi} / sqrt(2 omega)` with `T_a' = (-omega' / (2 omega) - i omega) T_a`, right limits at kinks.
pub fn adiabatic_mode(p: &FrequencyProfile, grid: &TimeGrid) -> Result<ModeTrajectory> {
    let phi = phases(p, grid)?;
    let mut values = Vec::with_capacity(grid.n);
    let mut derivatives = Vec::with_capacity(grid.n);
    for (i, ph) in phi.iter().enumerate() {
        let t = grid.time(i);
        let v = adiabatic_value(p, *ph, t);
        let w = p.omega(t);
        values.push(v);
        derivatives.push(ci(-p.omega_dot(t, Side::Right) / (2.0 * w), -w) * v);
    }
    Ok(ModeTrajectory { grid: *grid, values, derivatives })
}

/// `sup |(d_t^2 + omega^2 + lambda) T_a|` on grid nodes away from the kinks, by a
/// fourth-order difference with spacing `delta`.
pub fn adiabatic_residual(p: &FrequencyProfile, grid: &TimeGrid, delta: f64) -> Result<f64> {
    let phi = phases(p, grid)?;
    let breaks = p.breakpoints();
    let mut worst: f64 = 0.0;
    for (i, ph) in phi.iter().enumerate() {
        let t = grid.time(i);
        if breaks.iter().any(|b| (t - b).abs() <= 2.0 * delta) {
            continue;
        }
        let at = |s: f64| -> Result<C64> {
            let inc = PHASE_RULE.integrate(t, t + s, |x| p.omega(x))?;
            Ok(adiabatic_value(p, ph + inc, t + s))
        };
        let (m2, m1, c, p1, p2) = (at(-2.0 * delta)?, at(-delta)?, at(0.0)?, at(delta)?, at(2.0 * delta)?);
        let second = (-m2 + 16.0 * m1 - 30.0 * c + 16.0 * p1 - p2) / (12.0 * delta * delta);
        worst = worst.max((second + (p.omega2(t) + p.lambda(t, Side::Right)) * c).norm());
    }
    Ok(worst)
}

/// `int_{t0}^{t_i} g` on a uniform grid by four-point stencils within one smooth segment.
fn cumulative(values: &[C64], h: f64) -> Vec<C64> {
    let n = values.len();
    let mut out = vec![ci(0.0, 0.0); n];
    for i in 0..n.saturating_sub(1) {
        let inc = if n < 4 {
            (values[i] + values[i + 1]) * 0.5
        } else if i == 0 {
            (values[0] * 9.0 + values[1] * 19.0 - values[2] * 5.0 + values[3]) / 24.0
        } else if i == n - 2 {
            (values[n - 4] - values[n - 3] * 5.0 + values[n - 2] * 19.0 + values[n - 1] * 9.0) / 24.0
        } else {
            (-values[i - 1] + values[i] * 13.0 + values[i + 1] * 13.0 - values[i + 2]) / 24.0
        };
        out[i + 1] = out[i] + inc * h;
    }
    out
}

/// Cumulative integral of `g(i, side)` across segments, one-sided at segment ends.
fn cumulative_segments(grid: &TimeGrid, breaks: &[f64], g: impl Fn(usize, Side) -> C64) -> Vec<C64> {
    let mut out = vec![ci(0.0, 0.0); grid.n];
    for (a, b) in grid.segments(breaks) {
        let vals: Vec<C64> = (a..=b).map(|i| g(i, if i == b && b > a { Side::Left } else { Side::Right })).collect();
        let part = cumulative(&vals, grid.step);
        let base = out[a];
        for (j, v) in part.into_iter().enumerate() {
            out[a + j] = base + v;
        }
    }
    out
}

/// Terms `R_lambda^n(T_a)` with the data for the exponential bound.
#[derive(Clone, Debug, PartialEq)]
pub struct RLambdaSeries {
    pub grid: TimeGrid,
    pub omega: Vec<f64>,
    /// `I(t) = int |lambda| / omega`, atoms included.
    pub lambda_integral: Vec<f64>,
    pub terms: Vec<Vec<C64>>,
}

impl RLambdaSeries {
    pub fn partial_sum(&self, n: usize) -> Vec<C64> {
        let mut s = vec![ci(0.0, 0.0); self.grid.n];
        for term in self.terms.iter().take(n + 1) {
            for (a, b) in s.iter_mut().zip(term) {
                *a += b;
            }
        }
        s
    }

    /// `(e^I - sum_{j<=n} I^j / j!) / sqrt(2 omega)`, bounding `|T - sum_{j<=n} R^j T_a|`.
    pub fn tail_bound(&self, n: usize) -> Vec<f64> {
        self.lambda_integral
            .iter()
            .zip(&self.omega)
            .map(|(x, w)| {
                let mut head = 0.0;
                let mut term = 1.0;
                for j in 0..=n {
                    if j > 0 {
                        term *= x / j as f64;
                    }
                    head += term;
                }
                (x.exp() - head).max(0.0) / (2.0 * w).sqrt()
            })
            .collect()
    }

    pub fn term_sup_norms(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.iter().map(|z| z.norm()).fold(0.0, f64::max)).collect()
    }
}

/// `R_lambda(h)(t) = int_{-inf}^t sin(Phi(t) - Phi(s)) / sqrt(omega(t) omega(s)) lambda(s) h(s) ds`
/// applied `n_terms` times to `T_a`.
pub fn r_lambda_iterate(p: &FrequencyProfile, t_a: &ModeTrajectory, n_terms: usize) -> Result<RLambdaSeries> {
    let grid = t_a.grid;
    let phi = phases(p, &grid)?;
    let omega: Vec<f64> = (0..grid.n).map(|i| p.omega(grid.time(i))).collect();
    let breaks = p.breakpoints();
    let atoms: Vec<(usize, f64)> = p
        .lambda_atoms()
        .into_iter()
        .map(|(t, a)| grid.node(t).map(|i| (i, a)).ok_or_else(|| Error::InvalidArgument(format!("kink at {t} is not a grid node"))))
        .collect::<Result<_>>()?;
    let lam = |i: usize, side: Side| p.lambda(grid.time(i), side);
    let abs_int = cumulative_segments(&grid, &breaks, |i, s| ci(lam(i, s).abs() / omega[i], 0.0));
    let lambda_integral: Vec<f64> = (0..grid.n)
        .map(|i| abs_int[i].re + atoms.iter().filter(|(j, _)| *j <= i).map(|(j, a)| a.abs() / omega[*j]).sum::<f64>())
        .collect();
    let mut terms = vec![t_a.values.clone()];
    for _ in 0..n_terms {
        let h = terms.last().expect("seeded");
        let weight = |i: usize, side: Side, sign: f64| C64::from_polar(lam(i, side) / omega[i].sqrt(), -sign * phi[i]) * h[i];
        let mut plus = cumulative_segments(&grid, &breaks, |i, s| weight(i, s, 1.0));
        let mut minus = cumulative_segments(&grid, &breaks, |i, s| weight(i, s, -1.0));
        for &(j, a) in &atoms {
            let (wp, wm) = (C64::from_polar(a / omega[j].sqrt(), -phi[j]) * h[j], C64::from_polar(a / omega[j].sqrt(), phi[j]) * h[j]);
            for i in j..grid.n {
                plus[i] += wp;
                minus[i] += wm;
            }
        }
        let next = (0..grid.n)
            .map(|i| (C64::from_polar(1.0, phi[i]) * plus[i] - C64::from_polar(1.0, -phi[i]) * minus[i]) / (ci(0.0, 2.0) * omega[i].sqrt()))
            .collect();
        terms.push(next);
    }
    Ok(RLambdaSeries { grid, omega, lambda_integral, terms })
}

/// Error of one mode after the switch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub mu: f64,
    pub k: f64,
    pub error: f64,
}

/// Adiabatic-limit scan over `mu` and `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceScan {
    pub rows: Vec<ScanRow>,
    /// `(mu, sup_k error)`.
    pub sup_errors: Vec<(f64, f64)>,
    /// Least-squares slope of `ln sup_error` against `ln mu`.
    pub slope: f64,
}

impl ConvergenceScan {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# fitted log-log slope {:.6}", self.slope)?;
        writeln!(out, "mu,k,error")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:.12e}", r.mu, r.k, r.error)?;
        }
        Ok(())
    }
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// The mode's distance from the `m2` vacuum after the switch, as the Bogoliubov
/// coefficient `|beta_k|`; the remaining difference is a phase.
pub fn adiabatic_error(p: &FrequencyProfile) -> Result<f64> {
    let period = 2.0 * PI / p.omega_min();
    let grid = TimeGrid::for_profile(p, period, period)?;
    let traj = integrate_mode(p, &grid)?;
    Ok(traj.bogoliubov(grid.n - 1, p.omega_final()).1.norm())
}

/// `sup_k |beta_k|` for each `mu`; the `mu` list must span a factor of at least 8.
pub fn adiabatic_convergence_scan(template: &FrequencyProfile, mus: &[f64], ks: &[f64]) -> Result<ConvergenceScan> {
    let lo = mus.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mus.iter().copied().fold(0.0, f64::max);
    if mus.len() < 2 || hi < 8.0 * lo {
        return Err(Error::InvalidArgument(format!("mu list must span a factor of 8, got [{lo}, {hi}]")));
    }
    if ks.is_empty() {
        return Err(Error::InvalidArgument("empty k list".into()));
    }
    let jobs: Vec<(f64, f64)> = mus.iter().flat_map(|m| ks.iter().map(move |k| (*m, *k))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(mu, k)| Ok(ScanRow { mu, k, error: adiabatic_error(&template.with_mu(mu)?.with_k(k)?)? }))
        .collect::<Result<Vec<_>>>()?;
    let sup_errors: Vec<(f64, f64)> = mus.iter().map(|m| (*m, rows.iter().filter(|r| r.mu == *m).map(|r| r.error).fold(0.0, f64::max))).collect();
    let slope = fit_slope(&sup_errors.iter().map(|(m, e)| (m.ln(), e.ln())).collect::<Vec<_>>());
    Ok(ConvergenceScan { rows, sup_errors, slope })
}

/// Monotonicity of `E / omega^2`, `E = |T'|^2 + omega^2 |T|^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Largest positive increment of `E / omega^2` between neighbouring nodes.
    pub max_increment: f64,
    /// For massless starts, `max (|T|^2 - 1/k)`.
    pub infrared_excess: Option<f64>,
}

pub fn energy_monotonicity(traj: &ModeTrajectory, p: &FrequencyProfile) -> Result<EnergyReport> {
    if p.m2_sq < p.m1_sq {
        return Err(Error::InvalidArgument("the energy bound needs a non-decreasing frequency".into()));
    }
    let ratio: Vec<f64> = (0..traj.values.len())
        .map(|i| {
            let w2 = p.omega2(traj.grid.time(i));
            (traj.derivatives[i].norm_sqr() + w2 * traj.values[i].norm_sqr()) / w2
        })
        .collect();
    let max_increment = ratio.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    let infrared_excess = (p.m1_sq == 0.0).then(|| traj.values.iter().map(|v| v.norm_sqr() - 1.0 / p.k).fold(f64::NEG_INFINITY, f64::max));
    Ok(EnergyReport { max_increment, infrared_excess })
}

/// One row of the mode-space Neumann scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeumannModeRow {
    pub n: usize,
    pub norm: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeumannModeScan {
    pub rows: Vec<NeumannModeRow>,
    /// Mean of `n |r^n phi| / |r^{n-1} phi|` over `n >= 2`: the `C` in a `C / n` decay.
    pub envelope: f64,
}

impl NeumannModeScan {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,norm,bound")?;
        for r in &self.rows {
            writeln!(out, "{},{:.12e},{:.12e}", r.n, r.norm, r.bound)?;
        }
        Ok(())
    }
}

/// Iterates `r phi(t) = -int_{t0}^t sin(omega (t - s)) / omega M(s) phi(s) ds` for one spatial
/// mode on `window`, starting from the vacuum mode, and compares `sup_t |r^n phi|` with
/// `(T^2 sup |M|)^n / n! sup |phi|`.
pub fn neumann_bound_scan(k: f64, m_sq: f64, mass: impl Fn(f64) -> f64, window: (f64, f64), n_max: usize, nodes: usize) -> Result<NeumannModeScan> {
    let (t0, t1) = window;
    if !(t1 > t0) || nodes < 4 {
        return Err(Error::InvalidArgument("need a non-empty window and at least four nodes".into()));
    }
    let w = (k * k + m_sq).sqrt();
    if !(w > 0.0) {
        return Err(Error::NonPositiveFrequency(t0));
    }
    let grid = TimeGrid::new(t0, (t1 - t0) / (nodes - 1) as f64, nodes)?;
    let times = grid.times();
    let m: Vec<f64> = times.iter().map(|t| mass(*t)).collect();
    let m_norm = m.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let mut phi: Vec<C64> = times.iter().map(|t| vacuum_mode(w, *t).0).collect();
    let sup = |v: &[C64]| v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let phi_norm = sup(&phi);
    let span = t1 - t0;
    let mut rows = vec![NeumannModeRow { n: 0, norm: phi_norm, bound: phi_norm }];
    let mut factorial = 1.0;
    for n in 1..=n_max {
        let plus = cumulative(&times.iter().zip(&phi).zip(&m).map(|((t, f), mm)| C64::from_polar(*mm, -w * t) * f).collect::<Vec<_>>(), grid.step);
        let minus = cumulative(&times.iter().zip(&phi).zip(&m).map(|((t, f), mm)| C64::from_polar(*mm, w * t) * f).collect::<Vec<_>>(), grid.step);
        phi = (0..nodes)
            .map(|i| -(C64::from_polar(1.0, w * times[i]) * plus[i] - C64::from_polar(1.0, -w * times[i]) * minus[i]) / (ci(0.0, 2.0) * w))
            .collect();
        factorial *= n as f64;
        rows.push(NeumannModeRow { n, norm: sup(&phi), bound: (span * span * m_norm).powi(n as i32) / factorial * phi_norm });
    }
    let ratios: Vec<f64> = rows.windows(2).skip(1).filter(|r| r[0].norm > 0.0).map(|r| r[1].n as f64 * r[1].norm / r[0].norm).collect();
    let envelope = if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
    Ok(NeumannModeScan { rows, envelope })
}

/// Momentum quadrature for assembling kernels from modes, with the `e^{-eps k}` regulator
/// removed by linear extrapolation from `eps` and `2 eps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KQuadrature {
    pub k_max: f64,
    pub rule: QuadratureRule,
    pub epsilon: f64,
}

impl KQuadrature {
    pub fn validate(&self) -> Result<()> {
        self.rule.validate()?;
        if !(self.k_max > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Quadrature(format!("need k_max > 0 and eps > 0, got {} and {}", self.k_max, self.epsilon)));
        }
        Ok(())
    }
}

/// An equal-time sample of the assembled kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub t: f64,
    pub r: f64,
    pub value: f64,
    /// Spread between the two regulator values.
    pub regulator_spread: f64,
}

/// `int d^3k / (2 pi)^3 e^{ik.r} e^{-eps k} g(k)` for isotropic `g` with `g ~ 1/(2k)` at large `k`.
/// The `1/(2k)` part is integrated in closed form.
fn radial_transform(nodes: &[(f64, f64)], g: &[f64], r: f64, eps: f64) -> f64 {
    let body: f64 = nodes.iter().zip(g).map(|((k, w), gk)| w * k * (k * r).sin() * (gk - 0.5 / k) * (-eps * k).exp()).sum();
    (body + 0.5 * r / (r * r + eps * eps)) / (2.0 * PI * PI * r)
}

/// `Delta+(t, x; t, y)` with `|x - y| = r` in three dimensions, assembled from
/// `|T_k(t)|^2` of the switched modes: `(1 / 2 pi^2 r) int k sin(k r) |T_k(t)|^2 dk`.
pub fn pushforward_two_point_modes(template: &FrequencyProfile, pairs: &[(f64, f64)], kq: &KQuadrature) -> Result<Vec<KernelSample>> {
    kq.validate()?;
    if let Some(bad) = pairs.iter().find(|(_, r)| !(*r > 0.0)) {
        return Err(Error::InvalidArgument(format!("separation {} must be positive", bad.1)));
    }
    let t_last = pairs.iter().map(|p| p.0).fold(template.mu, f64::max);
    let nodes = kq.rule.nodes(0.0, kq.k_max)?;
    // |T_k(t)|^2 per node and sample time
    let table: Vec<Vec<f64>> = nodes
        .par_iter()
        .map(|&(k, _)| {
            let p = template.with_k(k)?;
            let grid = TimeGrid::for_profile(&p, 2.0 * PI / p.omega_min(), t_last - p.mu + 1e-9)?;
            let traj = integrate_mode(&p, &grid)?;
            pairs.iter().map(|(t, _)| Ok(mode_at(&p, &traj, *t)?.0.norm_sqr())).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    pairs
        .iter()
        .enumerate()
        .map(|(j, &(t, r))| {
            let g: Vec<f64> = table.iter().map(|row| row[j]).collect();
            let a = radial_transform(&nodes, &g, r, kq.epsilon);
            let b = radial_transform(&nodes, &g, r, 2.0 * kq.epsilon);
            let value = 2.0 * a - b;
            let spread = (a - b).abs();
            if spread > 1e-2 * value.abs().max(1e-300) {
                return Err(Error::Quadrature(format!("regulator dependence {spread:.3e} too strong at r = {r}")));
            }
            Ok(KernelSample { t, r, value, regulator_spread: spread })
        })
        .collect()
}

/// Static assembly of `d(x, x) = (1 / 2 pi^2) int k^2 n(omega) / omega dk` for mass `m`.
pub fn thermal_coincidence_modes(m_sq: f64, beta: f64, kq: &KQuadrature) -> Result<f64> {
    kq.validate()?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidBeta(beta));
    }
    kq.rule.integrate(0.0, kq.k_max, |k| {
        let w = (k * k + m_sq).sqrt();
        if w == 0.0 {
            0.0
        } else {
            k * k / (w * (beta * w).exp_m1())
        }
    }).map(|v| v / (2.0 * PI * PI))
}
